"""Synthetic ranking tasks with a known relevance oracle, plus TSV ingestion."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class SyntheticTaskSpec:
    # desk defaults: small enough that a randomly initialised 4x64 teacher learns the task
    vocab_size: int = 64
    query_len: int = 6
    doc_len: int = 12
    pos_overlap_min: int = 3
    neg_overlap_max: int = 1
    noise_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.neg_overlap_max < self.pos_overlap_min <= self.query_len:
            raise ValueError("need 0 <= neg_overlap_max < pos_overlap_min <= query_len")
        if self.vocab_size <= self.query_len + self.doc_len:
            raise ValueError("vocab_size must exceed query_len + doc_len")
        if self.pos_overlap_min > self.doc_len:
            raise ValueError("pos_overlap_min cannot exceed doc_len")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Triple:
    query: Tuple[int, ...]
    pos_doc: Tuple[int, ...]
    neg_doc: Tuple[int, ...]


@dataclass
class DevSet:
    queries: List[Tuple[int, ...]]
    candidates: List[List[Tuple[int, ...]]]
    labels: List[List[int]]
    qids: List[str] = None
    docids: List[List[str]] = None

    def __post_init__(self):
        if not (len(self.queries) == len(self.candidates) == len(self.labels)):
            raise ValueError("queries, candidates and labels differ in length")
        for i, (c, l) in enumerate(zip(self.candidates, self.labels)):
            if len(c) != len(l):
                raise ValueError(f"query {i}: {len(c)} candidates but {len(l)} labels")
            if not any(l):
                raise ValueError(f"query {i} has no relevant candidate")
        if self.qids is None:
            self.qids = [str(i) for i in range(len(self.queries))]
        if self.docids is None:
            self.docids = [[str(j) for j in range(len(c))] for c in self.candidates]

    def __len__(self) -> int:
        return len(self.queries)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for q, c, l in zip(self.queries, self.candidates, self.labels):
            h.update(repr((q, c, l)).encode())
        return h.hexdigest()[:16]


def relevance_oracle(query: Sequence[int], doc: Sequence[int]) -> float:
    """Fraction of distinct query tokens that appear in the document."""
    qs = set(query)
    if not qs:
        raise ValueError("empty query")
    return len(qs & set(doc)) / len(qs)


# -- generation -----------------------------------------------------------
def _rng(spec: SyntheticTaskSpec, stream: int, index: int) -> np.random.Generator:
    # per-sample substream so generation can be partitioned by index
    return np.random.default_rng([spec.seed, stream, index])


def _make_doc(rng, spec: SyntheticTaskSpec, query: np.ndarray, overlap: int) -> Tuple[int, ...]:
    shared = rng.choice(query, size=overlap, replace=False)
    pool = np.setdiff1d(np.arange(spec.vocab_size), query, assume_unique=True)
    filler = rng.choice(pool, size=spec.doc_len - overlap, replace=False)
    doc = np.concatenate([shared, filler])
    rng.shuffle(doc)
    return tuple(int(t) for t in doc)


def _query(rng, spec: SyntheticTaskSpec) -> np.ndarray:
    return rng.choice(spec.vocab_size, size=spec.query_len, replace=False)


def _pos_overlap(rng, spec: SyntheticTaskSpec, hard: bool) -> int:
    hi = min(spec.query_len, spec.doc_len)
    return spec.pos_overlap_min if hard else int(rng.integers(spec.pos_overlap_min, hi + 1))


def _neg_overlap(rng, spec: SyntheticTaskSpec, hard: bool) -> int:
    return spec.neg_overlap_max if hard else int(rng.integers(0, spec.neg_overlap_max + 1))


def gen_triples(spec: SyntheticTaskSpec, n: int, stream: int = 0) -> List[Triple]:
    """``n`` triples; with probability ``noise_prob`` the overlaps sit on the thresholds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        rng = _rng(spec, 1000 + stream, i)
        q = _query(rng, spec)
        hard = rng.random() < spec.noise_prob
        pos = _make_doc(rng, spec, q, _pos_overlap(rng, spec, hard))
        neg = _make_doc(rng, spec, q, _neg_overlap(rng, spec, hard))
        out.append(Triple(tuple(int(t) for t in q), pos, neg))
    return out


def gen_devset(spec: SyntheticTaskSpec, n_queries: int, n_candidates: int,
               n_relevant: int = 1, stream: int = 0) -> DevSet:
    """Dev queries whose relevant candidates have overlap >= pos_overlap_min.

    Candidate order is shuffled so relevant documents sit at random positions.
    """
    if n_queries < 1 or not 1 <= n_relevant < n_candidates:
        raise ValueError("need n_queries >= 1 and 1 <= n_relevant < n_candidates")
    queries, cands, labels = [], [], []
    for i in range(n_queries):
        rng = _rng(spec, 2000 + stream, i)
        q = _query(rng, spec)
        docs, labs = [], []
        for j in range(n_candidates):
            rel = j < n_relevant
            hard = rng.random() < spec.noise_prob
            k = _pos_overlap(rng, spec, hard) if rel else _neg_overlap(rng, spec, hard)
            docs.append(_make_doc(rng, spec, q, k))
            labs.append(int(rel))
        order = rng.permutation(n_candidates)
        queries.append(tuple(int(t) for t in q))
        cands.append([docs[j] for j in order])
        labels.append([labs[j] for j in order])
    return DevSet(queries, cands, labels)


# -- TSV ingestion --------------------------------------------------------
class TSVFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def token_id(token: str, vocab_size: int) -> int:
    """Stable 64-bit hash of ``token`` modulo ``vocab_size``."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def tokenize(text: str, vocab_size: int) -> Tuple[int, ...]:
    return tuple(token_id(t, vocab_size) for t in text.split())


def _read_rows(path, ncols: int):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise OSError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != ncols:
            raise TSVFormatError(path, lineno, f"expected {ncols} tab-separated columns, got {len(cols)}")
        yield lineno, cols


def load_triples_tsv(path, vocab_size: int = 200) -> List[Triple]:
    """Read ``query<TAB>positive<TAB>negative`` lines.

    Fields made only of integers are read as token ids directly, so files
    written by ``write_triples_tsv`` round-trip exactly.
    """
    out = []
    for lineno, cols in _read_rows(path, 3):
        toks = [_field_tokens(c, vocab_size) for c in cols]
        if not all(toks):
            raise TSVFormatError(path, lineno, "empty field")
        out.append(Triple(*toks))
    return out


def load_devset_tsv(path, vocab_size: int = 200) -> DevSet:
    """Read ``qid<TAB>docid<TAB>query<TAB>doc<TAB>label`` lines grouped by qid."""
    groups: Dict[str, dict] = {}
    for lineno, (qid, docid, query, doc, label) in _read_rows(path, 5):
        if label.strip() not in ("0", "1"):
            raise TSVFormatError(path, lineno, f"label must be 0 or 1, got {label!r}")
        q, d = _field_tokens(query, vocab_size), _field_tokens(doc, vocab_size)
        if not q or not d:
            raise TSVFormatError(path, lineno, "empty query or document")
        g = groups.setdefault(qid, {"query": q, "docs": [], "labels": [], "docids": []})
        g["docs"].append(d)
        g["labels"].append(int(label))
        g["docids"].append(docid)
    return DevSet([g["query"] for g in groups.values()], [g["docs"] for g in groups.values()],
                  [g["labels"] for g in groups.values()], list(groups),
                  [g["docids"] for g in groups.values()])


def _field_tokens(field: str, vocab_size: int) -> Tuple[int, ...]:
    parts = field.split()
    if parts and all(p.isdigit() for p in parts):
        ids = tuple(int(p) for p in parts)
        if max(ids) < vocab_size:
            return ids
    return tuple(token_id(p, vocab_size) for p in parts)


def _fmt(tokens) -> str:
    return " ".join(str(t) for t in tokens)


def write_triples_tsv(triples: Sequence[Triple], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triples:
            f.write(f"{_fmt(t.query)}\t{_fmt(t.pos_doc)}\t{_fmt(t.neg_doc)}\n")


def write_devset_tsv(dev: DevSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid, q, docids, docs, labs in zip(dev.qids, dev.queries, dev.docids,
                                              dev.candidates, dev.labels):
            for docid, d, l in zip(docids, docs, labs):
                f.write(f"{qid}\t{docid}\t{_fmt(q)}\t{_fmt(d)}\t{l}\n")
