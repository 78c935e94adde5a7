"""Re-ranking, MRR@k and run comparison."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .data import DevSet
from .encoder import EncoderParams, encode_pairs, ranking_score
from .tensor import no_grad


@dataclass
class RankedList:
    order: List[int]
    scores: List[float]


def rank_scores(scores: Sequence[float]) -> RankedList:
    """Descending by score; ties go to the lower candidate index."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))
    return RankedList([int(i) for i in order], [float(s[i]) for i in order])


def score_candidates(params: EncoderParams, query, docs, scoring: str = "probability",
                     batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(docs), batch_size):
            chunk = docs[i:i + batch_size]
            trace = encode_pairs(params, [(query, d) for d in chunk])
            out.append(ranking_score(trace, scoring).data)
    return np.concatenate(out)


def rerank(params_or_scorer, devset: DevSet, scoring: str = "probability") -> List[RankedList]:
    """Rank every dev query's candidates.

    Accepts encoder parameters or any ``scorer(query, doc) -> float``.
    """
    ranked = []
    for q, docs in zip(devset.queries, devset.candidates):
        if isinstance(params_or_scorer, EncoderParams):
            s = score_candidates(params_or_scorer, q, docs, scoring)
        else:
            s = [params_or_scorer(q, d) for d in docs]
        ranked.append(rank_scores(s))
    return ranked


def reciprocal_ranks(ranked: Sequence[RankedList], labels: Sequence[Sequence[int]],
                     k: int = 10) -> List[float]:
    if len(ranked) != len(labels):
        raise ValueError("ranked lists and labels differ in length")
    out = []
    for qi, (r, lab) in enumerate(zip(ranked, labels)):
        lab = np.asarray(lab)
        if len(lab) == 0:
            raise ValueError(f"query {qi} has no labels")
        if len(r.order) > len(lab):
            raise ValueError(f"query {qi}: labels do not cover all candidates")
        rr = 0.0
        for rank, cand in enumerate(r.order[:k], start=1):
            if lab[cand] > 0:
                rr = 1.0 / rank
                break
        out.append(rr)
    return out


def mrr_at_k(ranked: Sequence[RankedList], labels: Sequence[Sequence[int]], k: int = 10) -> float:
    rr = reciprocal_ranks(ranked, labels, k)
    return float(np.mean(rr)) if rr else 0.0


@dataclass
class RunReport:
    config_hash: str
    seed: int
    mrr_at_10: float
    per_query_rr: List[float]
    wall_seconds: float = 0.0
    devset_fingerprint: str = ""
    method: str = ""
    extra: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.mrr_at_10 <= 1.0:
            raise ValueError("MRR@10 outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def evaluate(params, devset: DevSet, *, seed: int = 0, config_hash: str = "",
             method: str = "", scoring: str = "probability", k: int = 10,
             wall_seconds: float = 0.0) -> RunReport:
    rr = reciprocal_ranks(rerank(params, devset, scoring), devset.labels, k)
    return RunReport(config_hash, seed, float(np.mean(rr)), rr, wall_seconds,
                     devset.fingerprint(), method)


def write_run_file(ranked: Sequence[RankedList], devset: DevSet, path) -> None:
    """Whitespace-separated ``qid docid rank score`` lines."""
    with open(path, "w", encoding="utf-8") as f:
        for qid, docids, r in zip(devset.qids, devset.docids, ranked):
            for rank, (cand, s) in enumerate(zip(r.order, r.scores), start=1):
                f.write(f"{qid} {docids[cand]} {rank} {s!r}\n")


def compare_runs(a, b) -> dict:
    """Compare two runs (or two lists of per-seed runs) on the same devset.

    ``wins_a`` counts seeds where ``a`` has strictly higher MRR@10.
    """
    a_runs = a if isinstance(a, (list, tuple)) else [a]
    b_runs = b if isinstance(b, (list, tuple)) else [b]
    if len(a_runs) != len(b_runs):
        raise ValueError("run lists differ in length")
    wins_a = wins_b = ties = 0
    deltas, per_query = [], []
    for ra, rb in zip(a_runs, b_runs):
        if ra.devset_fingerprint != rb.devset_fingerprint or len(ra.per_query_rr) != len(rb.per_query_rr):
            raise ValueError("runs were evaluated on different devsets")
        d = ra.mrr_at_10 - rb.mrr_at_10
        deltas.append(d)
        per_query.append([x - y for x, y in zip(ra.per_query_rr, rb.per_query_rr)])
        if d > 0:
            wins_a += 1
        elif d < 0:
            wins_b += 1
        else:
            ties += 1
    return {
        "mrr_delta": float(np.mean(deltas)),
        "per_seed_delta": deltas,
        "wins_a": wins_a,
        "wins_b": wins_b,
        "ties": ties,
        "per_query_delta": per_query if len(per_query) > 1 else per_query[0],
    }
