"""Post-layer-norm transformer cross-encoder with an exposed forward trace."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, CLS, SEP = 0, 1, 2
NUM_SPECIAL = 3
MASK_VALUE = -1e9
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of one cross-encoder.

    ``vocab`` counts content tokens only; the embedding table carries
    ``NUM_SPECIAL`` extra rows for [PAD], [CLS] and [SEP], and content token
    ``t`` is stored at row ``t + NUM_SPECIAL``.
    """

    num_layers: int = 2
    hidden: int = 32
    heads: int = 2
    ffn_dim: int = 128
    vocab: int = 200
    max_query_len: int = 32
    max_doc_len: int = 120
    type_vocab: int = 2
    max_positions: Optional[int] = None
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.max_positions is not None and self.max_positions < self.seq_len:
            raise ValueError("positional table shorter than max_query_len + max_doc_len + 3")

    @property
    def seq_len(self) -> int:
        return self.max_query_len + self.max_doc_len + 3

    @property
    def positions(self) -> int:
        return self.max_positions or self.seq_len

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def requires_grad_(self, flag: bool) -> "EncoderParams":
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(v.data.copy(), name=k)
                                           for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def save(self, path) -> None:
        save_params(self, path)


def init_params(config: EncoderConfig) -> EncoderParams:
    """Truncated-normal weights (std ``config.init_std``), zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed)
    H, F = config.hidden, config.ffn_dim
    std = config.init_std
    arrays: Dict[str, np.ndarray] = {
        "emb.token": _truncated_normal(rng, (config.vocab + NUM_SPECIAL, H), std),
        "emb.position": _truncated_normal(rng, (config.positions, H), std),
        "emb.segment": _truncated_normal(rng, (config.type_vocab, H), std),
        "emb.ln.gain": np.ones(H),
        "emb.ln.bias": np.zeros(H),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            arrays[p + f"attn.{proj}.weight"] = _truncated_normal(rng, (H, H), std)
            arrays[p + f"attn.{proj}.bias"] = np.zeros(H)
        arrays[p + "attn.ln.gain"] = np.ones(H)
        arrays[p + "attn.ln.bias"] = np.zeros(H)
        arrays[p + "ffn.in.weight"] = _truncated_normal(rng, (H, F), std)
        arrays[p + "ffn.in.bias"] = np.zeros(F)
        arrays[p + "ffn.out.weight"] = _truncated_normal(rng, (F, H), std)
        arrays[p + "ffn.out.bias"] = np.zeros(H)
        arrays[p + "ffn.ln.gain"] = np.ones(H)
        arrays[p + "ffn.ln.bias"] = np.zeros(H)
    arrays["pooler.weight"] = _truncated_normal(rng, (H, H), std)
    arrays["pooler.bias"] = np.zeros(H)
    arrays["classifier.weight"] = _truncated_normal(rng, (H, 2), std)
    arrays["classifier.bias"] = np.zeros(2)
    return EncoderParams(config, {k: Tensor(v, name=k) for k, v in arrays.items()})


def pack_input(query: Sequence[int], doc: Sequence[int],
               config: EncoderConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build ``[CLS] q' [SEP] d' [SEP]`` with truncation; returns ids, segments, mask."""
    if len(query) == 0 or len(doc) == 0:
        raise ValueError("query and document must both be nonempty")
    q = [int(t) + NUM_SPECIAL for t in list(query)[: config.max_query_len]]
    d = [int(t) + NUM_SPECIAL for t in list(doc)[: config.max_doc_len]]
    ids = np.array([CLS] + q + [SEP] + d + [SEP], dtype=np.int64)
    segments = np.zeros(len(ids), dtype=np.int64)
    segments[len(q) + 2:] = 1
    mask = np.ones(len(ids), dtype=np.int64)
    return ids, segments, mask


def pack_batch(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]],
               config: EncoderConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack (query, doc) pairs and right-pad to the longest sequence."""
    packed = [pack_input(q, d, config) for q, d in pairs]
    n = max(len(p[0]) for p in packed)
    ids = np.full((len(packed), n), PAD, dtype=np.int64)
    segments = np.zeros((len(packed), n), dtype=np.int64)
    mask = np.zeros((len(packed), n), dtype=np.int64)
    for i, (a, s, m) in enumerate(packed):
        ids[i, : len(a)], segments[i, : len(a)], mask[i, : len(a)] = a, s, m
    return ids, segments, mask


@dataclass
class ForwardTrace:
    """Intermediate quantities of one forward pass.

    Shapes carry a leading batch axis when ``encode`` received a batch.
    ``attn_scores`` are pre-softmax, after the additive key mask.
    """

    emb_out: Tensor
    hidden: List[Tensor]
    attn_scores: List[Tensor]
    logits: Tensor
    mask: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.hidden)


def _linear(x: Tensor, params: EncoderParams, name: str) -> Tensor:
    return x @ params[name + ".weight"] + params[name + ".bias"]


def encode(params: EncoderParams, ids, segments, mask) -> ForwardTrace:
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    mask = np.asarray(mask)
    single = ids.ndim == 1
    if single:
        ids, segments, mask = ids[None], segments[None], mask[None]
    if ids.shape != segments.shape or ids.shape != mask.shape:
        raise T.ShapeError(f"ids {ids.shape}, segments {segments.shape} and mask {mask.shape} differ")
    B, S = ids.shape
    if S > cfg.positions:
        raise T.ShapeError(f"sequence length {S} exceeds positional table {cfg.positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab + NUM_SPECIAL:
        raise IndexError(f"token id outside vocabulary of {cfg.vocab + NUM_SPECIAL}")
    A, d = cfg.heads, cfg.head_dim

    x = (T.gather(params["emb.token"], ids)
         + T.gather(params["emb.position"], np.arange(S))
         + T.gather(params["emb.segment"], segments))
    x = T.layer_norm(x, params["emb.ln.gain"], params["emb.ln.bias"])
    emb_out = x

    key_mask = Tensor(np.where(mask[:, None, None, :] > 0, 0.0, MASK_VALUE))
    inv_sqrt_d = 1.0 / math.sqrt(d)
    hidden, scores_all = [], []
    for i in range(cfg.num_layers):
        p = f"layer{i}."

        def heads(t):
            return t.reshape(B, S, A, d).transpose(0, 2, 1, 3)

        q = heads(_linear(x, params, p + "attn.q"))
        k = heads(_linear(x, params, p + "attn.k"))
        v = heads(_linear(x, params, p + "attn.v"))
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), inv_sqrt_d) + key_mask
        probs = T.softmax(scores, axis=-1)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, S, cfg.hidden)
        x = T.layer_norm(x + _linear(ctx, params, p + "attn.o"),
                         params[p + "attn.ln.gain"], params[p + "attn.ln.bias"])
        ff = _linear(T.gelu(_linear(x, params, p + "ffn.in")), params, p + "ffn.out")
        x = T.layer_norm(x + ff, params[p + "ffn.ln.gain"], params[p + "ffn.ln.bias"])
        hidden.append(x)
        scores_all.append(scores)

    pooled = T.tanh(_linear(x[:, 0, :], params, "pooler"))
    logits = _linear(pooled, params, "classifier")
    if single:
        emb_out = emb_out[0]
        hidden = [h[0] for h in hidden]
        scores_all = [s[0] for s in scores_all]
        logits = logits[0]
        mask = mask[0]
    return ForwardTrace(emb_out, hidden, scores_all, logits, mask)


def encode_pairs(params: EncoderParams, pairs) -> ForwardTrace:
    return encode(params, *pack_batch(pairs, params.config))


def ranking_score(trace_or_logits, scoring: str = "probability") -> Tensor:
    """Relevance score from 2-way logits (index 0 = relevant).

    ``probability`` is softmax(z)[0]; ``logit`` is the log-odds z[0] - z[1],
    a strictly monotone transform of the probability.
    """
    z = trace_or_logits.logits if isinstance(trace_or_logits, ForwardTrace) else trace_or_logits
    if scoring == "probability":
        return T.softmax(z, axis=-1)[..., 0]
    if scoring == "logit":
        return z[..., 0] - z[..., 1]
    raise ValueError(f"unknown scoring mode {scoring!r}")


# -- checkpoints ----------------------------------------------------------
def save_params(params: EncoderParams, path) -> None:
    """Write an ``.npz`` holding every tensor plus a JSON manifest entry."""
    manifest = {
        "format": "rankdistill-encoder",
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "tensors": {k: list(v.shape) for k, v in params.tensors.items()},
    }
    arrays = {k: v.data for k, v in params.tensors.items()}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> EncoderParams:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("format") != "rankdistill-encoder":
            raise ValueError(f"{path}: not an encoder checkpoint")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        config = EncoderConfig.from_dict(manifest["config"])
        tensors = {}
        for name, shape in manifest["tensors"].items():
            arr = np.array(z[name], dtype=np.float64)
            if list(arr.shape) != shape:
                raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, manifest says {shape}")
            tensors[name] = Tensor(arr, name=name)
    return EncoderParams(config, tensors)
