"""Distillation and ranking losses, layer maps and composite objective plans.

Per-sample losses are averaged over the batch axis; composites are unit
weighted sums of active terms (weights are configurable per term).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .encoder import ForwardTrace, _truncated_normal, ranking_score
from .tensor import Tensor

LAYERWISE = ("attn", "hidn", "emb")
TERMS = ("attn", "hidn", "emb", "logits", "hard", "pair", "margin_mse")

RELEVANT, IRRELEVANT = 1, 0


# -- layer mapping --------------------------------------------------------
@dataclass(frozen=True)
class LayerMap:
    """Student layer -> teacher layer pairs (1-based) plus embedding flag."""

    pairs: Tuple[Tuple[int, int], ...]
    include_embedding: bool = True

    def __post_init__(self):
        s_prev = t_prev = 0
        for s, t in self.pairs:
            if s <= s_prev or t <= t_prev:
                raise ValueError(f"layer map must be strictly increasing: {self.pairs}")
            if s < 1 or t < 1:
                raise ValueError("layer indices are 1-based")
            s_prev, t_prev = s, t

    def teacher_layers(self) -> List[int]:
        return [t for _, t in self.pairs]

    def validate(self, teacher_layers: int, student_layers: int) -> None:
        for s, t in self.pairs:
            if s > student_layers or t > teacher_layers:
                raise ValueError(
                    f"mapping ({s}->{t}) outside student L={student_layers} / teacher L={teacher_layers}")


def make_layer_map(strategy: str, teacher_layers: int, student_layers: int,
                   k: Optional[int] = None, include_embedding: bool = True) -> LayerMap:
    """``uniform``: l -> l*(L_T/L_S); ``last_k``: l -> L_T-L_S+l; ``last_one``: L_S -> L_T."""
    strategy = strategy.lower().replace("-", "_")
    if student_layers > teacher_layers:
        raise ValueError("student deeper than teacher")
    if strategy == "uniform":
        if teacher_layers % student_layers:
            raise ValueError(
                f"uniform map needs L_T divisible by L_S, got {teacher_layers} and {student_layers}")
        step = teacher_layers // student_layers
        pairs = [(s, s * step) for s in range(1, student_layers + 1)]
    elif strategy == "last_k":
        if k is not None and k != student_layers:
            raise ValueError(f"last_k requires k == L_S ({student_layers}), got {k}")
        pairs = [(s, teacher_layers - student_layers + s) for s in range(1, student_layers + 1)]
    elif strategy == "last_one":
        pairs = [(student_layers, teacher_layers)]
    else:
        raise ValueError(f"unknown layer-map strategy {strategy!r}")
    return LayerMap(tuple(pairs), include_embedding)


# -- projections ----------------------------------------------------------
class ProjectionParams:
    """Learnable student->teacher width maps, one per mapped layer plus embeddings.

    Empty when the widths agree (identity projection).
    """

    def __init__(self, student_hidden: int, teacher_hidden: int, layer_map: LayerMap, seed: int = 0):
        self.student_hidden = student_hidden
        self.teacher_hidden = teacher_hidden
        self.tensors: Dict[str, Tensor] = {}
        if student_hidden != teacher_hidden:
            rng = np.random.default_rng([seed, 7919])
            for s, _ in layer_map.pairs:
                name = f"proj.layer{s}"
                self.tensors[name] = Tensor(
                    _truncated_normal(rng, (student_hidden, teacher_hidden)), name=name)
            if layer_map.include_embedding:
                self.tensors["proj.emb"] = Tensor(
                    _truncated_normal(rng, (student_hidden, teacher_hidden)), name="proj.emb")

    @property
    def identity(self) -> bool:
        return not self.tensors

    def apply(self, x: Tensor, key: str) -> Tensor:
        if self.identity:
            return x
        return x @ self.tensors[key]

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())


# -- single terms ---------------------------------------------------------
def _masked_scores(scores: Tensor, mask) -> Tensor:
    # masked key columns carry MASK_VALUE in both models; zero them out
    if mask is None or np.all(np.asarray(mask) > 0):
        return scores
    mask = np.asarray(mask)
    keep = (mask > 0).astype(np.float64)
    keep = keep[:, None, None, :] if keep.ndim == 2 else keep[None, None, :]
    return T.mul(scores, Tensor(keep))


def l_layerwise(trace_t: ForwardTrace, trace_s: ForwardTrace, layer_map: LayerMap,
                proj: Optional[ProjectionParams], kind: str, reduction: str = "mean") -> Tensor:
    """MSE between mapped teacher/student quantities (``attn``, ``hidn`` or ``emb``).

    ``attn`` compares pre-softmax scores, averaged over mapped layers and
    heads (no projection).  ``hidn`` averages MSE(H_S W, H_T) over mapped
    layers.  ``reduction='sum'`` sums over layers instead.
    """
    if kind not in LAYERWISE:
        raise ValueError(f"unknown layer-wise kind {kind!r}")
    layer_map.validate(trace_t.num_layers, trace_s.num_layers)
    proj = proj or ProjectionParams(0, 0, layer_map)
    if kind == "emb":
        return T.mse(proj.apply(trace_s.emb_out, "proj.emb"), trace_t.emb_out)
    terms = []
    for s, t in layer_map.pairs:
        if kind == "attn":
            a_t, a_s = trace_t.attn_scores[t - 1], trace_s.attn_scores[s - 1]
            if a_t.shape != a_s.shape:
                raise T.ShapeError(
                    f"attention shapes differ (teacher {a_t.shape}, student {a_s.shape}); "
                    "head counts and sequence lengths must match")
            terms.append(T.mse(_masked_scores(a_s, trace_s.mask), _masked_scores(a_t, trace_t.mask)))
        else:
            terms.append(T.mse(proj.apply(trace_s.hidden[s - 1], f"proj.layer{s}"),
                               trace_t.hidden[t - 1]))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    if reduction == "mean":
        return T.scale(total, 1.0 / len(terms))
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


def l_logits(z_t, z_s: Tensor, t: float = 1.0) -> Tensor:
    """Soft cross-entropy -sum softmax(z_t/t) * log_softmax(z_s/t), batch-averaged."""
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    z_t = T.as_tensor(z_t)
    with T.no_grad():
        target = T.softmax(T.scale(z_t, 1.0 / t), axis=-1).data
    logp = T.log_softmax(T.scale(z_s, 1.0 / t), axis=-1)
    per = T.scale(T.mul(logp, Tensor(target)).sum(axis=-1), -1.0)
    return per.mean()


def l_hard(z_s: Tensor, label) -> Tensor:
    """Cross-entropy against a binary label; label 1 (relevant) is class index 0."""
    labels = np.atleast_1d(np.asarray(label))
    if not np.isin(labels, (0, 1)).all() or labels.dtype.kind not in "iub":
        raise ValueError(f"labels must be 0 or 1, got {label!r}")
    cls = np.where(labels == RELEVANT, 0, 1)
    logp = T.log_softmax(z_s, axis=-1)
    if z_s.ndim == 1:
        return T.scale(logp[int(cls[0])], -1.0)
    return T.scale(logp[np.arange(z_s.shape[0]), cls], -1.0).mean()


def l_pair(score_pos: Tensor, score_neg: Tensor) -> Tensor:
    """Hinge max(0, 1 - f(q,d+) + f(q,d-)), batch-averaged."""
    score_pos, score_neg = T.as_tensor(score_pos), T.as_tensor(score_neg)
    return T.relu(1.0 - score_pos + score_neg).mean()


def l_margin_mse(ft_pos, ft_neg, fs_pos: Tensor, fs_neg: Tensor) -> Tensor:
    """((fS+ - fS-) - (fT+ - fT-))^2, batch-averaged."""
    teacher_margin = T.as_tensor(ft_pos).data - T.as_tensor(ft_neg).data
    d = T.sub(T.sub(fs_pos, fs_neg), Tensor(teacher_margin))
    return T.mul(d, d).mean()


# -- plans ----------------------------------------------------------------
@dataclass(frozen=True)
class ObjectivePlan:
    """Active terms, temperature, layer mapping and per-term weights."""

    attn: bool = False
    hidn: bool = False
    emb: bool = False
    logits: bool = False
    hard: bool = False
    pair: bool = False
    margin_mse: bool = False
    temperature: float = 1.0
    layer_map: str = "uniform"
    layer_reduction: str = "mean"
    weights: Dict[str, float] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        if self.pair and self.hard:
            raise ValueError("pair and hard are mutually exclusive (pairwise vs pointwise regime)")
        if self.margin_mse and self.hard:
            raise ValueError("margin_mse requires the pairwise regime")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not any(getattr(self, t) for t in TERMS):
            raise ValueError("plan has no active terms")
        unknown = set(self.weights) - set(TERMS)
        if unknown:
            raise ValueError(f"weights for unknown terms: {sorted(unknown)}")
        if self.layer_reduction not in ("mean", "sum"):
            raise ValueError("layer_reduction must be 'mean' or 'sum'")

    @property
    def pairwise(self) -> bool:
        return not self.hard

    @property
    def active(self) -> List[str]:
        return [t for t in TERMS if getattr(self, t)]

    @property
    def uses_layers(self) -> bool:
        return self.attn or self.hidn or self.emb

    @property
    def needs_teacher(self) -> bool:
        return self.uses_layers or self.logits or self.margin_mse

    def weight(self, term: str) -> float:
        return float(self.weights.get(term, 1.0))

    def resolve_map(self, teacher_layers: int, student_layers: int) -> LayerMap:
        return make_layer_map(self.layer_map, teacher_layers, student_layers,
                              include_embedding=self.emb)

    def to_dict(self) -> dict:
        d = {t: getattr(self, t) for t in TERMS}
        d.update(temperature=self.temperature, layer_map=self.layer_map,
                 layer_reduction=self.layer_reduction, weights=dict(self.weights), name=self.name)
        return d

    @classmethod
    def from_dict(cls, d) -> "ObjectivePlan":
        if isinstance(d, str):
            return preset(d)
        d = dict(d)
        if "preset" in d:
            base = preset(d.pop("preset"))
            return replace(base, **d)
        return cls(**d)


_PRESETS = {
    "L1": dict(attn=True, hidn=True, emb=True, hard=True, logits=True),
    "L2": dict(pair=True, attn=True, hidn=True, emb=True, logits=True),
    "L3": dict(pair=True, logits=True),
    "table3-no-intermediate": dict(pair=True, logits=True, emb=True),
    "table3-no-embedding": dict(pair=True, logits=True, attn=True, hidn=True),
    "table3-no-logits": dict(pair=True, attn=True, hidn=True, emb=True),
    "finetune": dict(pair=True),
    "finetune-pointwise": dict(hard=True),
    "margin-mse": dict(margin_mse=True),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, **overrides) -> ObjectivePlan:
    if name not in _PRESETS:
        raise ValueError(f"unknown objective preset {name!r}; choose from {', '.join(_PRESETS)}")
    kw = dict(_PRESETS[name])
    kw.update(overrides)
    return ObjectivePlan(name=name, **kw)


# -- composition ----------------------------------------------------------
def _layer_terms(plan: ObjectivePlan, trace_t, trace_s, layer_map, proj) -> Dict[str, Tensor]:
    return {kind: l_layerwise(trace_t, trace_s, layer_map, proj, kind, plan.layer_reduction)
            for kind in LAYERWISE if getattr(plan, kind)}


def compose_terms(plan: ObjectivePlan, teacher, student, label=None,
                  layer_map: Optional[LayerMap] = None,
                  proj: Optional[ProjectionParams] = None,
                  scoring: str = "probability") -> Dict[str, Tensor]:
    """Named, unweighted loss terms of ``plan``.

    Pointwise regime: ``teacher``/``student`` are single traces and ``label``
    gives relevance.  Pairwise regime: each is a ``(trace_pos, trace_neg)``
    tuple; per-pair terms get ``+``/``-`` suffixes.  ``teacher`` may be None
    when the plan needs no teacher.
    """
    if plan.needs_teacher and teacher is None:
        raise ValueError(f"plan {plan.name} needs teacher traces")
    if plan.uses_layers and layer_map is None:
        t_layers = (teacher[0] if plan.pairwise else teacher).num_layers
        s_layers = (student[0] if plan.pairwise else student).num_layers
        layer_map = plan.resolve_map(t_layers, s_layers)
    terms: Dict[str, Tensor] = {}
    if not plan.pairwise:
        if label is None:
            raise ValueError("pointwise plan needs labels")
        terms.update(_layer_terms(plan, teacher, student, layer_map, proj))
        if plan.hard:
            terms["hard"] = l_hard(student.logits, label)
        if plan.logits:
            terms["logits"] = l_logits(teacher.logits.data, student.logits, plan.temperature)
        return terms

    s_pos, s_neg = student
    t_pos, t_neg = teacher if teacher is not None else (None, None)
    if plan.pair:
        terms["pair"] = l_pair(ranking_score(s_pos, scoring), ranking_score(s_neg, scoring))
    for sign, t_tr, s_tr in (("+", t_pos, s_pos), ("-", t_neg, s_neg)):
        for kind, v in _layer_terms(plan, t_tr, s_tr, layer_map, proj).items():
            terms[kind + sign] = v
        if plan.logits:
            terms["logits" + sign] = l_logits(t_tr.logits.data, s_tr.logits, plan.temperature)
    if plan.margin_mse:
        with T.no_grad():
            ft_pos = ranking_score(t_pos, "logit")
            ft_neg = ranking_score(t_neg, "logit")
        terms["margin_mse"] = l_margin_mse(ft_pos, ft_neg,
                                           ranking_score(s_pos, "logit"), ranking_score(s_neg, "logit"))
    return terms


def _base(term: str) -> str:
    return term.rstrip("+-")


def total_loss(plan: ObjectivePlan, terms: Dict[str, Tensor]) -> Tensor:
    out = None
    for name, v in terms.items():
        w = plan.weight(_base(name))
        v = v if w == 1.0 else T.scale(v, w)
        out = v if out is None else out + v
    return out


def compose(plan: ObjectivePlan, teacher, student, label=None,
            layer_map: Optional[LayerMap] = None, proj: Optional[ProjectionParams] = None,
            scoring: str = "probability") -> Tensor:
    """Weighted sum of the plan's active terms (see ``compose_terms``)."""
    return total_loss(plan, compose_terms(plan, teacher, student, label, layer_map, proj, scoring))
