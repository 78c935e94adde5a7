"""Teacher fine-tuning and single-stage student distillation with Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Triple
from .encoder import (EncoderConfig, EncoderParams, ForwardTrace, encode, init_params,
                      pack_batch)
from .objectives import ObjectivePlan, ProjectionParams, compose_terms, preset, total_loss
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    objective_plan: ObjectivePlan = field(default_factory=lambda: preset("L3"))
    teacher_config: EncoderConfig = field(default_factory=EncoderConfig)
    student_config: EncoderConfig = field(default_factory=EncoderConfig)
    data_fraction: float = 1.0
    teacher_objective: str = "pair"
    scoring: str = "probability"

    def __post_init__(self):
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.teacher_objective not in ("pair", "pointwise"):
            raise ValueError("teacher_objective must be 'pair' or 'pointwise'")


# -- optimiser ------------------------------------------------------------
@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: OptimizerState, lr: float) -> OptimizerState:
    """In-place bias-corrected Adam update; ``state`` is keyed by position in ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None:
            if g.shape != p.shape:
                raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {p.name or i}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if not g.any() and not m.any():
            continue
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# -- helpers --------------------------------------------------------------
@dataclass
class TrainResult:
    params: EncoderParams
    history: List[Dict[str, float]]
    projection: Optional[ProjectionParams] = None

    @property
    def losses(self) -> List[float]:
        return [h["total"] for h in self.history]

    def write_history_csv(self, path) -> None:
        write_history_csv(self.history, path)


def write_history_csv(history: List[Dict[str, float]], path) -> None:
    keys = ["step"]
    for h in history:
        for k in h:
            if k not in keys:
                keys.append(k)
    if "total" in keys:
        keys.remove("total")
        keys.append("total")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for h in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in h.items()})


def select_fraction(triples: Sequence[Triple], fraction: float, seed: int) -> List[Triple]:
    """Prefix of a seed-shuffled order covering ``ceil(fraction * n)`` triples."""
    n = len(triples)
    order = np.random.default_rng([seed, 17]).permutation(n)
    keep = max(1, int(math.ceil(round(fraction * n, 9))))
    return [triples[i] for i in order[:keep]]


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, 31, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _split(trace: ForwardTrace, b: int):
    """Split a trace over 2b rows into (first b rows, last b rows)."""
    def part(sl):
        emb = trace.emb_out[sl] if trace.emb_out is not None else None
        mask = trace.mask[sl] if trace.mask is not None else None
        return ForwardTrace(emb, [h[sl] for h in trace.hidden],
                            [a[sl] for a in trace.attn_scores], trace.logits[sl], mask)
    return part(slice(0, b)), part(slice(b, 2 * b))


def _forward_pairs(params: EncoderParams, batch: Sequence[Triple]):
    pairs = [(t.query, t.pos_doc) for t in batch] + [(t.query, t.neg_doc) for t in batch]
    return encode(params, *pack_batch(pairs, params.config))


def _teacher_logits(teacher: EncoderParams, data: Sequence[Triple], chunk: int = 128) -> np.ndarray:
    """Teacher logits for every triple, shape (n, 2, 2): [pos|neg] x classes."""
    out = np.empty((len(data), 2, 2))
    with T.no_grad():
        for i in range(0, len(data), chunk):
            batch = data[i:i + chunk]
            z = _forward_pairs(teacher, batch).logits.data
            out[i:i + len(batch), 0] = z[: len(batch)]
            out[i:i + len(batch), 1] = z[len(batch):]
    return out


def _logit_trace(z: np.ndarray) -> ForwardTrace:
    return ForwardTrace(None, [], [], Tensor(z), None)


def _record(step: int, terms: Dict[str, Tensor], total: Tensor) -> Dict[str, float]:
    row = {"step": step}
    row.update({k: v.item() for k, v in terms.items()})
    row["total"] = total.item()
    return row


def _train_loop(params: EncoderParams, plan: ObjectivePlan, triples: Sequence[Triple],
                config: TrainConfig, teacher: Optional[EncoderParams] = None,
                projection: Optional[ProjectionParams] = None) -> List[Dict[str, float]]:
    data = select_fraction(triples, config.data_fraction, config.seed)
    trainable = params.parameters() + (projection.parameters() if projection else [])
    for p in trainable:
        p.requires_grad = True
    state = OptimizerState()
    layer_map = None
    if plan.uses_layers:
        layer_map = plan.resolve_map(teacher.config.num_layers, params.config.num_layers)
    # plans that read only teacher logits skip the per-step teacher forward
    cached = None
    if teacher is not None and plan.needs_teacher and not plan.uses_layers and config.epochs > 0:
        cached = _teacher_logits(teacher, data)
    history = []
    step = 0
    for epoch in range(config.epochs):
        for idx in _batches(len(data), config.batch_size, config.seed, epoch):
            batch = [data[i] for i in idx]
            b = len(batch)
            t_trace = None
            if cached is not None:
                t_trace = _logit_trace(np.concatenate([cached[idx, 0], cached[idx, 1]]))
            elif teacher is not None and plan.needs_teacher:
                with T.no_grad():
                    t_trace = _forward_pairs(teacher, batch)
            s_trace = _forward_pairs(params, batch)
            if plan.pairwise:
                s_arg = _split(s_trace, b)
                t_arg = _split(t_trace, b) if t_trace is not None else None
                label = None
            else:
                s_arg, t_arg = s_trace, t_trace
                label = np.array([1] * b + [0] * b)
            terms = compose_terms(plan, t_arg, s_arg, label, layer_map, projection, config.scoring)
            loss = total_loss(plan, terms)
            for p in trainable:
                p.grad = None
            T.backward(loss)
            adam_step(trainable, [p.grad for p in trainable], state, config.learning_rate)
            history.append(_record(step, terms, loss))
            step += 1
        log.debug("epoch %d done, last loss %.5f", epoch, history[-1]["total"] if history else float("nan"))
    for p in trainable:
        p.requires_grad = False
        p.grad = None
    return history


def finetune(encoder_config: EncoderConfig, triples: Sequence[Triple], config: TrainConfig,
             objective: Optional[str] = None) -> TrainResult:
    """Train a fresh encoder on labels only (pairwise hinge or pointwise CE)."""
    if not triples:
        raise ValueError("no training triples")
    objective = objective or config.teacher_objective
    plan = preset("finetune" if objective == "pair" else "finetune-pointwise")
    params = init_params(encoder_config)
    history = _train_loop(params, plan, triples, config)
    return TrainResult(params, history)


def finetune_teacher(config: TrainConfig, triples: Sequence[Triple]) -> TrainResult:
    return finetune(config.teacher_config, triples, config)


def distill_student(teacher: EncoderParams, config: TrainConfig, triples: Sequence[Triple],
                    init: Optional[EncoderParams] = None) -> TrainResult:
    """Single-stage distillation of ``config.student_config`` from a frozen teacher."""
    if not triples:
        raise ValueError("no training triples")
    plan = config.objective_plan
    student = init.copy() if init is not None else init_params(config.student_config)
    if plan.attn and teacher.config.heads != student.config.heads:
        raise ValueError(
            f"attention distillation needs equal head counts (teacher {teacher.config.heads}, "
            f"student {student.config.heads})")
    projection = None
    if plan.uses_layers:
        layer_map = plan.resolve_map(teacher.config.num_layers, student.config.num_layers)
        projection = ProjectionParams(student.config.hidden, teacher.config.hidden, layer_map,
                                      seed=config.seed)
    teacher.requires_grad_(False)
    history = _train_loop(student, plan, triples, config, teacher=teacher, projection=projection)
    return TrainResult(student, history, projection)
