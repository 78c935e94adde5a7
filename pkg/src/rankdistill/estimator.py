"""scikit-learn style wrappers around fine-tuning and distillation.

``fit`` takes triples ``(query, pos_doc, neg_doc)``; ``predict`` takes
``(query, doc)`` pairs and returns ranking scores; ``score`` takes a
``DevSet`` and returns MRR@10 so the estimators plug into model selection.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DevSet, Triple
from .encoder import EncoderConfig, EncoderParams, encode_pairs, ranking_score
from .metrics import mrr_at_k, rerank
from .objectives import ObjectivePlan, preset
from .tensor import no_grad
from .trainer import TrainConfig, distill_student, finetune


def _tokens(x, what: str):
    try:
        toks = tuple(int(t) for t in x)
    except (TypeError, ValueError):
        raise ValueError(f"{what} must be a sequence of integer token ids") from None
    if not toks:
        raise ValueError(f"{what} is empty")
    if min(toks) < 0:
        raise ValueError(f"{what} has negative token ids")
    return toks


def check_triples(X, vocab: Optional[int] = None):
    """Validate and normalise triples into a list of ``Triple``."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError("expected a sequence of (query, pos_doc, neg_doc) triples")
    if len(X) == 0:
        raise ValueError("no triples given")
    out = []
    for i, t in enumerate(X):
        if isinstance(t, Triple):
            t = (t.query, t.pos_doc, t.neg_doc)
        if len(t) != 3:
            raise ValueError(f"triple {i} has {len(t)} fields, expected 3")
        tr = Triple(*(_tokens(f, f"triple {i} field {j}") for j, f in enumerate(t)))
        if vocab is not None and max(max(tr.query), max(tr.pos_doc), max(tr.neg_doc)) >= vocab:
            raise ValueError(f"triple {i} has token ids >= vocab ({vocab})")
        out.append(tr)
    return out


def check_pairs(X, vocab: Optional[int] = None):
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError("expected a sequence of (query, doc) pairs")
    out = []
    for i, p in enumerate(X):
        if len(p) != 2:
            raise ValueError(f"pair {i} has {len(p)} fields, expected 2")
        q, d = _tokens(p[0], f"pair {i} query"), _tokens(p[1], f"pair {i} doc")
        if vocab is not None and max(max(q), max(d)) >= vocab:
            raise ValueError(f"pair {i} has token ids >= vocab ({vocab})")
        out.append((q, d))
    return out


class CrossEncoderRanker(BaseEstimator):
    """Cross-encoder trained on labels only.

    ``objective`` is ``"pointwise"`` (cross-entropy) or ``"pair"`` (hinge on
    ranking scores).
    """

    def __init__(self, num_layers=2, hidden=32, heads=2, ffn_dim=64, vocab=200,
                 max_query_len=32, max_doc_len=120, init_std=0.1, learning_rate=1e-3,
                 batch_size=32, epochs=3, objective="pointwise", scoring="probability",
                 data_fraction=1.0, random_state=0):
        self.num_layers = num_layers
        self.hidden = hidden
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.init_std = init_std
        self.vocab = vocab
        self.max_query_len = max_query_len
        self.max_doc_len = max_doc_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.objective = objective
        self.scoring = scoring
        self.data_fraction = data_fraction
        self.random_state = random_state

    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(num_layers=self.num_layers, hidden=self.hidden, heads=self.heads,
                             ffn_dim=self.ffn_dim, vocab=self.vocab,
                             max_query_len=self.max_query_len, max_doc_len=self.max_doc_len,
                             init_std=self.init_std, seed=int(self.random_state or 0))

    def _train_config(self, **kw) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           epochs=self.epochs, seed=int(self.random_state or 0),
                           student_config=self._encoder_config(), data_fraction=self.data_fraction,
                           teacher_objective=self.objective, scoring=self.scoring, **kw)

    def fit(self, X, y=None):
        triples = check_triples(X, self.vocab)
        result = finetune(self._encoder_config(), triples, self._train_config())
        self.params_ = result.params
        self.history_ = result.history
        return self

    @classmethod
    def from_params(cls, params: EncoderParams, **kw) -> "CrossEncoderRanker":
        """Wrap already-trained encoder parameters."""
        c = params.config
        est = cls(num_layers=c.num_layers, hidden=c.hidden, heads=c.heads, ffn_dim=c.ffn_dim,
                  vocab=c.vocab, max_query_len=c.max_query_len, max_doc_len=c.max_doc_len,
                  init_std=c.init_std, random_state=c.seed, **kw)
        est.params_ = params
        est.history_ = []
        return est

    def predict(self, X, batch_size: int = 256) -> np.ndarray:
        """Ranking score of each (query, doc) pair."""
        check_is_fitted(self, "params_")
        pairs = check_pairs(X, self.vocab)
        out = []
        with no_grad():
            for i in range(0, len(pairs), batch_size):
                trace = encode_pairs(self.params_, pairs[i:i + batch_size])
                out.append(ranking_score(trace, self.scoring).data)
        return np.concatenate(out) if out else np.zeros(0)

    def predict_logits(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        with no_grad():
            return encode_pairs(self.params_, check_pairs(X, self.vocab)).logits.data.copy()

    def rank(self, devset: DevSet):
        check_is_fitted(self, "params_")
        return rerank(self.params_, devset, self.scoring)

    def score(self, devset: DevSet, y=None, k: int = 10) -> float:
        """MRR@k on a dev set."""
        return mrr_at_k(self.rank(devset), devset.labels, k)


class DistilledRanker(CrossEncoderRanker):
    """Student cross-encoder distilled from a frozen teacher.

    ``teacher`` is a fitted ``CrossEncoderRanker`` or raw ``EncoderParams``;
    ``plan`` is a preset name (``"L1"``, ``"L2"``, ``"L3"``, ...) or an
    ``ObjectivePlan``.
    """

    def __init__(self, teacher=None, plan="L3", temperature=1.0, layer_map="uniform",
                 num_layers=2, hidden=32, heads=2, ffn_dim=64, vocab=200, max_query_len=32,
                 max_doc_len=120, init_std=0.1, learning_rate=1e-3, batch_size=32, epochs=3,
                 scoring="probability", data_fraction=1.0, random_state=0):
        super().__init__(num_layers=num_layers, hidden=hidden, heads=heads, ffn_dim=ffn_dim,
                         vocab=vocab, max_query_len=max_query_len, max_doc_len=max_doc_len,
                         init_std=init_std, learning_rate=learning_rate,
                         batch_size=batch_size, epochs=epochs, scoring=scoring,
                         data_fraction=data_fraction, random_state=random_state)
        self.teacher = teacher
        self.plan = plan
        self.temperature = temperature
        self.layer_map = layer_map

    def _resolve_plan(self) -> ObjectivePlan:
        if isinstance(self.plan, ObjectivePlan):
            return self.plan
        return preset(self.plan, temperature=self.temperature, layer_map=self.layer_map)

    def _teacher_params(self) -> EncoderParams:
        if self.teacher is None:
            raise ValueError("DistilledRanker needs a teacher")
        if isinstance(self.teacher, EncoderParams):
            return self.teacher
        check_is_fitted(self.teacher, "params_")
        return self.teacher.params_

    def fit(self, X, y=None):
        triples = check_triples(X, self.vocab)
        teacher = self._teacher_params()
        cfg = self._train_config(objective_plan=self._resolve_plan(), teacher_config=teacher.config)
        result = distill_student(teacher, cfg, triples)
        self.params_ = result.params
        self.projection_ = result.projection
        self.history_ = result.history
        return self
