"""Central Events: a visit compressed to a barycenter, a soft assignment over
nearby concepts and its most probable representative."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import Visit
from .graph import Vocabulary
from .manifold import dist, exp0, log0
from .trainer import EmbeddingStore

POOL_RULES = ("modalities", "codes_and_ancestors", "all")


class EmptyVisitError(ValueError):
    pass


@dataclass
class CEConfig:
    beta: float = 5.0
    # "modalities": every concept of the modalities present in the visit
    pool_rule: str = "modalities"

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if self.pool_rule not in POOL_RULES:
            raise ValueError(f"pool_rule must be one of {POOL_RULES}")


@dataclass
class CentralEvent:
    mu: np.ndarray
    assignment: dict[str, float]
    representative: str
    codes: tuple[str, ...] = field(default=())

    def top(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(self.assignment.items(), key=lambda kv: (-kv[1], kv[0]))[:n]


def barycenter(codes: Sequence[str], store: EmbeddingStore, weights: Sequence[float] | None = None) -> np.ndarray:
    """``exp0`` of the weighted mean of ``log0`` over the codes' points."""
    if len(codes) == 0:
        raise EmptyVisitError("barycenter of an empty code set")
    w = np.ones(len(codes)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(codes) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum, one per code")
    tangent = log0(store.points(codes), store.c)
    return exp0((w / w.sum()) @ tangent, store.c)


def candidate_pool_for_assignment(codes: Iterable[str], vocab: Vocabulary, rule: str = "modalities") -> list[str]:
    codes = list(codes)
    if rule == "all":
        return vocab.ids()
    pool: set[str] = set()
    if rule == "modalities":
        for m in {vocab[c].modality for c in codes}:
            pool.update(vocab.modality_ids(m))
    for c in codes:
        pool.add(c)
        pool.update(vocab.ancestors(c))
    return sorted(pool)


def soft_assign(mu: np.ndarray, pool: Sequence[str], store: EmbeddingStore, beta: float) -> dict[str, float]:
    """``p(v) ∝ exp(-beta * dist(mu, z_v))`` over ``pool``."""
    if not pool:
        raise ValueError("empty assignment pool")
    logits = -beta * np.atleast_1d(dist(mu, store.points(pool), store.c))
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    return dict(zip(pool, p.tolist()))


def _argmax(assignment: dict[str, float]) -> str:
    return min(assignment.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def central_event(visit: Visit | Sequence[str], store: EmbeddingStore, vocab: Vocabulary, cfg: CEConfig | None = None,
                  weights: Sequence[float] | None = None) -> CentralEvent:
    cfg = cfg or CEConfig()
    codes = tuple(visit.all_codes() if isinstance(visit, Visit) else visit)
    if not codes:
        raise EmptyVisitError("visit has no codes")
    mu = barycenter(codes, store, weights)
    assignment = soft_assign(mu, candidate_pool_for_assignment(codes, vocab, cfg.pool_rule), store, cfg.beta)
    return CentralEvent(mu, assignment, _argmax(assignment), codes)


def event_record(patient_id: str, t: int, ce: CentralEvent, top_n: int = 5) -> dict:
    return {
        "patient_id": patient_id,
        "t": t,
        "mu": [float(x) for x in ce.mu],
        "top_assignments": [[cid, p] for cid, p in ce.top(top_n)],
        "representative": ce.representative,
    }

