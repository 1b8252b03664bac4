"""Risk Horizons: structured candidate pools, tangent-space risk cones and
per-modality top-K geometric ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .central_event import CentralEvent
from .corpus import MODALITIES
from .graph import ClinicalGraph, Vocabulary
from .manifold import dist, log0
from .trainer import EmbeddingStore

DIR_EPS = 1e-9


@dataclass
class RetrievalConfig:
    K: int = 10
    phi: float = math.pi / 3
    eta: float = 0.5
    include_ancestors: bool = False
    # "filter" drops out-of-cone candidates; "bonus" keeps them and only adds eta to in-cone ones
    cone_mode: str = "filter"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 < self.phi <= math.pi:
            raise ValueError("phi must lie in (0, pi]")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.cone_mode not in ("filter", "bonus"):
            raise ValueError("cone_mode must be 'filter' or 'bonus'")


@dataclass
class RiskCone:
    apex: str
    root: str
    direction: np.ndarray
    phi: float
    degenerate: bool


@dataclass
class Ranked:
    id: str
    score: float
    in_cone: bool


@dataclass
class RiskHorizon:
    apex: str
    lists: dict[str, list[Ranked]]
    K: int
    fallback: set[str] = field(default_factory=set)

    def ids(self, modality: str) -> list[str]:
        return [r.id for r in self.lists.get(modality, [])]

    def members(self) -> set[str]:
        return {r.id for lst in self.lists.values() for r in lst}


def candidate_pool(v_T: str, graph: ClinicalGraph) -> set[str]:
    """Hierarchy descendants, lag-0 associates and lagged successors of ``v_T``."""
    if v_T not in graph.vocab:
        raise KeyError(f"unknown concept {v_T!r}")
    pool = graph.descendants(v_T) | graph.assoc0(v_T) | graph.lagged(v_T)
    pool.discard(v_T)
    return pool


def cone_direction(v_T: str, store: EmbeddingStore, vocab: Vocabulary, phi: float = math.pi / 3) -> RiskCone:
    """Direction ``log0(z_vT) - log0(z_root)`` with ``root`` the level-0 ancestor."""
    root = vocab.root(v_T)
    d = log0(store.point(v_T), store.c) - log0(store.point(root), store.c)
    return RiskCone(v_T, root, d, phi, bool(np.linalg.norm(d) < DIR_EPS))


def cone_cosines(ids: list[str], cone: RiskCone, store: EmbeddingStore) -> tuple[np.ndarray, np.ndarray]:
    """Cosines to the cone direction and whether each point is off the origin."""
    if not ids:
        return np.zeros(0), np.zeros(0, dtype=bool)
    t = log0(store.points(ids), store.c)
    tn = np.linalg.norm(t, axis=1)
    dn = np.linalg.norm(cone.direction)
    cos = np.zeros(len(ids))
    ok = tn >= DIR_EPS
    if dn >= DIR_EPS:
        cos[ok] = (t[ok] @ cone.direction) / (tn[ok] * dn)
    return np.clip(cos, -1.0, 1.0), ok


def _membership(cos: np.ndarray, ok: np.ndarray, cone: RiskCone) -> np.ndarray:
    if cone.degenerate:
        return np.ones(len(cos), dtype=bool)
    # compare angles rather than cosines so that phi = pi admits everything
    return ok & (np.arccos(cos) <= cone.phi)


def in_cone(u: str, cone: RiskCone, store: EmbeddingStore) -> tuple[bool, float]:
    """Whether ``log0(z_u)`` lies within ``phi`` of the cone direction, plus the cosine.

    A degenerate cone admits everything; a point at the origin is never inside.
    """
    cos, ok = cone_cosines([u], cone, store)
    return bool(_membership(cos, ok, cone)[0]), float(cos[0])


def geo_score(u: str, mu: np.ndarray, cone: RiskCone, store: EmbeddingStore, eta: float) -> float:
    inside, _ = in_cone(u, cone, store)
    return -float(dist(store.point(u), mu, store.c)) + eta * inside


def _rank(entries: list[Ranked], K: int) -> list[Ranked]:
    return sorted(entries, key=lambda r: (-r.score, r.id))[:K]


def build_risk_horizon(ce: CentralEvent, graph: ClinicalGraph, store: EmbeddingStore,
                       cfg: RetrievalConfig | None = None, modalities=None) -> RiskHorizon:
    """Per-modality top-K of the structured pool around the representative.

    Modalities left empty by the pool or cone fall back to all of their
    leaves ranked by distance to ``mu`` (cone disabled).
    """
    cfg = cfg or RetrievalConfig()
    vocab = graph.vocab
    modalities = modalities or vocab.modalities()
    v_T = ce.representative
    cone = cone_direction(v_T, store, vocab, cfg.phi)
    pool = sorted(
        u for u in candidate_pool(v_T, graph)
        if u in store and (cfg.include_ancestors or vocab.is_leaf(u))
    )
    lists: dict[str, list[Ranked]] = {}
    fallback: set[str] = set()
    if pool:
        inside = _membership(*cone_cosines(pool, cone, store), cone)
        d = np.atleast_1d(dist(store.points(pool), ce.mu, store.c))
        by_mod: dict[str, list[Ranked]] = {}
        for u, du, ins in zip(pool, d, inside):
            if cfg.cone_mode == "filter" and not ins:
                continue
            by_mod.setdefault(vocab[u].modality, []).append(Ranked(u, -float(du) + cfg.eta * bool(ins), bool(ins)))
        lists = {m: _rank(v, cfg.K) for m, v in by_mod.items()}
    for m in modalities:
        if lists.get(m):
            continue
        leaves = [u for u in (vocab.leaves(m) if not cfg.include_ancestors else vocab.modality_ids(m)) if u in store]
        if not leaves:
            continue
        d = np.atleast_1d(dist(store.points(leaves), ce.mu, store.c))
        lists[m] = _rank([Ranked(u, -float(du), False) for u, du in zip(leaves, d)], cfg.K)
        fallback.add(m)
    ordered = {m: lists[m] for m in MODALITIES if m in lists}
    return RiskHorizon(v_T, ordered, cfg.K, fallback)


def horizon_records(patient_id: str, T: int, horizon: RiskHorizon) -> list[dict]:
    return [
        {"patient_id": patient_id, "T": T, "modality": m,
         "ranked": [[r.id, r.score, r.in_cone] for r in lst]}
        for m, lst in horizon.lists.items()
    ]
