"""Score fusion over a Risk Horizon with an optional external scorer.

Scorers see only horizon candidates, so every prediction is a horizon member.
A scorer that fails (timeout, bad payload) degrades the call to the
geometric ranking instead of aborting.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .central_event import CentralEvent
from .corpus import Visit
from .graph import Vocabulary
from .retrieval import RiskHorizon

log = logging.getLogger(__name__)

ELLIPSIS = "..."


class ScorerError(RuntimeError):
    pass


@dataclass
class RerankConfig:
    lam: float = 0.5
    k: int = 10
    scorer: str = "none"  # none | mock:<seed> | oracle:<rules-file> | http(s)://endpoint
    timeout: float = 10.0
    api_key_env: str = "RISKHORIZON_SCORER_KEY"
    history_budget: int = 2000
    max_in_flight: int = 4

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.timeout <= 0 or self.history_budget < 1 or self.max_in_flight < 1:
            raise ValueError("timeout, history_budget and max_in_flight must be positive")


@dataclass
class ScorerRequest:
    compressed_history: str
    candidates: list[tuple[str, str, str]]  # (modality, id, description)
    # raw visits for in-process scorers; never sent over the wire
    visits: Sequence[Visit] = ()

    def to_wire(self) -> dict:
        return {
            "history": self.compressed_history,
            "candidates": [{"modality": m, "id": i, "desc": d} for m, i, d in self.candidates],
        }


@dataclass
class ScorerResponse:
    scores: dict[str, float]
    rejected: list[str] = field(default_factory=list)


class Scorer(Protocol):
    def score(self, request: ScorerRequest) -> dict[str, float]: ...


class MockScorer:
    """Deterministic pseudo-scores from a seeded hash of each id."""

    def __init__(self, seed: int):
        self.seed = seed

    def score(self, request: ScorerRequest) -> dict[str, float]:
        out = {}
        for _, cid, _ in request.candidates:
            h = hashlib.sha256(f"{self.seed}:{cid}".encode()).digest()
            out[cid] = int.from_bytes(h[:8], "big") / 2.0 ** 64
        return out


class OracleScorer:
    """Scores 1 for events a planted rule would place in the next visit, else 0."""

    def __init__(self, rules):
        self.rules = list(rules)

    def score(self, request: ScorerRequest) -> dict[str, float]:
        visits = list(request.visits)
        expected = set()
        for r in self.rules:
            pos = len(visits) - r.delta
            if 0 <= pos < len(visits) and r.src in visits[pos].all_codes():
                expected.add(r.dst)
        return {cid: float(cid in expected) for _, cid, _ in request.candidates}


class RemoteScorer:
    """JSON over HTTP: POST ``{"history", "candidates"}``, expect ``{"scores": {...}}``."""

    def __init__(self, endpoint: str, timeout: float = 10.0, api_key_env: str = "RISKHORIZON_SCORER_KEY"):
        self.endpoint = endpoint
        self.timeout = timeout
        self.api_key_env = api_key_env

    def score(self, request: ScorerRequest) -> dict[str, float]:
        body = json.dumps(request.to_wire()).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise ScorerError(f"scorer request failed: {exc}") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("scores"), dict):
            raise ScorerError("scorer response lacks a 'scores' object")
        return payload["scores"]


def make_scorer(cfg: RerankConfig) -> Scorer | None:
    spec = cfg.scorer
    if spec == "none":
        return None
    if spec.startswith("mock:"):
        return MockScorer(int(spec.split(":", 1)[1]))
    if spec.startswith("oracle:"):
        from .synthetic import load_rules

        return OracleScorer(load_rules(spec.split(":", 1)[1]))
    if spec.startswith(("http://", "https://")):
        return RemoteScorer(spec, cfg.timeout, cfg.api_key_env)
    raise ValueError(f"unknown scorer {spec!r}")


def validate_scores(raw, candidates: Sequence[str]) -> ScorerResponse:
    """Keep finite scores for requested ids; ids outside the request are rejected.

    Raises ``ScorerError`` if a requested candidate is unscored or non-finite.
    """
    wanted = set(candidates)
    scores, rejected = {}, []
    for cid, val in raw.items():
        if cid not in wanted:
            rejected.append(str(cid))
            continue
        try:
            val = float(val)
        except (TypeError, ValueError):
            raise ScorerError(f"non-numeric score for {cid!r}") from None
        if not math.isfinite(val):
            raise ScorerError(f"non-finite score for {cid!r}")
        scores[cid] = val
    missing = wanted - set(scores)
    if missing:
        raise ScorerError(f"{len(missing)} candidate(s) left unscored, e.g. {sorted(missing)[0]!r}")
    return ScorerResponse(scores, sorted(rejected))


def compress_history(visits: Sequence[Visit], events: Sequence[CentralEvent], vocab: Vocabulary,
                     budget: int = 2000) -> str:
    """One line per visit, oldest dropped first to fit ``budget`` characters."""
    lines = []
    for v, ce in zip(visits, events):
        rep = ce.representative
        top = [cid for cid, _ in ce.top(5)]
        lines.append(f"t={v.t}: {vocab[rep].description} (p={ce.assignment[rep]:.2f}); top codes: {', '.join(top)}")
    while len(lines) > 1 and len("\n".join(lines)) > budget:
        lines.pop(0)
    if lines and len(lines[0]) > budget:
        keep = max(0, budget - len(ELLIPSIS))
        lines[0] = lines[0][:keep] + ELLIPSIS
    return "\n".join(lines)


def normalize_scores(scores: Sequence[float]) -> list[float]:
    """Min-max to [0, 1]; a constant list maps to 0.5."""
    if not scores:
        return []
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [0.5] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


def combine(s_llm: float, s_geo: float, lam: float) -> float:
    return lam * s_llm + (1.0 - lam) * s_geo


@dataclass
class Prediction:
    lists: dict[str, list[tuple[str, float]]]
    degraded: bool = False
    rejected: list[str] = field(default_factory=list)

    def ids(self, modality: str) -> list[str]:
        return [cid for cid, _ in self.lists.get(modality, [])]

    def all_ids(self) -> list[str]:
        return [cid for lst in self.lists.values() for cid, _ in lst]


def build_request(horizon: RiskHorizon, vocab: Vocabulary, history: str, visits: Sequence[Visit] = ()) -> ScorerRequest:
    cands = [(m, r.id, vocab[r.id].description) for m, lst in horizon.lists.items() for r in lst]
    return ScorerRequest(history, cands, visits)


def fuse(horizon: RiskHorizon, llm: dict[str, float] | None, lam: float, k: int) -> dict[str, list[tuple[str, float]]]:
    """Per-modality fused top-k. Equal fused scores fall back to the geometric
    order, then to the id."""
    out = {}
    for m, lst in horizon.lists.items():
        if llm is None or lam == 0:
            geo = normalize_scores([r.score for r in lst])
            out[m] = [(r.id, g) for r, g in zip(lst[:k], geo)]
            continue
        geo = normalize_scores([r.score for r in lst])
        sem = normalize_scores([llm[r.id] for r in lst])
        rows = [(combine(s, g, lam), rank, r.id) for rank, (r, s, g) in enumerate(zip(lst, sem, geo))]
        rows.sort(key=lambda x: (-x[0], x[1], x[2]))
        out[m] = [(cid, s) for s, _, cid in rows[:k]]
    return out


def predict_next_visit(horizon: RiskHorizon, scorer: Scorer | None, cfg: RerankConfig,
                       request: ScorerRequest | None = None) -> Prediction:
    """Top-k per modality over horizon candidates only; ``scorer=None`` is the lam=0 path."""
    if scorer is None or cfg.lam == 0:
        return Prediction(fuse(horizon, None, 0.0, cfg.k))
    if request is None:
        raise ValueError("a scorer request is required when a scorer is configured")
    ids = [cid for _, cid, _ in request.candidates]
    try:
        resp = validate_scores(scorer.score(request), ids)
    except ScorerError as exc:
        log.warning("scorer degraded to geometric ranking: %s", exc)
        return Prediction(fuse(horizon, None, 0.0, cfg.k), degraded=True)
    if resp.rejected:
        log.info("rejected %d out-of-horizon id(s) from scorer", len(resp.rejected))
    return Prediction(fuse(horizon, resp.scores, cfg.lam, cfg.k), rejected=resp.rejected)


def grounding_audit(predicted: Sequence[str], history: set[str], horizon: set[str]) -> tuple[float, float]:
    """Fractions of predicted ids found in ``history | horizon`` and in neither."""
    if not predicted:
        return 1.0, 0.0
    grounded = sum(1 for p in predicted if p in history or p in horizon)
    return grounded / len(predicted), (len(predicted) - grounded) / len(predicted)
