"""Seeded synthetic cohorts with planted lagged cross-modal rules.

Each modality is a complete tree (``dx:ROOT -> dx:A -> dx:A.1 -> dx:A.1.3``).
Every visit draws a topic (a level-1 diagnosis group) independently; its
diagnoses come from that topic's leaves, other modalities from a mild Zipf
background over their leaves. Planted rules then add ``dst`` to visit
``t + delta`` with probability ``p`` whenever ``src`` occurs at visit ``t``.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import MODALITIES, Cohort, Trajectory, Visit
from .graph import Concept, Vocabulary, describe, root_id


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedRule:
    src: str
    dst: str
    delta: int
    p: float


@dataclass
class SynthSpec:
    n_patients: int = 2000
    branching: tuple[int, ...] = (5, 5, 5)
    # wider diagnosis trees keep co-topic leaves weakly correlated with rule sources
    dx_branching: tuple[int, ...] | None = (5, 6, 6)
    visits: tuple[int, int] = (3, 8)
    dx_per_visit: tuple[int, int] = (3, 5)
    other_per_visit: tuple[int, int] = (1, 3)
    zipf_s: float = 0.25
    n_rules: int = 10
    rule_p: float = 0.9
    # rules at these positions use lag 2, the rest lag 1
    lag2_rules: tuple[int, ...] = (3, 8)
    # explicit rules override the automatic choice
    rules: tuple[PlantedRule, ...] = ()

    def __post_init__(self):
        self.branching = tuple(int(b) for b in self.branching)
        if self.dx_branching is not None:
            self.dx_branching = tuple(int(b) for b in self.dx_branching)
        self.visits = tuple(self.visits)
        self.dx_per_visit = tuple(self.dx_per_visit)
        self.other_per_visit = tuple(self.other_per_visit)
        self.lag2_rules = tuple(self.lag2_rules)
        self.rules = tuple(r if isinstance(r, PlantedRule) else PlantedRule(**r) for r in self.rules)
        if self.n_patients < 1:
            raise SynthSpecError("n_patients must be >= 1")
        for shape in (self.branching, self.dx_shape):
            if len(shape) < 2 or any(b < 2 for b in shape):
                raise SynthSpecError("branching needs at least two levels, each >= 2")
            if shape[0] > len(string.ascii_uppercase):
                raise SynthSpecError("at most 26 top-level groups")
        for name in ("visits", "dx_per_visit", "other_per_visit"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise SynthSpecError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.dx_per_visit[1] > int(np.prod(self.dx_shape[1:])):
            raise SynthSpecError("dx_per_visit exceeds leaves per topic")
        if not 0 < self.rule_p <= 1:
            raise SynthSpecError("rule_p must lie in (0, 1]")
        if self.zipf_s < 0:
            raise SynthSpecError("zipf_s must be >= 0")
        max_visits = self.visits[1]
        lags = [r.delta for r in self.rules] or [2 if i in self.lag2_rules else 1 for i in range(self.n_rules)]
        for lag in lags:
            if lag < 0 or lag >= max_visits:
                raise SynthSpecError(f"rule lag {lag} must satisfy 0 <= lag < max visits ({max_visits})")
        for r in self.rules:
            if not 0 < r.p <= 1:
                raise SynthSpecError(f"rule {r.src}->{r.dst}: p must lie in (0, 1]")

    @property
    def dx_shape(self) -> tuple[int, ...]:
        return self.dx_branching or self.branching

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {m: (self.dx_shape if m == "dx" else self.branching) for m in MODALITIES}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rules"] = [asdict(r) for r in self.rules]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SynthSpecError(f"unknown synthetic spec key(s): {sorted(unknown)}")
        return cls(**d)


def _path_names(branching: tuple[int, ...]) -> list[list[str]]:
    """Paths per level below the root: ``[["A", "B"], ["A.1", ...], ...]``."""
    levels = [[string.ascii_uppercase[i] for i in range(branching[0])]]
    for b in branching[1:]:
        levels.append([f"{p}.{i}" for p in levels[-1] for i in range(1, b + 1)])
    return levels


def tree_vocabulary(shapes) -> Vocabulary:
    """Complete trees, one per modality; ``shapes`` maps modality to branching
    factors per level (a bare tuple applies to every modality)."""
    if not isinstance(shapes, dict):
        shapes = {m: tuple(shapes) for m in MODALITIES}
    concepts = []
    for m, branching in shapes.items():
        levels = _path_names(branching)
        root = root_id(m)
        concepts.append(Concept(root, m, 0, None, describe(root)))
        for depth, paths in enumerate(levels, start=1):
            for path in paths:
                cid = f"{m}:{path}"
                parent = root if depth == 1 else f"{m}:{path.rsplit('.', 1)[0]}"
                concepts.append(Concept(cid, m, depth, parent, describe(cid)))
    return Vocabulary(concepts)


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def _choose_rules(spec: SynthSpec, vocab: Vocabulary, rng: np.random.Generator) -> list[PlantedRule]:
    topics = vocab.children(root_id("dx"))
    sources: list[str] = []
    for topic in topics[: min(len(topics), (spec.n_rules + 1) // 2)]:
        leaves = [c for c in vocab.descendants(topic) if vocab.is_leaf(c)]
        sources.append(str(rng.choice(sorted(leaves))))
    # remaining sources: most frequent background leaves of proc and lab, alternating
    rank = {m: 0 for m in ("proc", "lab")}
    while len(sources) < spec.n_rules:
        m = "proc" if (len(sources) % 2 == 0) else "lab"
        sources.append(vocab.leaves(m)[rank[m]])
        rank[m] += 1
    med = vocab.leaves("med")
    if len(med) < spec.n_rules:
        raise SynthSpecError("not enough med leaves for distinct rule targets")
    targets = [str(t) for t in rng.choice(med, size=spec.n_rules, replace=False)]
    return [
        PlantedRule(s, t, 2 if i in spec.lag2_rules else 1, spec.rule_p)
        for i, (s, t) in enumerate(zip(sources, targets))
    ]


def generate_synthetic(spec: SynthSpec, seed: int = 0) -> tuple[Cohort, Vocabulary, list[PlantedRule]]:
    """Cohort, ground-truth vocabulary and planted rules for ``spec`` and ``seed``."""
    rng = np.random.default_rng(seed)
    vocab = tree_vocabulary(spec.shapes())
    rules = list(spec.rules) if spec.rules else _choose_rules(spec, vocab, rng)
    for r in rules:
        for end in (r.src, r.dst):
            if end not in vocab or not vocab.is_leaf(end):
                raise SynthSpecError(f"rule endpoint {end!r} is not a leaf of the synthetic trees")
        if vocab[r.src].modality == vocab[r.dst].modality:
            raise SynthSpecError(f"rule {r.src}->{r.dst} must cross modalities")
        if r.delta >= spec.visits[1]:
            raise SynthSpecError(f"rule lag {r.delta} must be < max visits ({spec.visits[1]})")

    topics = vocab.children(root_id("dx"))
    topic_leaves = {t: sorted(c for c in vocab.descendants(t) if vocab.is_leaf(c)) for t in topics}
    background = {m: vocab.leaves(m) for m in MODALITIES if m != "dx"}
    bg_weights = {m: _zipf_weights(len(ls), spec.zipf_s) for m, ls in background.items()}

    width = len(str(spec.n_patients - 1))
    trajectories = []
    for pid in range(spec.n_patients):
        n_visits = int(rng.integers(spec.visits[0], spec.visits[1] + 1))
        sets: list[dict[str, set[str]]] = []
        notes: list[dict[str, str]] = []
        for _ in range(n_visits):
            topic = topics[int(rng.integers(len(topics)))]
            leaves = topic_leaves[topic]
            k = int(rng.integers(spec.dx_per_visit[0], spec.dx_per_visit[1] + 1))
            dx = [leaves[i] for i in rng.choice(len(leaves), size=k, replace=False)]
            codes = {"dx": set(dx)}
            for m, ls in background.items():
                k = int(rng.integers(spec.other_per_visit[0], spec.other_per_visit[1] + 1))
                codes[m] = {ls[i] for i in rng.choice(len(ls), size=k, replace=False, p=bg_weights[m])}
            sets.append(codes)
            notes.append({"primary": dx[0], "topic": topic})
        # rule firing uses the base draws only, so rules never chain
        base = [{c for cs in s.values() for c in cs} for s in sets]
        for t in range(n_visits):
            for r in rules:
                if r.src in base[t] and t + r.delta < n_visits and rng.random() < r.p:
                    sets[t + r.delta][vocab[r.dst].modality].add(r.dst)
        visits = tuple(Visit.build(t, sets[t], **notes[t]) for t in range(n_visits))
        trajectories.append(Trajectory(f"P{pid:0{width}d}", visits))
    return Cohort(tuple(trajectories)), vocab, rules


def save_rules(rules: list[PlantedRule], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"rules": [asdict(r) for r in rules]}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_rules(path: str | Path) -> list[PlantedRule]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        return [PlantedRule(r["src"], r["dst"], int(r["delta"]), float(r["p"])) for r in data["rules"]]
    except (KeyError, TypeError) as exc:
        raise SynthSpecError(f"{path}: malformed rules file ({exc})") from None
