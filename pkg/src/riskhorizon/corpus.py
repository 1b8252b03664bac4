"""Longitudinal multi-modal trajectories: data model, I/O, filtering, splits."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

MODALITIES: tuple[str, ...] = ("dx", "proc", "med", "lab")
# optional per-visit annotations carried by synthetic cohorts
_ANNOTATIONS = ("primary", "topic")


class CohortError(ValueError):
    """Bad cohort content: parse failures, duplicates, empty results."""


class CohortParseError(CohortError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EmptyCohortError(CohortError):
    pass


@dataclass(frozen=True)
class Visit:
    t: int
    dx: tuple[str, ...] = ()
    proc: tuple[str, ...] = ()
    med: tuple[str, ...] = ()
    lab: tuple[str, ...] = ()
    primary: str | None = None
    topic: str | None = None

    @classmethod
    def build(cls, t: int, codes: Mapping[str, Iterable[str]], **annotations) -> "Visit":
        """Build a visit from per-modality iterables, deduplicating and sorting each."""
        unknown = set(codes) - set(MODALITIES)
        if unknown:
            raise CohortError(f"unknown modality key(s): {sorted(unknown)}")
        return cls(t=int(t), **{m: tuple(sorted(set(codes.get(m, ())))) for m in MODALITIES}, **annotations)

    def codes(self, modality: str) -> tuple[str, ...]:
        return getattr(self, modality)

    def all_codes(self) -> list[str]:
        return [c for m in MODALITIES for c in getattr(self, m)]

    def n_codes(self) -> int:
        return sum(len(getattr(self, m)) for m in MODALITIES)

    def restrict(self, keep) -> "Visit":
        return replace(self, **{m: tuple(c for c in getattr(self, m) if c in keep) for m in MODALITIES})

    def to_record(self) -> dict:
        rec: dict = {"t": self.t}
        for m in MODALITIES:
            rec[m] = list(getattr(self, m))
        for key in _ANNOTATIONS:
            if getattr(self, key) is not None:
                rec[key] = getattr(self, key)
        return rec


@dataclass(frozen=True)
class Trajectory:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        ts = [v.t for v in self.visits]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise CohortError(f"patient {self.patient_id}: visit times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.visits)

    def to_record(self) -> dict:
        return {"patient_id": self.patient_id, "visits": [v.to_record() for v in self.visits]}


@dataclass(frozen=True)
class Cohort:
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for tr in self.trajectories:
            if tr.patient_id in seen:
                raise CohortError(f"duplicate patient_id {tr.patient_id!r}")
            seen.add(tr.patient_id)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    @cached_property
    def code_frequency(self) -> dict[str, int]:
        """Number of visits in which each code occurs."""
        counts: Counter[str] = Counter()
        for tr in self.trajectories:
            for v in tr.visits:
                counts.update(v.all_codes())
        return dict(counts)

    @property
    def patient_ids(self) -> list[str]:
        return [tr.patient_id for tr in self.trajectories]

    def n_visits(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def codes_by_modality(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {m: set() for m in MODALITIES}
        for tr in self.trajectories:
            for v in tr.visits:
                for m in MODALITIES:
                    out[m].update(v.codes(m))
        return out


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError("split fractions must be three positive numbers")
        if not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def _parse_visit(rec, lineno: int) -> Visit:
    if not isinstance(rec, dict):
        raise CohortParseError(lineno, "visit must be an object")
    for key in rec:
        if key != "t" and key not in MODALITIES and key not in _ANNOTATIONS:
            raise CohortParseError(lineno, f"unknown modality key {key!r}")
    t = rec.get("t")
    if not isinstance(t, int) or isinstance(t, bool) or t < 0:
        raise CohortParseError(lineno, f"visit time 't' must be a nonnegative integer, got {t!r}")
    codes = {}
    for m in MODALITIES:
        vals = rec.get(m, [])
        if not isinstance(vals, list) or not all(isinstance(c, str) for c in vals):
            raise CohortParseError(lineno, f"{m!r} must be a list of strings")
        codes[m] = vals
    notes = {k: rec[k] for k in _ANNOTATIONS if k in rec}
    return Visit.build(t, codes, **notes)


def parse_record(line: str, lineno: int = 0) -> Trajectory:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CohortParseError(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict) or not isinstance(rec.get("patient_id"), str):
        raise CohortParseError(lineno, "record needs a string 'patient_id'")
    extra = set(rec) - {"patient_id", "visits"}
    if extra:
        raise CohortParseError(lineno, f"unknown record key(s) {sorted(extra)}")
    visits_raw = rec.get("visits")
    if not isinstance(visits_raw, list) or not visits_raw:
        raise CohortParseError(lineno, "'visits' must be a non-empty list")
    visits = sorted((_parse_visit(v, lineno) for v in visits_raw), key=lambda v: v.t)
    try:
        return Trajectory(rec["patient_id"], tuple(visits))
    except CohortError as exc:
        raise CohortParseError(lineno, str(exc)) from None


def load_cohort(path: str | Path) -> Cohort:
    """Read a line-delimited cohort file (one patient per line, ``#`` lines ignored)."""
    trajectories = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            tr = parse_record(line, lineno)
            if tr.patient_id in seen:
                raise CohortParseError(lineno, f"duplicate patient_id {tr.patient_id!r}")
            seen.add(tr.patient_id)
            trajectories.append(tr)
    return Cohort(tuple(trajectories))


def dump_cohort(cohort: Cohort, path: str | Path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        for tr in cohort:
            fh.write(json.dumps(tr.to_record(), separators=(",", ":")) + "\n")


def filter_cohort(cohort: Cohort, min_visits: int = 2, min_code_freq: int = 1) -> Cohort:
    """Drop rare codes, then short trajectories, in a single pass.

    Code frequencies are counted once on the input; no iteration to a fixpoint.
    """
    if min_visits < 1 or min_code_freq < 1:
        raise ValueError("min_visits and min_code_freq must be >= 1")
    keep = {c for c, n in cohort.code_frequency.items() if n >= min_code_freq}
    return restrict_codes(cohort, keep, min_visits)


def restrict_codes(cohort: Cohort, keep, min_visits: int = 1) -> Cohort:
    """Keep only ``keep`` codes; visits left empty are dropped, then short trajectories."""
    out = []
    for tr in cohort:
        visits = tuple(v2 for v in tr.visits if (v2 := v.restrict(keep)).n_codes() > 0)
        if len(visits) >= min_visits:
            out.append(Trajectory(tr.patient_id, visits))
    if not out:
        raise EmptyCohortError("filtering removed every trajectory")
    return Cohort(tuple(out))


def split_by_patient(cohort: Cohort, spec: SplitSpec) -> tuple[Cohort, Cohort, Cohort]:
    """Seeded, patient-disjoint train/val/test partition."""
    n = len(cohort)
    if n < 3:
        raise CohortError(f"need at least 3 patients to split, got {n}")
    ids = sorted(cohort.patient_ids)
    perm = np.random.default_rng(spec.seed).permutation(n)
    f_train, f_val, _ = spec.fractions
    n_train = max(1, min(n - 2, int(round(f_train * n))))
    n_val = max(1, min(n - n_train - 1, int(round(f_val * n))))
    groups = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    by_id = {tr.patient_id: tr for tr in cohort}
    return tuple(
        Cohort(tuple(by_id[ids[i]] for i in sorted(g))) for g in groups
    )  # type: ignore[return-value]


def subset(cohort: Cohort, patient_ids) -> Cohort:
    wanted = set(patient_ids)
    return Cohort(tuple(tr for tr in cohort if tr.patient_id in wanted))
