"""Typed clinical-concept graph.

Two edge families: deterministic parent->child hierarchy edges inside each
modality, and lagged cross-modal association edges selected by pointwise
mutual information, a support floor and bootstrap stability.

Probability estimators: ``P(a)`` is the fraction of visits containing ``a``;
``P_lag(a, b)`` is ``cnt_lag(a, b)`` over the number of ordered visit pairs
``(t, t + lag)`` inside trajectories. Counting happens at the leaf level.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import _kernels
from .corpus import MODALITIES, Cohort

ROOT = "ROOT"


class GraphError(ValueError):
    pass


class LeakageError(GraphError):
    """Graph statistics were requested on patients outside the training split."""


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Concept:
    id: str
    modality: str
    level: int
    parent: str | None
    description: str


def root_id(modality: str) -> str:
    return f"{modality}:{ROOT}"


def describe(concept_id: str) -> str:
    modality, _, path = concept_id.partition(":")
    return f"{modality} (all)" if path == ROOT else f"{modality} {path}"


def prefix_chain(code: str) -> list[str]:
    """Ancestors of ``code`` under the ``<modality>:<a.b.c>`` scheme, root first."""
    modality, sep, path = code.partition(":")
    if not sep or modality not in MODALITIES or not path:
        raise GraphError(f"code {code!r} does not follow the '<modality>:<path>' scheme")
    if path == ROOT:
        return [code]
    parts = path.split(".")
    if any(not p or p == ROOT for p in parts):
        raise GraphError(f"code {code!r} has an empty or reserved path component")
    return [root_id(modality)] + [f"{modality}:{'.'.join(parts[:i])}" for i in range(1, len(parts) + 1)]


class Vocabulary:
    """Concepts of every modality plus their deterministic ancestors."""

    def __init__(self, concepts: Iterable[Concept]):
        self.concepts: dict[str, Concept] = {}
        for con in concepts:
            if con.id in self.concepts:
                raise GraphError(f"duplicate concept {con.id!r}")
            self.concepts[con.id] = con
        self._children: dict[str, list[str]] = defaultdict(list)
        for con in self.concepts.values():
            if con.parent is None:
                if con.level != 0:
                    raise GraphError(f"root {con.id!r} must have level 0")
                continue
            par = self.concepts.get(con.parent)
            if par is None:
                raise GraphError(f"parent {con.parent!r} of {con.id!r} missing")
            if par.modality != con.modality:
                raise GraphError(f"{con.id!r} ({con.modality}) has parent {par.id!r} of modality {par.modality}")
            if par.level != con.level - 1:
                raise GraphError(f"{con.id!r} level {con.level} inconsistent with parent level {par.level}")
            self._children[par.id].append(con.id)
        for kids in self._children.values():
            kids.sort()

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, cid: str) -> bool:
        return cid in self.concepts

    def __getitem__(self, cid: str) -> Concept:
        return self.concepts[cid]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.concepts == other.concepts

    def ids(self) -> list[str]:
        return sorted(self.concepts)

    def children(self, cid: str) -> list[str]:
        return list(self._children.get(cid, ()))

    def is_leaf(self, cid: str) -> bool:
        return cid not in self._children

    def ancestors(self, cid: str) -> list[str]:
        """Strict ancestors, nearest first."""
        out = []
        par = self.concepts[cid].parent
        while par is not None:
            out.append(par)
            par = self.concepts[par].parent
        return out

    def ancestor_at(self, cid: str, level: int) -> str | None:
        con = self.concepts[cid]
        if level > con.level:
            return None
        while con.level > level:
            con = self.concepts[con.parent]
        return con.id

    def root(self, cid: str) -> str:
        return self.ancestor_at(cid, 0)

    def descendants(self, cid: str) -> list[str]:
        out, queue = [], deque(self.children(cid))
        while queue:
            node = queue.popleft()
            out.append(node)
            queue.extend(self.children(node))
        return out

    def modality_ids(self, modality: str) -> list[str]:
        return sorted(c.id for c in self.concepts.values() if c.modality == modality)

    def leaves(self, modality: str | None = None) -> list[str]:
        return sorted(
            c.id for c in self.concepts.values()
            if (modality is None or c.modality == modality) and self.is_leaf(c.id)
        )

    def ancestor_ids(self, modality: str | None = None) -> list[str]:
        return sorted(
            c.id for c in self.concepts.values()
            if (modality is None or c.modality == modality) and not self.is_leaf(c.id)
        )

    def modalities(self) -> list[str]:
        present = {c.modality for c in self.concepts.values()}
        return [m for m in MODALITIES if m in present]

    def closure(self, codes: Iterable[str]) -> "Vocabulary":
        """Sub-vocabulary with ``codes`` and all of their ancestors."""
        keep: set[str] = set()
        for code in codes:
            if code not in self.concepts:
                raise GraphError(f"code {code!r} not in hierarchy")
            keep.add(code)
            keep.update(self.ancestors(code))
        return Vocabulary(self.concepts[c] for c in sorted(keep))


def build_vocabulary(cohort: Cohort, hierarchy: Vocabulary | None = None) -> Vocabulary:
    """Every observed code plus its ancestors.

    Without ``hierarchy`` the ancestors come from the code prefix scheme
    (``dx:A.3`` -> ``dx:A`` -> ``dx:ROOT``).
    """
    observed: dict[str, str] = {}
    for m, codes in cohort.codes_by_modality().items():
        for code in codes:
            if observed.setdefault(code, m) != m:
                raise GraphError(f"code {code!r} appears under modalities {observed[code]} and {m}")
    if hierarchy is not None:
        for code, m in observed.items():
            if code in hierarchy and hierarchy[code].modality != m:
                raise GraphError(f"code {code!r} listed under {m} but hierarchy says {hierarchy[code].modality}")
        return hierarchy.closure(observed)

    concepts: dict[str, Concept] = {}
    for code in sorted(observed):
        chain = prefix_chain(code)
        if code.partition(":")[0] != observed[code]:
            raise GraphError(f"code {code!r} listed under {observed[code]} has the wrong modality prefix")
        for level, cid in enumerate(chain):
            if cid not in concepts:
                concepts[cid] = Concept(
                    cid, observed[code], level, chain[level - 1] if level else None, describe(cid)
                )
    return Vocabulary(concepts.values())


_VOCAB_COLUMNS = ["id", "modality", "level", "parent", "description"]


def save_vocabulary(vocab: Vocabulary, path: str | Path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("\t".join(_VOCAB_COLUMNS) + "\n")
        for cid in vocab.ids():
            c = vocab[cid]
            fh.write(f"{c.id}\t{c.modality}\t{c.level}\t{c.parent or ''}\t{c.description}\n")


def load_vocabulary(path: str | Path) -> Vocabulary:
    concepts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#") or line.split("\t")[0] == "id":
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise GraphError(f"{path}:{lineno}: expected 5 columns, got {len(parts)}")
            cid, modality, level, parent, desc = parts
            if modality not in MODALITIES:
                raise GraphError(f"{path}:{lineno}: unknown modality {modality!r}")
            concepts.append(Concept(cid, modality, int(level), parent or None, desc))
    return Vocabulary(concepts)


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class EdgeType:
    kind: str  # "hier" | "cross"
    src_mod: str
    dst_mod: str
    delta: int = 0

    def __post_init__(self):
        if self.kind == "hier":
            if self.src_mod != self.dst_mod:
                raise GraphError("hierarchy edges connect nodes of one modality")
        elif self.kind == "cross":
            if self.src_mod == self.dst_mod:
                raise GraphError("cross edges must connect different modalities")
            if self.delta < 0:
                raise GraphError("lag must be nonnegative")
        else:
            raise GraphError(f"unknown edge kind {self.kind!r}")

    @property
    def key(self) -> str:
        if self.kind == "hier":
            return f"hier:{self.src_mod}"
        return f"cross:{self.src_mod}>{self.dst_mod}:{self.delta}"

    @classmethod
    def from_key(cls, key: str) -> "EdgeType":
        kind, _, rest = key.partition(":")
        if kind == "hier":
            return cls("hier", rest, rest, 0)
        mods, _, delta = rest.rpartition(":")
        src, _, dst = mods.partition(">")
        return cls("cross", src, dst, int(delta))

    @classmethod
    def hier(cls, modality: str) -> "EdgeType":
        return cls("hier", modality, modality, 0)


@dataclass(frozen=True)
class TypedEdge:
    src: str
    dst: str
    etype: EdgeType
    pmi: float | None = None
    support: int | None = None
    stability: float | None = None

    @property
    def ident(self) -> tuple[str, str, EdgeType]:
        return (self.src, self.dst, self.etype)


@dataclass
class GraphConfig:
    max_lag: int = 2
    tau_pmi: float = 0.0
    kappa: int = 50
    n_boot: int = 10
    q: float = 0.8
    seed: int = 0
    # per edge-type PMI thresholds, keyed like "cross:dx>med:1"
    tau_overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_lag < 0:
            raise ValueError("max_lag must be >= 0")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if self.n_boot < 1:
            raise ValueError("n_boot must be >= 1")

    def tau_for(self, etype: EdgeType) -> float:
        return self.tau_overrides.get(etype.key, self.tau_pmi)


def build_hierarchy_edges(vocab: Vocabulary) -> list[TypedEdge]:
    """One parent->child edge per hierarchy link."""
    edges = []
    for cid in vocab.ids():
        con = vocab[cid]
        if con.parent is not None:
            edges.append(TypedEdge(con.parent, cid, EdgeType.hier(con.modality)))
    return edges


# ---------------------------------------------------------------------------
# lagged co-occurrence and PMI
# ---------------------------------------------------------------------------


class _EncodedCohort:
    """Integer-coded cohort with per-patient pair emissions, reusable across resamples."""

    def __init__(self, cohort: Cohort, max_lag: int):
        if len(cohort) == 0:
            raise GraphError("cannot count an empty cohort")
        by_mod = cohort.codes_by_modality()
        self.codes = sorted(set().union(*by_mod.values()))
        self.index = {c: i for i, c in enumerate(self.codes)}
        mod_of = {c: m for m, cs in by_mod.items() for c in cs}
        self.code_mod = np.array([MODALITIES.index(mod_of[c]) for c in self.codes], dtype=np.int64)
        self.max_lag = max_lag
        n = len(self.codes)

        flat, vptr, pptr, lengths = [], [0], [0], []
        occ_code, occ_pat = [], []
        for p, tr in enumerate(cohort):
            for v in tr.visits:
                ids = [self.index[c] for c in v.all_codes()]
                flat.extend(ids)
                occ_code.extend(ids)
                occ_pat.extend([p] * len(ids))
                vptr.append(len(flat))
            pptr.append(len(vptr) - 1)
            lengths.append(len(tr))
        self.n_patients = len(cohort)
        self.lengths = np.array(lengths, dtype=np.int64)
        self.occ_code = np.array(occ_code, dtype=np.int64)
        self.occ_pat = np.array(occ_pat, dtype=np.int64)

        keys, pats = _kernels.lagged_pair_keys(
            np.array(flat, dtype=np.int64), np.array(vptr, dtype=np.int64),
            np.array(pptr, dtype=np.int64), self.code_mod, max_lag, n,
        )
        self.keys, self.inverse = np.unique(keys, return_inverse=True)
        self.pair_pat = pats

    def counts(self, weights: np.ndarray | None = None) -> "CoocCounts":
        n = len(self.codes)
        if weights is None:
            weights = np.ones(self.n_patients, dtype=np.int64)
        w = weights.astype(np.float64)
        pair = np.bincount(self.inverse, weights=w[self.pair_pat], minlength=len(self.keys))
        visit = np.bincount(self.occ_code, weights=w[self.occ_pat], minlength=n)
        n_pairs = np.array(
            [float(np.sum(w * np.maximum(self.lengths - lag, 0))) for lag in range(self.max_lag + 1)]
        )
        nz = pair > 0
        return CoocCounts(
            codes=self.codes,
            code_mod=self.code_mod,
            keys=self.keys[nz],
            pair_counts=np.rint(pair[nz]).astype(np.int64),
            visit_counts=np.rint(visit).astype(np.int64),
            n_visits=int(round(n_pairs[0])),
            n_pairs=np.rint(n_pairs).astype(np.int64),
            max_lag=self.max_lag,
        )


@dataclass
class CoocCounts:
    """Sparse lagged co-occurrence counts over leaf codes.

    ``keys`` encode ``(lag * n + a) * n + b`` with ``a``, ``b`` indexes into
    ``codes``; ``n_pairs[lag]`` is the number of ordered visit pairs at that lag.
    """

    codes: list[str]
    code_mod: np.ndarray
    keys: np.ndarray
    pair_counts: np.ndarray
    visit_counts: np.ndarray
    n_visits: int
    n_pairs: np.ndarray
    max_lag: int

    def decode(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(self.codes)
        return self.keys // (n * n), (self.keys // n) % n, self.keys % n

    def count(self, a: str, b: str, lag: int) -> int:
        n = len(self.codes)
        try:
            key = (lag * n + self.codes.index(a)) * n + self.codes.index(b)
        except ValueError:
            return 0
        pos = np.searchsorted(self.keys, key)
        if pos < len(self.keys) and self.keys[pos] == key:
            return int(self.pair_counts[pos])
        return 0

    def as_dict(self) -> dict[tuple[str, str, int], int]:
        lag, a, b = self.decode()
        return {
            (self.codes[i], self.codes[j], int(l)): int(c)
            for l, i, j, c in zip(lag, a, b, self.pair_counts)
        }


def count_lagged(cohort: Cohort, max_lag: int) -> CoocCounts:
    """Cross-modal lagged co-occurrence counts (both directions at lag 0)."""
    return _EncodedCohort(cohort, max_lag).counts()


@dataclass
class PMITable:
    codes: list[str]
    lags: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    pmi: np.ndarray

    def as_dict(self) -> dict[tuple[str, str, int], float]:
        return {
            (self.codes[a], self.codes[b], int(l)): float(v)
            for l, a, b, v in zip(self.lags, self.src, self.dst, self.pmi)
        }

    def get(self, a: str, b: str, lag: int) -> float | None:
        return self.as_dict().get((a, b, lag))


def lagged_pmi(counts: CoocCounts) -> PMITable:
    """``log(P_lag(a, b) / (P(a) P(b)))`` for every pair with a nonzero count."""
    lag, a, b = counts.decode()
    p_ab = counts.pair_counts / counts.n_pairs[lag]
    p = counts.visit_counts / counts.n_visits
    with np.errstate(divide="ignore"):
        pmi = np.log(p_ab) - np.log(p[a]) - np.log(p[b])
    return PMITable(counts.codes, lag, a, b, pmi)


def _mod_names(counts: CoocCounts, idx: np.ndarray) -> list[str]:
    return [MODALITIES[m] for m in counts.code_mod[idx]]


def _passing(pmi: PMITable, counts: CoocCounts, cfg: GraphConfig) -> np.ndarray:
    tau = np.full(len(pmi.pmi), cfg.tau_pmi)
    if cfg.tau_overrides:
        for i, (l, a, b) in enumerate(zip(pmi.lags, pmi.src, pmi.dst)):
            et = EdgeType("cross", MODALITIES[counts.code_mod[a]], MODALITIES[counts.code_mod[b]], int(l))
            tau[i] = cfg.tau_for(et)
    return (pmi.pmi > tau) & (counts.pair_counts >= cfg.kappa)


def filter_cross_edges(pmi: PMITable, counts: CoocCounts, cfg: GraphConfig) -> list[TypedEdge]:
    """Keep ``a -> b`` at lag ``l`` iff PMI exceeds the threshold and support >= kappa."""
    keep = np.flatnonzero(_passing(pmi, counts, cfg))
    src_mod = _mod_names(counts, pmi.src[keep])
    dst_mod = _mod_names(counts, pmi.dst[keep])
    return [
        TypedEdge(
            counts.codes[pmi.src[i]], counts.codes[pmi.dst[i]],
            EdgeType("cross", sm, dm, int(pmi.lags[i])),
            pmi=float(pmi.pmi[i]), support=int(counts.pair_counts[i]),
        )
        for i, sm, dm in zip(keep, src_mod, dst_mod)
    ]


def bootstrap_stability(cohort: Cohort, cfg: GraphConfig) -> list[TypedEdge]:
    """Cross edges that pass the PMI/support filter in at least a fraction ``q`` of
    patient-level bootstrap resamples.

    Candidates are the edges passing on the full cohort; their PMI and support
    are reported from the full cohort.
    """
    enc = _EncodedCohort(cohort, cfg.max_lag)
    full = enc.counts()
    full_pmi = lagged_pmi(full)
    passing = _passing(full_pmi, full, cfg)
    cand_keys = full.keys[passing]
    hits = np.zeros(len(cand_keys), dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.n_boot):
        draw = rng.integers(0, enc.n_patients, size=enc.n_patients)
        weights = np.bincount(draw, minlength=enc.n_patients)
        cb = enc.counts(weights)
        ok = _passing(lagged_pmi(cb), cb, cfg)
        pos = np.searchsorted(cb.keys, cand_keys)
        pos = np.minimum(pos, max(len(cb.keys) - 1, 0))
        found = (cb.keys[pos] == cand_keys) if len(cb.keys) else np.zeros(len(cand_keys), bool)
        hits += found & ok[pos] if len(cb.keys) else 0
    stab = hits / cfg.n_boot
    edges = filter_cross_edges(full_pmi, full, cfg)
    return [
        TypedEdge(e.src, e.dst, e.etype, e.pmi, e.support, float(s))
        for e, s in zip(edges, stab)
        if s >= cfg.q
    ]


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class ClinicalGraph:
    """Vocabulary plus typed edges with adjacency indexes."""

    def __init__(self, vocab: Vocabulary, edges: Iterable[TypedEdge]):
        self.vocab = vocab
        self.edges: tuple[TypedEdge, ...] = tuple(edges)
        self.by_type: dict[EdgeType, list[TypedEdge]] = defaultdict(list)
        self._assoc0: dict[str, set[str]] = defaultdict(set)
        self._lagged: dict[str, set[str]] = defaultdict(set)
        self._children: dict[str, set[str]] = defaultdict(set)
        self._parent: dict[str, str] = {}
        for e in self.edges:
            self.by_type[e.etype].append(e)
            if e.etype.kind == "hier":
                self._children[e.src].add(e.dst)
                self._parent[e.dst] = e.src
            elif e.etype.delta == 0:
                self._assoc0[e.src].add(e.dst)
            else:
                self._lagged[e.src].add(e.dst)

    @property
    def hier_edges(self) -> list[TypedEdge]:
        return [e for e in self.edges if e.etype.kind == "hier"]

    @property
    def cross_edges(self) -> list[TypedEdge]:
        return [e for e in self.edges if e.etype.kind == "cross"]

    def edge_types(self) -> list[EdgeType]:
        return sorted(self.by_type)

    def children(self, v: str) -> set[str]:
        return set(self._children.get(v, ()))

    def parent(self, v: str) -> str | None:
        return self._parent.get(v)

    def assoc0(self, v: str) -> set[str]:
        return set(self._assoc0.get(v, ()))

    def lagged(self, v: str) -> set[str]:
        return set(self._lagged.get(v, ()))

    def descendants(self, v: str) -> set[str]:
        out: set[str] = set()
        stack = list(self._children.get(v, ()))
        while stack:
            node = stack.pop()
            if node not in out:
                out.add(node)
                stack.extend(self._children.get(node, ()))
        return out


def assemble_graph(vocab: Vocabulary, hier: Iterable[TypedEdge], cross: Iterable[TypedEdge]) -> ClinicalGraph:
    """Union of both edge families; duplicates keep their most stable copy."""
    best: dict[tuple, TypedEdge] = {}
    for e in list(hier) + list(cross):
        for end in (e.src, e.dst):
            if end not in vocab:
                raise GraphError(f"edge endpoint {end!r} not in vocabulary")
        prev = best.get(e.ident)
        if prev is None or (e.stability or 0.0) > (prev.stability or 0.0):
            best[e.ident] = e
    edges = sorted(best.values(), key=lambda e: (e.etype.kind, e.src, e.dst, e.etype))
    return ClinicalGraph(vocab, edges)


def build_clinical_graph(
    cohort: Cohort,
    cfg: GraphConfig,
    train_ids: Iterable[str] | None = None,
    hierarchy: Vocabulary | None = None,
) -> ClinicalGraph:
    """Vocabulary, hierarchy edges and stable cross edges from a training cohort.

    When ``train_ids`` is given, any patient outside it raises ``LeakageError``.
    """
    if train_ids is not None:
        allowed = set(train_ids)
        leaked = [p for p in cohort.patient_ids if p not in allowed]
        if leaked:
            raise LeakageError(f"{len(leaked)} patient(s) outside the training split, e.g. {leaked[0]!r}")
    vocab = build_vocabulary(cohort, hierarchy)
    return assemble_graph(vocab, build_hierarchy_edges(vocab), bootstrap_stability(cohort, cfg))


_GRAPH_COLUMNS = ["src", "dst", "kind", "src_mod", "dst_mod", "delta", "pmi", "support", "stability"]


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def save_graph(graph: ClinicalGraph, path: str | Path, config: Mapping | None = None, config_hash: str = "") -> None:
    echo = json.dumps(config or {}, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# riskhorizon-graph config_hash={config_hash} config={echo}\n")
        fh.write("\t".join(_GRAPH_COLUMNS) + "\n")
        for e in graph.edges:
            et = e.etype
            fh.write("\t".join([
                e.src, e.dst, et.kind, et.src_mod, et.dst_mod, str(et.delta),
                _fmt(e.pmi), _fmt(e.support), _fmt(e.stability),
            ]) + "\n")


def load_graph(path: str | Path, vocab: Vocabulary) -> ClinicalGraph:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#") or line.startswith("src\t"):
                continue
            parts = line.split("\t")
            if len(parts) != len(_GRAPH_COLUMNS):
                raise GraphError(f"{path}:{lineno}: expected {len(_GRAPH_COLUMNS)} columns")
            src, dst, kind, sm, dm, delta, pmi, support, stab = parts
            edges.append(TypedEdge(
                src, dst, EdgeType(kind, sm, dm, int(delta)),
                float(pmi) if pmi else None,
                int(support) if support else None,
                float(stab) if stab else None,
            ))
    hier = [e for e in edges if e.etype.kind == "hier"]
    cross = [e for e in edges if e.etype.kind == "cross"]
    return assemble_graph(vocab, hier, cross)


def pmi_brute_force(cohort: Cohort, max_lag: int) -> dict[tuple[str, str, int], float]:
    """Nested-loop lagged PMI; an independent check on ``count_lagged``/``lagged_pmi``."""
    visit_count: dict[str, int] = defaultdict(int)
    n_visits = 0
    mod_of = {}
    for tr in cohort:
        for v in tr.visits:
            n_visits += 1
            for m in MODALITIES:
                for code in v.codes(m):
                    visit_count[code] += 1
                    mod_of[code] = m
    out = {}
    for lag in range(max_lag + 1):
        counts: dict[tuple[str, str], int] = defaultdict(int)
        n_pairs = 0
        for tr in cohort:
            for t in range(len(tr.visits) - lag):
                n_pairs += 1
                for a in tr.visits[t].all_codes():
                    for b in tr.visits[t + lag].all_codes():
                        if mod_of[a] != mod_of[b]:
                            counts[(a, b)] += 1
        for (a, b), cnt in counts.items():
            pa, pb = visit_count[a] / n_visits, visit_count[b] / n_visits
            out[(a, b, lag)] = math.log((cnt / n_pairs) / (pa * pb))
    return out
