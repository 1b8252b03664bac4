"""Joint training of Poincaré embeddings with typed edge and masked-visit losses.

Ball points follow a Riemannian Adam: the Euclidean gradient is rescaled by
the inverse metric, the first moment is kept per coordinate and the second
moment per point (squared Riemannian norm), and each step is a retraction
followed by projection into the ball. Edge biases and the softplus-
parameterized curvature take plain Adam steps.

Hierarchy edges draw their negatives around the child by default, which
keeps high-degree ancestors from being repelled toward the boundary.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .corpus import Cohort
from .graph import ClinicalGraph, EdgeType, TypedEdge, Vocabulary
from .manifold import BALL_EPS, project

log = logging.getLogger(__name__)

_MAGIC = "riskhorizon-embeddings"


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


@dataclass
class TrainConfig:
    d: int = 64
    c_init: float = 1.0
    c_trainable: bool = True
    n_neg: int = 50
    mask_ratio_range: tuple[float, float] = (0.15, 0.30)
    alpha: float = 1.0
    tau_temp: float = 1.0
    lr: float = 0.05
    # Adam step size for edge biases and curvature
    lr_aux: float = 0.01
    epochs: int = 60
    edge_batch: int = 64
    visit_batch: int = 64
    seed: int = 0
    optimizer: str = "radam"  # "radam" | "rsgd"
    # which endpoint of a hierarchy edge anchors its negatives
    hier_anchor: str = "child"
    # initial epochs run at lr * burnin_factor
    burnin_epochs: int = 0
    burnin_factor: float = 0.1
    backend: str | None = None

    def __post_init__(self):
        self.mask_ratio_range = tuple(self.mask_ratio_range)
        lo, hi = self.mask_ratio_range
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not 0 < lo <= hi < 1:
            raise ValueError("mask ratio range must satisfy 0 < lo <= hi < 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau_temp <= 0:
            raise ValueError("tau_temp must be > 0")
        if self.c_init <= 0:
            raise ValueError("c_init must be > 0")
        if self.n_neg < 1 or self.epochs < 0 or self.edge_batch < 1 or self.visit_batch < 1:
            raise ValueError("n_neg, edge_batch and visit_batch must be >= 1; epochs >= 0")
        if self.lr <= 0 or self.lr_aux <= 0:
            raise ValueError("learning rates must be > 0")
        if self.hier_anchor not in ("child", "parent"):
            raise ValueError(f"hier_anchor must be 'child' or 'parent', got {self.hier_anchor!r}")
        if self.optimizer not in ("radam", "rsgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    edge_loss: float
    mask_loss: float | None
    total_loss: float
    seconds: float
    curvature: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    final_curvature: float = float("nan")
    backend: str = ""

    def to_dict(self) -> dict:
        rows = []
        for e in self.epochs:
            row = asdict(e)
            if row["mask_loss"] is None:
                del row["mask_loss"]
            rows.append(row)
        return {"backend": self.backend, "final_curvature": self.final_curvature, "epochs": rows}


class EmbeddingStore:
    """Ball points per concept, one bias per edge type and the curvature."""

    def __init__(self, ids: Sequence[str], Z: np.ndarray, c: float, gamma: dict[EdgeType, float]):
        if len(ids) != len(Z):
            raise ValueError("ids and Z differ in length")
        self.ids = list(ids)
        self.index = {cid: i for i, cid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate concept ids")
        self.Z = np.ascontiguousarray(Z, dtype=np.float64)
        self.c = float(c)
        self.gamma = dict(gamma)

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def __contains__(self, cid: str) -> bool:
        return cid in self.index

    def point(self, cid: str) -> np.ndarray:
        try:
            return self.Z[self.index[cid]]
        except KeyError:
            raise KeyError(f"concept {cid!r} is not embedded") from None

    def points(self, ids: Iterable[str]) -> np.ndarray:
        try:
            return self.Z[[self.index[c] for c in ids]]
        except KeyError as exc:
            raise KeyError(f"concept {exc.args[0]!r} is not embedded") from None

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(self.ids, self.Z.copy(), self.c, self.gamma)


def init_store(vocab: Vocabulary, cfg: TrainConfig, seed: int | None = None, edge_types: Iterable[EdgeType] = ()) -> EmbeddingStore:
    """Points uniform in the ball of radius ``0.001/sqrt(c)``; every bias starts at zero."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    ids = vocab.ids()
    n = len(ids)
    g = rng.standard_normal((n, cfg.d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    radius = 0.001 / math.sqrt(cfg.c_init) * rng.random(n) ** (1.0 / cfg.d)
    return EmbeddingStore(ids, g * radius[:, None], cfg.c_init, {et: 0.0 for et in edge_types})


def score_edge(u: str, v: str, store: EmbeddingStore) -> float:
    """Compatibility ``-dist(z_u, z_v)``."""
    d, *_ = _kernels.pair_dist_grad(store.point(u)[None], store.point(v)[None], store.c)
    return -float(d[0])


class NegativeSampler:
    """Uniform draws from a modality's concepts, excluding the true target.

    ``restrict`` limits the pools to a subset of concepts (e.g. observable codes).
    """

    def __init__(self, vocab: Vocabulary, index: dict[str, int], restrict: set[str] | None = None):
        self.pools: dict[str, np.ndarray] = {}
        self.pos: dict[int, tuple[str, int]] = {}
        for m in vocab.modalities():
            members = [c for c in vocab.modality_ids(m) if restrict is None or c in restrict]
            ids = np.array(sorted(index[c] for c in members), dtype=np.int64)
            self.pools[m] = ids
            for k, i in enumerate(ids):
                self.pos[int(i)] = (m, k)

    def sample(self, targets: np.ndarray, n_neg: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((len(targets), n_neg), dtype=np.int64)
        for row, t in enumerate(targets):
            try:
                m, k = self.pos[int(t)]
            except KeyError:
                raise ValueError(f"target index {int(t)} is outside the negative pools") from None
            pool = self.pools[m]
            if len(pool) < 2:
                raise ValueError(f"modality {m} has a single concept; cannot draw negatives")
            j = rng.integers(0, len(pool) - 1, size=n_neg)
            j += j >= k
            out[row] = pool[j]
        return out


def sample_negatives(edge: TypedEdge, vocab: Vocabulary, n_neg: int, rng: np.random.Generator) -> list[str]:
    """``n_neg`` ids from the destination's modality, never the destination itself."""
    pool = [c for c in vocab.modality_ids(vocab[edge.dst].modality) if c != edge.dst]
    if not pool:
        raise ValueError(f"modality of {edge.dst!r} has no other concepts")
    return [pool[i] for i in rng.integers(0, len(pool), size=n_neg)]


def edge_loss(edges: Sequence[TypedEdge], store: EmbeddingStore, negatives: Sequence[Sequence[str]], backend=None):
    """Summed negative-sampling loss with gradients ``(loss, grad_Z, grad_gamma, grad_c)``.

    ``grad_gamma`` maps each edge type to its derivative.
    """
    k = _kernels.load_backend(backend)
    types = sorted({e.etype for e in edges})
    tix = {t: i for i, t in enumerate(types)}
    gamma = np.array([store.gamma.get(t, 0.0) for t in types])
    src = np.array([store.index[e.src] for e in edges], dtype=np.int64)
    dst = np.array([store.index[e.dst] for e in edges], dtype=np.int64)
    et = np.array([tix[e.etype] for e in edges], dtype=np.int64)
    neg = np.array([[store.index[n] for n in row] for row in negatives], dtype=np.int64).reshape(len(edges), -1)
    loss, gZ, gg, gc = k.edge_loss_grad(store.Z, store.c, gamma, src, dst, et, neg)
    return loss, gZ, dict(zip(types, gg.tolist())), gc


def mask_visit(codes: Sequence[str], rho: float, rng: np.random.Generator):
    """Split ``codes`` into ``(kept, masked)``; ``None`` when fewer than 2 codes.

    Independent Bernoulli(rho) masking, retried once if it masks all or none,
    then exactly ``ceil(rho * n)`` uniformly chosen codes.
    """
    codes = list(codes)
    n = len(codes)
    if n < 2:
        return None
    for _ in range(2):
        hit = rng.random(n) < rho
        if 0 < hit.sum() < n:
            break
    else:
        k = min(n - 1, max(1, math.ceil(rho * n)))
        hit = np.zeros(n, dtype=bool)
        hit[rng.choice(n, size=k, replace=False)] = True
    kept = [c for c, h in zip(codes, hit) if not h]
    masked = [c for c, h in zip(codes, hit) if h]
    return kept, masked


def mask_loss(masked: Sequence[str], kept: Sequence[str], store: EmbeddingStore, tau_temp: float,
              negatives: Sequence[Sequence[str]], weights: Sequence[float] | None = None, backend=None):
    """Sampled-softmax loss of one visit's masked codes; ``(loss, grad_Z, grad_c)``."""
    k = _kernels.load_backend(backend)
    kept_idx = np.array([store.index[c] for c in kept], dtype=np.int64)
    mask_idx = np.array([store.index[c] for c in masked], dtype=np.int64)
    w = np.ones(len(kept)) if weights is None else np.asarray(weights, dtype=np.float64)
    neg = np.array([[store.index[n] for n in row] for row in negatives], dtype=np.int64).reshape(len(masked), -1)
    return k.mask_loss_grad(
        store.Z, store.c, tau_temp,
        np.array([0, len(kept)], dtype=np.int64), kept_idx, w,
        np.array([0, len(masked)], dtype=np.int64), mask_idx, neg,
    )


class _Adam:
    def __init__(self, shape, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


class _RiemannianSGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, Z, g_euc, c):
        one_minus = 1.0 - c * np.einsum("ij,ij->i", Z, Z)
        return self.lr * (one_minus ** 2 / 4.0)[:, None] * g_euc


class _RiemannianAdam:
    """Adam for ball points: first moment on the Riemannian gradient, a scalar
    second moment per point on its squared Riemannian norm, retraction step."""

    def __init__(self, shape, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape[0])
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, Z, g_euc, c):
        self.t += 1
        one_minus = 1.0 - c * np.einsum("ij,ij->i", Z, Z)
        g = (one_minus ** 2 / 4.0)[:, None] * g_euc
        lam2 = 4.0 / one_minus ** 2
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * lam2 * np.einsum("ij,ij->i", g, g)
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)[:, None]


def _encode_visits(cohort: Cohort | None, index: dict[str, int]) -> list[np.ndarray]:
    if cohort is None:
        return []
    out = []
    for tr in cohort:
        for v in tr.visits:
            ids = [index[c] for c in v.all_codes() if c in index]
            if len(ids) >= 2:
                out.append(np.array(ids, dtype=np.int64))
    return out


def train(graph: ClinicalGraph, train_cohort: Cohort | None, cfg: TrainConfig,
          store: EmbeddingStore | None = None) -> tuple[EmbeddingStore, TrainReport]:
    """Minimize ``mean edge loss + alpha * mean mask loss`` over mini-batches.

    An epoch is ``max(ceil(E / edge_batch), ceil(V / visit_batch))`` steps,
    with edges and visits each drawn by reshuffled permutation.
    """
    kern = _kernels.load_backend(cfg.backend)
    rng = np.random.default_rng(cfg.seed)
    types = graph.edge_types()
    if store is None:
        store = init_store(graph.vocab, cfg, cfg.seed, types)
    else:
        store = store.copy()
        for t in types:
            store.gamma.setdefault(t, 0.0)
    tix = {t: i for i, t in enumerate(types)}
    index = store.index
    edges = graph.edges
    E = len(edges)
    e_src = np.array([index[e.src] for e in edges], dtype=np.int64)
    e_dst = np.array([index[e.dst] for e in edges], dtype=np.int64)
    if cfg.hier_anchor == "child":
        # distance is symmetric; only the side that draws negatives changes
        hier = np.array([e.etype.kind == "hier" for e in edges], dtype=bool)
        e_src[hier], e_dst[hier] = e_dst[hier], e_src[hier].copy()
    e_typ = np.array([tix[e.etype] for e in edges], dtype=np.int64)
    use_mask = cfg.alpha > 0
    visits = _encode_visits(train_cohort, index) if use_mask else []
    V = len(visits)
    sampler = NegativeSampler(graph.vocab, index)
    # masked codes compete only against codes that could have been observed
    observable = set(graph.vocab.leaves()) | {store.ids[i] for v in visits for i in v}
    leaf_sampler = NegativeSampler(graph.vocab, index, observable)

    Z = store.Z
    gamma = np.array([store.gamma[t] for t in types])
    raw_c = _softplus_inv(store.c)
    opt_z = _RiemannianAdam(Z.shape, cfg.lr) if cfg.optimizer == "radam" else _RiemannianSGD(cfg.lr)
    opt_g = _Adam(gamma.shape, cfg.lr_aux)
    opt_c = _Adam((), cfg.lr_aux)

    steps = max(math.ceil(E / cfg.edge_batch) if E else 0, math.ceil(V / cfg.visit_batch) if V else 0)
    report = TrainReport(backend=kern.NAME)
    e_perm, e_pos = rng.permutation(E), 0
    v_perm, v_pos = rng.permutation(V), 0
    lo, hi = cfg.mask_ratio_range

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sum_edge = sum_mask = 0.0
        opt_z.lr = cfg.lr * (cfg.burnin_factor if epoch < cfg.burnin_epochs else 1.0)
        for _ in range(steps):
            c = store.c
            gZ = np.zeros_like(Z)
            gg = np.zeros_like(gamma)
            gc = 0.0
            if E:
                if e_pos + cfg.edge_batch > E:
                    e_perm, e_pos = rng.permutation(E), 0
                b = e_perm[e_pos:e_pos + cfg.edge_batch]
                e_pos += cfg.edge_batch
                neg = sampler.sample(e_dst[b], cfg.n_neg, rng)
                le, gze, gge, gce = kern.edge_loss_grad(Z, c, gamma, e_src[b], e_dst[b], e_typ[b], neg)
                nb = len(b)
                sum_edge += le / nb
                gZ += gze / nb
                gg += gge / nb
                gc += gce / nb
            if use_mask and V:
                if v_pos + cfg.visit_batch > V:
                    v_perm, v_pos = rng.permutation(V), 0
                b = v_perm[v_pos:v_pos + cfg.visit_batch]
                v_pos += cfg.visit_batch
                kept_ptr, kept_idx, mask_ptr, mask_idx = [0], [], [0], []
                for vi in b:
                    split = mask_visit(visits[vi], rng.uniform(lo, hi), rng)
                    kept, masked = split
                    kept_idx.extend(kept)
                    mask_idx.extend(masked)
                    kept_ptr.append(len(kept_idx))
                    mask_ptr.append(len(mask_idx))
                mask_idx_a = np.array(mask_idx, dtype=np.int64)
                neg = leaf_sampler.sample(mask_idx_a, cfg.n_neg, rng)
                lm, gzm, gcm = kern.mask_loss_grad(
                    Z, c, cfg.tau_temp,
                    np.array(kept_ptr, dtype=np.int64), np.array(kept_idx, dtype=np.int64),
                    np.ones(len(kept_idx)), np.array(mask_ptr, dtype=np.int64), mask_idx_a, neg,
                )
                nm = len(mask_idx)
                sum_mask += lm / nm
                gZ += cfg.alpha * gzm / nm
                gc += cfg.alpha * gcm / nm

            Z -= opt_z.step(Z, gZ, c)
            gamma -= opt_g.step(gg)
            if cfg.c_trainable:
                raw_c -= float(opt_c.step(gc * _sigmoid(raw_c)))
                store.c = _softplus(raw_c)
            Z[:] = project(Z, store.c, BALL_EPS)

        edge_mean = sum_edge / steps if steps else 0.0
        mask_mean = (sum_mask / steps if steps else 0.0) if use_mask else None
        total = edge_mean + (cfg.alpha * mask_mean if use_mask else 0.0)
        stats = EpochStats(epoch, edge_mean, mask_mean, total, time.perf_counter() - t0, store.c)
        report.epochs.append(stats)
        log.info("epoch %d edge=%.5f mask=%s c=%.4f", epoch, edge_mean, mask_mean, store.c)
        if not (math.isfinite(total) and np.all(np.isfinite(Z)) and math.isfinite(store.c)):
            report.final_curvature = store.c
            raise TrainingDivergedError(f"non-finite loss or parameters at epoch {epoch}", report)

    store.gamma = {t: float(g) for t, g in zip(types, gamma)}
    report.final_curvature = store.c
    return store, report


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_embeddings(store: EmbeddingStore, path: str | Path, config_hash: str = "") -> None:
    """Text header line, then per concept a uint16 id length, the UTF-8 id and
    ``d`` little-endian float64 values. Biases go to ``<path>.gamma.tsv``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} d={store.d} c={store.c!r} count={len(store.ids)} config_hash={config_hash}\n".encode())
        for cid, row in zip(store.ids, store.Z):
            raw = cid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(row.astype("<f8").tobytes())
    with open(gamma_path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("edge_type\tgamma\n")
        for t in sorted(store.gamma):
            fh.write(f"{t.key}\t{store.gamma[t]!r}\n")


def gamma_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".gamma.tsv")


def load_embeddings(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if not header or header[0] != _MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        meta = dict(tok.split("=", 1) for tok in header[1:])
        d, count, c = int(meta["d"]), int(meta["count"]), float(meta["c"])
        ids, rows = [], np.empty((count, d))
        for i in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            ids.append(fh.read(n).decode("utf-8"))
            buf = fh.read(8 * d)
            if len(buf) != 8 * d:
                raise ValueError(f"{path}: truncated at concept {i}")
            rows[i] = np.frombuffer(buf, dtype="<f8")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    gamma = {}
    gp = gamma_path(path)
    if gp.exists():
        with open(gp, encoding="utf-8") as fh:
            next(fh, None)
            for line in fh:
                key, val = line.rstrip("\n").split("\t")
                gamma[EdgeType.from_key(key)] = float(val)
    return EmbeddingStore(ids, rows, c, gamma)
