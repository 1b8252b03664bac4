import math

import numpy as np
import pytest
from scipy import stats

from riskhorizon.graph import ClinicalGraph, Concept, Vocabulary, EdgeType, TypedEdge, assemble_graph, build_hierarchy_edges
from riskhorizon.manifold import BALL_EPS
from riskhorizon.synthetic import tree_vocabulary
from riskhorizon.trainer import (
    EmbeddingStore,
    NegativeSampler,
    TrainConfig,
    edge_loss,
    init_store,
    load_embeddings,
    mask_loss,
    mask_visit,
    sample_negatives,
    save_embeddings,
    score_edge,
    train,
)

from conftest import make_cohort

ET = EdgeType("cross", "dx", "med", 1)


def _store(points, c=1.0, gamma=None):
    ids = list(points)
    return EmbeddingStore(ids, np.array([points[i] for i in ids], dtype=float), c, gamma or {ET: 0.0})


def test_config_validation():
    for bad in (dict(d=1), dict(mask_ratio_range=(0.3, 0.2)), dict(alpha=-1), dict(tau_temp=0), dict(c_init=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_init_store(tiny_vocab):
    cfg = TrainConfig(d=8, c_init=2.0)
    a = init_store(tiny_vocab, cfg, 5, [ET])
    b = init_store(tiny_vocab, cfg, 5, [ET])
    assert np.array_equal(a.Z, b.Z)
    assert np.all(np.linalg.norm(a.Z, axis=1) < 0.001 / math.sqrt(2.0))
    assert a.gamma == {ET: 0.0} and a.c == 2.0
    assert set(a.ids) == set(tiny_vocab.ids())


def test_score_edge():
    s = _store({"u": [0.6, 0.0], "v": [0.0, 0.0], "w": [0.6, 0.0]})
    assert score_edge("u", "w", s) == 0.0
    assert score_edge("u", "v", s) == pytest.approx(-math.log(4), abs=1e-12)
    assert score_edge("u", "v", s) == score_edge("v", "u", s)
    with pytest.raises(KeyError):
        score_edge("u", "nope", s)


def test_sample_negatives(tiny_vocab, rng):
    e = TypedEdge("dx:A.1.1", "med:B.2", ET)
    neg = sample_negatives(e, tiny_vocab, 50, rng)
    assert len(neg) == 50
    assert all(n.startswith("med:") and n != "med:B.2" for n in neg)
    single = Vocabulary([Concept("dx:ROOT", "dx", 0, None, ""), Concept("med:ROOT", "med", 0, None, "")])
    with pytest.raises(ValueError):
        sample_negatives(TypedEdge("dx:ROOT", "med:ROOT", EdgeType("cross", "dx", "med", 0)), single, 5, rng)


def test_negative_sampler_uniform(rng):
    vocab = tree_vocabulary({"dx": (2,), "med": (9,)})  # 10 med concepts
    index = {c: i for i, c in enumerate(vocab.ids())}
    target = index["med:D"]
    n = 100_000
    draws = NegativeSampler(vocab, index).sample(np.array([target]), n, rng)[0]
    assert target not in draws
    counts = np.bincount(draws, minlength=len(index))[[index[c] for c in vocab.modality_ids("med") if c != "med:D"]]
    p = 1 / 9
    assert np.all(np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p)))
    assert stats.chisquare(counts).pvalue > 1e-3


def test_edge_loss_hand_values():
    s = _store({"u": [0.0, 0.0], "v": [0.0, 0.0], "n": [0.0, 0.0]})
    loss, *_ = edge_loss([TypedEdge("u", "v", ET)], s, [["n"]])
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)
    # negatives pushed toward the boundary, bias midway: loss -> 0
    losses = []
    for r in (0.9, 0.999, 0.99999, 0.9999999):
        far = _store({"u": [0.3, 0.0], "v": [0.3, 0.0], "n": [-r, 0.0]})
        far.gamma[ET] = score_edge("u", "n", far) / -2
        losses.append(edge_loss([TypedEdge("u", "v", ET)], far, [["n"]])[0])
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-3


def test_edge_loss_gamma_gradient():
    s = _store({"u": [0.1, 0.2], "v": [-0.3, 0.1], "n": [0.4, -0.4]}, gamma={ET: 0.3})
    e, neg = [TypedEdge("u", "v", ET)], [["n", "n"]]
    _, _, gg, _ = edge_loss(e, s, neg)
    h = 1e-6
    up = _store({k: s.point(k) for k in s.ids}, gamma={ET: 0.3 + h})
    dn = _store({k: s.point(k) for k in s.ids}, gamma={ET: 0.3 - h})
    fd = (edge_loss(e, up, neg)[0] - edge_loss(e, dn, neg)[0]) / (2 * h)
    assert gg[ET] == pytest.approx(fd, rel=1e-6)


def test_bias_shift_preserves_ranking():
    pts = {"u": [0.1, 0.0], "a": [0.3, 0.1], "b": [-0.2, 0.5], "c": [0.0, -0.7]}
    order = sorted("abc", key=lambda x: -score_edge("u", x, _store(pts, gamma={ET: 0.0})))
    shifted = sorted("abc", key=lambda x: -score_edge("u", x, _store(pts, gamma={ET: 5.0})))
    assert order == shifted


def test_mask_visit_partition(rng):
    codes = [f"dx:A.{i}" for i in range(10)]
    for rho in (0.05, 0.15, 0.3, 0.95):
        kept, masked = mask_visit(codes, rho, rng)
        assert sorted(kept + masked) == sorted(codes)
        assert not set(kept) & set(masked)
        assert kept and masked
    assert mask_visit(["dx:A"], 0.5, rng) is None


def test_mask_visit_fallback_exact_count():
    class Stuck:
        """Always masks everything, forcing the exact-count fallback."""

        def random(self, n):
            return np.zeros(n)

        def choice(self, n, size, replace):
            return np.arange(size)

    kept, masked = mask_visit([f"c{i}" for i in range(10)], 0.1, Stuck())
    assert len(masked) == 1 and len(kept) == 9


def test_mask_loss_hand_values():
    s = _store({"k": [0.0, 0.0], "m": [0.3, 0.0], "n": [-0.3, 0.0]})
    loss, *_ = mask_loss(["m"], ["k"], s, 1.0, [["n"]])
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    s = _store({"k": [0.2, 0.0], "m": [0.2, 0.0], "n": [-0.9999, 0.0]})
    loss, *_ = mask_loss(["m"], ["k"], s, 1.0, [["n"]])
    assert loss < 1e-3


def _toy_graph():
    vocab = tree_vocabulary({"dx": (2, 2), "med": (2, 2)})
    cross = [TypedEdge("dx:A.1", "med:B.2", ET, 1.0, 60), TypedEdge("dx:B.1", "med:A.1", ET, 1.0, 60)]
    return assemble_graph(vocab, build_hierarchy_edges(vocab), cross)


def test_train_tiny_properties(tmp_path):
    graph = _toy_graph()
    cohort = make_cohort({"p": [["dx:A.1", "med:B.2"], ["dx:B.1", "med:A.1", "med:A.2"]]})
    cfg = TrainConfig(d=4, epochs=5, n_neg=5, seed=1)
    s1, r1 = train(graph, cohort, cfg)
    s2, r2 = train(graph, cohort, cfg)
    assert np.array_equal(s1.Z, s2.Z) and s1.c == s2.c
    assert s1.c > 0
    assert np.all(np.linalg.norm(s1.Z, axis=1) <= (1 - BALL_EPS) / math.sqrt(s1.c) + 1e-15)
    assert set(s1.gamma) == set(graph.edge_types())
    for row in r1.to_dict()["epochs"]:
        assert row["edge_loss"] >= 0 and row["mask_loss"] >= 0
    save_embeddings(s1, tmp_path / "e.bin", "abc")
    back = load_embeddings(tmp_path / "e.bin")
    assert back.ids == s1.ids and np.array_equal(back.Z, s1.Z) and back.c == s1.c and back.gamma == s1.gamma


def test_alpha_zero_omits_mask_loss():
    graph = _toy_graph()
    cohort = make_cohort({"p": [["dx:A.1", "med:B.2"], ["dx:B.1", "med:A.1"]]})
    _, report = train(graph, cohort, TrainConfig(d=4, epochs=2, n_neg=3, alpha=0.0))
    assert all(e.mask_loss is None for e in report.epochs)
    assert all("mask_loss" not in row for row in report.to_dict()["epochs"])


def test_fixed_curvature_stays():
    store, _ = train(_toy_graph(), None, TrainConfig(d=4, epochs=3, n_neg=3, c_trainable=False, c_init=0.7))
    assert store.c == 0.7


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not an embedding\n")
    with pytest.raises(ValueError):
        load_embeddings(tmp_path / "x.bin")


def test_loss_decreases_on_500_node_graph():
    vocab = tree_vocabulary((5, 5, 4))  # 4 modalities x 131 = 524 concepts
    assert len(vocab) > 500
    graph = ClinicalGraph(vocab, build_hierarchy_edges(vocab))
    _, report = train(graph, None, TrainConfig(d=16, epochs=5, seed=0))
    totals = [e.total_loss for e in report.epochs]
    assert all(b < a * 0.99 for a, b in zip(totals, totals[1:]))


def test_trained_store_is_contained(small_trained):
    graph, store, report = small_trained
    assert np.all(np.linalg.norm(store.Z, axis=1) <= (1 - BALL_EPS) / math.sqrt(store.c) + 1e-15)
    first, last = report.epochs[0].total_loss, report.epochs[-1].total_loss
    assert last < first
