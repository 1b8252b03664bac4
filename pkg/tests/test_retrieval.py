import math

import numpy as np
import pytest
from mpmath import mp, mpf

from riskhorizon.central_event import CentralEvent
from riskhorizon.graph import EdgeType, TypedEdge, assemble_graph, build_hierarchy_edges
from riskhorizon.manifold import exp0, log0
from riskhorizon.retrieval import (
    RetrievalConfig,
    build_risk_horizon,
    candidate_pool,
    cone_cosines,
    cone_direction,
    geo_score,
    horizon_records,
    in_cone,
)
from riskhorizon.synthetic import tree_vocabulary
from riskhorizon.trainer import EmbeddingStore

from conftest import ball_points


def _store(points, c=1.0):
    ids = list(points)
    return EmbeddingStore(ids, np.array([points[i] for i in ids], dtype=float), c, {})


def _graph():
    vocab = tree_vocabulary({"dx": (2, 2), "proc": (2,), "med": (2, 2)})
    cross = [
        TypedEdge("dx:A", "proc:A", EdgeType("cross", "dx", "proc", 0), 1.0, 60),
        TypedEdge("dx:A", "med:B.1", EdgeType("cross", "dx", "med", 2), 1.0, 60),
        TypedEdge("med:A.1", "dx:A", EdgeType("cross", "med", "dx", 1), 1.0, 60),
    ]
    return assemble_graph(vocab, build_hierarchy_edges(vocab), cross)


def test_config_validation():
    for bad in (dict(K=0), dict(phi=0.0), dict(phi=4.0), dict(eta=-0.1), dict(cone_mode="x")):
        with pytest.raises(ValueError):
            RetrievalConfig(**bad)


def test_candidate_pool_union():
    g = _graph()
    assert candidate_pool("dx:A", g) == {"dx:A.1", "dx:A.2", "proc:A", "med:B.1"}
    assert candidate_pool("dx:B.2", g) == set()
    with pytest.raises(KeyError):
        candidate_pool("dx:Z", g)


def test_descendant_count():
    vocab = tree_vocabulary({"dx": (1, 3, 3)})
    g = assemble_graph(vocab, build_hierarchy_edges(vocab), [])
    # brute-force traversal through the parent pointers
    under = [c for c in vocab.ids() if "dx:A" in vocab.ancestors(c)]
    assert len(candidate_pool("dx:A", g)) == len(under) == 12


def test_cone_direction_examples():
    vocab = tree_vocabulary({"dx": (2,)})
    s = _store({"dx:ROOT": [0.0, 0.0], "dx:A": [0.4, 0.0], "dx:B": [0.1, 0.2]})
    cone = cone_direction("dx:A", s, vocab)
    assert np.allclose(cone.direction, log0(s.point("dx:A"), 1.0), atol=0)
    assert np.allclose(cone.direction / np.linalg.norm(cone.direction), [1.0, 0.0], atol=1e-15)
    assert not cone.degenerate
    root = cone_direction("dx:ROOT", s, vocab)
    assert root.degenerate and np.all(root.direction == 0)


def test_in_cone_examples():
    vocab = tree_vocabulary({"dx": (3,)})
    s = _store({"dx:ROOT": [0.0, 0.0], "dx:A": [0.4, 0.0], "dx:B": [0.7, 0.0], "dx:C": [0.0, 0.5]})
    cone = cone_direction("dx:A", s, vocab, math.pi / 3)
    inside, cos = in_cone("dx:B", cone, s)
    assert inside and cos == pytest.approx(1.0, abs=1e-15)
    inside, cos = in_cone("dx:C", cone, s)
    assert not inside and cos == pytest.approx(0.0, abs=1e-15)
    inside, cos = in_cone("dx:ROOT", cone, s)
    assert not inside and cos == 0.0
    # a degenerate cone admits everything
    assert in_cone("dx:C", cone_direction("dx:ROOT", s, vocab), s)[0]


def test_cosines_against_high_precision(rng):
    mp.dps = 40
    n, d = 1000, 6
    pts = ball_points(rng, n, d, 1.0, 0.95)
    ids = [f"u{i}" for i in range(n)]
    s = _store(dict(zip(ids, pts)))
    direction = rng.standard_normal(d)
    from riskhorizon.retrieval import RiskCone

    cone = RiskCone("a", "r", direction, math.pi / 3, False)
    cos, _ = cone_cosines(ids, cone, s)
    t = log0(pts, 1.0)
    worst = 0.0
    for row, got in zip(t, cos):
        a = [mpf(float(x)) for x in row]
        b = [mpf(float(x)) for x in direction]
        want = mp.fsum(x * y for x, y in zip(a, b)) / (mp.sqrt(mp.fsum(x * x for x in a)) * mp.sqrt(mp.fsum(y * y for y in b)))
        worst = max(worst, abs(float(want) - got))
    assert worst <= 1e-10


def test_geo_score_examples():
    vocab = tree_vocabulary({"dx": (3,)})
    s = _store({"dx:ROOT": [0.0, 0.0], "dx:A": [0.4, 0.0], "dx:B": [0.6, 0.0], "dx:C": [0.0, 0.6]})
    cone = cone_direction("dx:A", s, vocab)
    assert geo_score("dx:B", s.point("dx:B"), cone, s, 0.5) == pytest.approx(0.5, abs=1e-15)
    mu = np.zeros(2)
    b0, c0 = geo_score("dx:B", mu, cone, s, 0.0), geo_score("dx:C", mu, cone, s, 0.0)
    assert b0 == pytest.approx(c0, abs=1e-15)  # equal distance from the origin
    b, c = geo_score("dx:B", mu, cone, s, 0.3), geo_score("dx:C", mu, cone, s, 0.3)
    assert b - c == pytest.approx(0.3, abs=1e-12)


def _horizon_setup(rng):
    g = _graph()
    ids = g.vocab.ids()
    s = _store(dict(zip(ids, ball_points(rng, len(ids), 3, 1.0, 0.8))))
    ce = CentralEvent(exp0(0.5 * log0(s.point("dx:A"), 1.0), 1.0), {"dx:A": 1.0}, "dx:A", ("dx:A",))
    return g, s, ce


def test_horizon_lists_well_formed(rng):
    g, s, ce = _horizon_setup(rng)
    h = build_risk_horizon(ce, g, s, RetrievalConfig(K=5, phi=math.pi))
    for m, lst in h.lists.items():
        assert len(lst) <= 5
        assert len({r.id for r in lst}) == len(lst)
        assert all(g.vocab[r.id].modality == m and g.vocab.is_leaf(r.id) for r in lst)
        assert [r.score for r in lst] == sorted((r.score for r in lst), reverse=True)
    # every modality gets a list, falling back where the pool offers none
    assert set(h.lists) == {"dx", "proc", "med"}
    assert "med" not in h.fallback and "dx" not in h.fallback


def test_full_aperture_is_distance_ranking(rng):
    g, s, ce = _horizon_setup(rng)
    full = build_risk_horizon(ce, g, s, RetrievalConfig(phi=math.pi, eta=0.7))
    plain = build_risk_horizon(ce, g, s, RetrievalConfig(phi=math.pi, eta=0.0))
    assert {m: full.ids(m) for m in full.lists} == {m: plain.ids(m) for m in plain.lists}


def test_cone_monotone_in_phi(rng):
    g, s, ce = _horizon_setup(rng)
    prev = set()
    for phi in np.linspace(0.05, math.pi, 25):
        h = build_risk_horizon(ce, g, s, RetrievalConfig(K=100, phi=float(phi)))
        cur = {r.id for m, lst in h.lists.items() if m not in h.fallback for r in lst}
        assert prev <= cur
        prev = cur


def test_eta_monotone(rng):
    g, s, ce = _horizon_setup(rng)
    ranks = []
    for eta in (0.0, 0.2, 0.5, 1.0, 3.0):
        h = build_risk_horizon(ce, g, s, RetrievalConfig(K=100, eta=eta, cone_mode="bonus"))
        order = h.ids("dx")
        inside = [i for i, r in enumerate(h.lists["dx"]) if r.in_cone]
        ranks.append(sum(inside))
        assert order
    assert all(b <= a for a, b in zip(ranks, ranks[1:]))


def test_fallback_for_isolated_leaf(rng):
    g, s, _ = _horizon_setup(rng)
    ce = CentralEvent(s.point("dx:B.2"), {"dx:B.2": 1.0}, "dx:B.2", ("dx:B.2",))
    h = build_risk_horizon(ce, g, s, RetrievalConfig(K=3))
    assert h.fallback == {"dx", "proc", "med"}
    assert h.ids("dx")[0] == "dx:B.2"
    assert all(len(lst) == 3 or len(lst) == len(g.vocab.leaves(m)) for m, lst in h.lists.items())


def test_deterministic_and_records(rng):
    g, s, ce = _horizon_setup(rng)
    a = build_risk_horizon(ce, g, s)
    b = build_risk_horizon(ce, g, s)
    assert horizon_records("P", 0, a) == horizon_records("P", 0, b)
    rec = horizon_records("P", 0, a)[0]
    assert set(rec) == {"patient_id", "T", "modality", "ranked"}
