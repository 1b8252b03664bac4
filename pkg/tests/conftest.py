import numpy as np
import pytest

from riskhorizon import _kernels
from riskhorizon.corpus import Cohort, Trajectory, Visit
from riskhorizon.synthetic import SynthSpec, generate_synthetic, tree_vocabulary


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ball_points(rng, n, d, c=1.0, rmax=0.9):
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (rng.random(n) ** (1.0 / d) * rmax / np.sqrt(c))[:, None]


def make_cohort(rows):
    """``rows`` maps patient id to a list of per-visit code lists."""
    trajectories = []
    for pid, visits in rows.items():
        built = []
        for t, codes in enumerate(visits):
            by_mod = {}
            for c in codes:
                by_mod.setdefault(c.split(":")[0], []).append(c)
            built.append(Visit.build(t, by_mod))
        trajectories.append(Trajectory(pid, tuple(built)))
    return Cohort(tuple(trajectories))


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSpec(n_patients=300, branching=(3, 3), dx_branching=(3, 5), dx_per_visit=(2, 3), n_rules=4, lag2_rules=(3,))
    return generate_synthetic(spec, seed=7)


@pytest.fixture(scope="session")
def tiny_vocab():
    return tree_vocabulary({"dx": (2, 2, 2), "proc": (2, 2), "med": (2, 2), "lab": (2, 2)})


@pytest.fixture(scope="session")
def small_trained(small_synth):
    """Graph and embeddings trained on ``small_synth``; shared by the downstream module tests."""
    from riskhorizon.graph import GraphConfig, build_clinical_graph
    from riskhorizon.trainer import TrainConfig, train

    cohort = small_synth[0]
    graph = build_clinical_graph(cohort, GraphConfig(kappa=20, n_boot=5))
    store, report = train(graph, cohort, TrainConfig(d=16, epochs=40, seed=3))
    return graph, store, report
