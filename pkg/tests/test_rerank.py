import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from riskhorizon.central_event import CentralEvent
from riskhorizon.corpus import Visit
from riskhorizon.rerank import (
    ELLIPSIS,
    MockScorer,
    OracleScorer,
    RemoteScorer,
    RerankConfig,
    ScorerError,
    ScorerRequest,
    build_request,
    combine,
    compress_history,
    fuse,
    grounding_audit,
    make_scorer,
    normalize_scores,
    predict_next_visit,
    validate_scores,
)
from riskhorizon.retrieval import Ranked, RiskHorizon
from riskhorizon.synthetic import PlantedRule, tree_vocabulary

VOCAB = tree_vocabulary({"dx": (2, 2), "med": (2, 3)})


def _horizon():
    med = [Ranked("med:A.1", -0.1, True), Ranked("med:B.3", -0.4, True), Ranked("med:A.2", -0.9, False),
           Ranked("med:B.1", -1.3, False)]
    dx = [Ranked("dx:A.2", -0.2, True), Ranked("dx:B.1", -0.5, False)]
    return RiskHorizon("dx:A", {"dx": dx, "med": med}, 4)


class Fixed:
    def __init__(self, scores):
        self.scores = scores

    def score(self, request):
        return dict(self.scores)


def _request(h=None):
    return build_request(h or _horizon(), VOCAB, "t=0: x")


def test_config_validation():
    for bad in (dict(lam=1.5), dict(lam=-0.1), dict(k=0), dict(timeout=0)):
        with pytest.raises(ValueError):
            RerankConfig(**bad)


def test_normalize_and_combine():
    assert normalize_scores([-3.0, -1.0]) == [0.0, 1.0]
    assert normalize_scores([2.0, 2.0, 2.0]) == [0.5, 0.5, 0.5]
    assert normalize_scores([7.0]) == [0.5]
    assert combine(0.9, 0.2, 0.0) == 0.2
    assert combine(0.9, 0.2, 1.0) == 0.9
    assert combine(1.0, 0.0, 0.5) == 0.5


def _events(n):
    return [CentralEvent(np.zeros(2), {"dx:A.1": 0.75, "dx:A": 0.25}, "dx:A.1", ("dx:A.1",)) for _ in range(n)]


def test_compress_history_lines():
    visits = [Visit.build(t, {"dx": ["dx:A.1"]}) for t in range(3)]
    one = compress_history(visits[:1], _events(1), VOCAB)
    assert one.count("\n") == 0
    assert one.startswith("t=0: ") and "(p=0.75); top codes: dx:A.1, dx:A" in one
    three = compress_history(visits, _events(3), VOCAB).splitlines()
    assert [line.split(":")[0] for line in three] == ["t=0", "t=1", "t=2"]
    # oldest first out
    width = len(three[-1])
    kept = compress_history(visits, _events(3), VOCAB, budget=2 * width + 1).splitlines()
    assert [line.split(":")[0] for line in kept] == ["t=1", "t=2"]
    short = compress_history(visits, _events(3), VOCAB, budget=12)
    assert short.startswith("t=2") and short.endswith(ELLIPSIS) and len(short) == 12


def test_validate_scores():
    resp = validate_scores({"a": 1, "b": 0.5, "zzz": 3.0}, ["a", "b"])
    assert resp.scores == {"a": 1.0, "b": 0.5} and resp.rejected == ["zzz"]
    for raw in ({"a": 1.0}, {"a": 1.0, "b": float("nan")}, {"a": 1.0, "b": "high"}):
        with pytest.raises(ScorerError):
            validate_scores(raw, ["a", "b"])


def test_no_scorer_is_horizon_prefix():
    h = _horizon()
    pred = predict_next_visit(h, None, RerankConfig(k=3))
    assert pred.ids("med") == h.ids("med")[:3] and pred.ids("dx") == h.ids("dx")
    assert not pred.degraded
    lam0 = predict_next_visit(h, MockScorer(1), RerankConfig(k=3, lam=0.0), _request(h))
    assert lam0.lists == pred.lists


def test_planted_event_ranked_first_at_lam_one():
    h = _horizon()
    scores = {cid: 0.0 for _, cid, _ in _request(h).candidates}
    scores["med:B.1"] = 1.0
    pred = predict_next_visit(h, Fixed(scores), RerankConfig(k=4, lam=1.0), _request(h))
    assert pred.ids("med")[0] == "med:B.1"
    # equal fused scores keep the geometric order
    assert pred.ids("med")[1:] == ["med:A.1", "med:B.3", "med:A.2"]


def test_output_restricted_to_horizon():
    h = _horizon()
    raw = MockScorer(5).score(_request(h))
    raw["med:C.9"] = 99.0
    pred = predict_next_visit(h, Fixed(raw), RerankConfig(k=4), _request(h))
    assert set(pred.all_ids()) <= h.members()
    assert pred.rejected == ["med:C.9"]
    g, u = grounding_audit(pred.all_ids(), set(), h.members())
    assert (g, u) == (1.0, 0.0)


def test_raising_one_score_never_lowers_its_rank():
    h = _horizon()
    rng = np.random.default_rng(0)
    for _ in range(200):
        base = {cid: float(rng.random()) for _, cid, _ in _request(h).candidates}
        target = "med:A.2"
        lam = float(rng.uniform(0.05, 1.0))
        before = [c for c, _ in fuse(h, base, lam, 4)["med"]].index(target)
        base[target] += float(rng.uniform(0, 1))
        after = [c for c, _ in fuse(h, base, lam, 4)["med"]].index(target)
        assert after <= before


def test_grounding_audit():
    assert grounding_audit(["a", "b"], {"a"}, {"b"}) == (1.0, 0.0)
    assert grounding_audit(["a", "x"], {"a"}, set()) == (0.5, 0.5)
    assert grounding_audit([], set(), set()) == (1.0, 0.0)


def test_mock_and_oracle_scorers(tmp_path):
    req = _request()
    assert MockScorer(3).score(req) == MockScorer(3).score(req)
    assert MockScorer(3).score(req) != MockScorer(4).score(req)
    assert all(0 <= v < 1 for v in MockScorer(3).score(req).values())
    visits = [Visit.build(0, {"dx": ["dx:B.2"]}), Visit.build(1, {"dx": ["dx:A.1"]})]
    rules = [PlantedRule("dx:A.1", "med:A.1", 1, 0.9), PlantedRule("dx:B.2", "med:B.3", 2, 0.9),
             PlantedRule("dx:B.2", "med:B.1", 1, 0.9)]
    req = ScorerRequest("", req.candidates, visits)
    got = OracleScorer(rules).score(req)
    assert {c for c, v in got.items() if v == 1.0} == {"med:A.1", "med:B.3"}


def test_make_scorer(tmp_path):
    assert make_scorer(RerankConfig()) is None
    assert isinstance(make_scorer(RerankConfig(scorer="mock:2")), MockScorer)
    assert isinstance(make_scorer(RerankConfig(scorer="http://localhost:1/x")), RemoteScorer)
    with pytest.raises(ValueError):
        make_scorer(RerankConfig(scorer="gpt"))


class _Handler(BaseHTTPRequestHandler):
    mode = "ok"
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        if self.mode == "slow":
            time.sleep(1.0)
        if self.mode == "garbage":
            payload = b"<html>oops</html>"
        elif self.mode == "noscores":
            payload = json.dumps({"result": 1}).encode()
        elif self.mode == "partial":
            payload = json.dumps({"scores": {body["candidates"][0]["id"]: 1.0}}).encode()
        else:
            payload = json.dumps({"scores": {c["id"]: float(i) for i, c in enumerate(body["candidates"])}}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        try:
            self.wfile.write(payload)
        except BrokenPipeError:
            pass

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=httpd.serve_forever, daemon=True)
    t.start()
    _Handler.seen = []
    yield f"http://127.0.0.1:{httpd.server_address[1]}/score"
    httpd.shutdown()
    httpd.server_close()


def test_remote_scorer_roundtrip(server, monkeypatch):
    _Handler.mode = "ok"
    monkeypatch.setenv("RISKHORIZON_SCORER_KEY", "s3cret")
    h = _horizon()
    pred = predict_next_visit(h, RemoteScorer(server, 5.0), RerankConfig(k=4, lam=1.0), _request(h))
    assert not pred.degraded
    body, auth = _Handler.seen[0]
    assert auth == "Bearer s3cret"
    assert set(body) == {"history", "candidates"}
    assert body["candidates"][0] == {"modality": "dx", "id": "dx:A.2", "desc": VOCAB["dx:A.2"].description}
    # the server scores by position, so the last candidate in each modality wins
    assert pred.ids("med")[0] == "med:B.1"


@pytest.mark.parametrize("mode", ["slow", "garbage", "noscores", "partial"])
def test_remote_failures_degrade(server, mode):
    _Handler.mode = mode
    h = _horizon()
    scorer = RemoteScorer(server, timeout=0.2)
    with pytest.raises(ScorerError):
        validate_scores(scorer.score(_request(h)), [c for _, c, _ in _request(h).candidates])
    pred = predict_next_visit(h, scorer, RerankConfig(k=4), _request(h))
    assert pred.degraded
    assert pred.lists == predict_next_visit(h, None, RerankConfig(k=4)).lists


def test_unreachable_endpoint_degrades():
    h = _horizon()
    pred = predict_next_visit(h, RemoteScorer("http://127.0.0.1:9/none", 0.5), RerankConfig(), _request(h))
    assert pred.degraded
