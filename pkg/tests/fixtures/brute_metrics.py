"""Second implementation of the evaluation metrics for the 20-visit fixture.

Written without importing the package. Regenerate the fixture and expected
values with ``python tests/fixtures/brute_metrics.py``.
"""

import json
import math
import random
from collections import deque
from fractions import Fraction
from pathlib import Path

HERE = Path(__file__).parent
FIXTURE = HERE / "metrics_20_visits.json"
EXPECTED = HERE / "metrics_20_visits_expected.json"


def make_fixture(seed=20):
    rnd = random.Random(seed)
    tree = {}  # child -> parent, per modality a 3-level tree
    for m, (b1, b2) in {"dx": (3, 3), "med": (2, 4)}.items():
        tree[f"{m}:ROOT"] = None
        for i in range(b1):
            a = f"{m}:{'ABC'[i]}"
            tree[a] = f"{m}:ROOT"
            for j in range(b2):
                tree[f"{a}.{j + 1}"] = a
    leaves = {m: sorted(c for c in tree if c.startswith(m) and c.count(".") == 1) for m in ("dx", "med")}
    visits = []
    for v in range(20):
        pid, T = f"P{v // 4:02d}", v % 4
        preds, truth = {}, {}
        for m in ("dx", "med"):
            ranked = rnd.sample(leaves[m], 6)
            scores = sorted((round(rnd.random(), 3) for _ in ranked), reverse=True)
            preds[m] = [[c, s] for c, s in zip(ranked, scores)]
            truth[m] = sorted(rnd.sample(leaves[m], rnd.choice([0, 1, 2, 3])))
        primary = rnd.choice(leaves["dx"])
        history = sorted(rnd.sample(leaves["dx"] + leaves["med"], 3))
        horizon = sorted({c for m in preds for c, _ in preds[m][:4]})
        visits.append({"patient_id": pid, "T": T, "predictions": preds, "truth": truth, "primary": primary,
                       "history": history, "horizon": horizon, "degraded": False, "rejected": 0})
    return {"tree": tree, "threshold": 0.5, "visits": visits}


def depth(tree, c):
    n = 0
    while tree[c] is not None:
        c, n = tree[c], n + 1
    return n


def bfs(tree, a, b):
    adj = {c: set() for c in tree}
    for c, p in tree.items():
        if p is not None:
            adj[c].add(p)
            adj[p].add(c)
    seen, q = {a: 0}, deque([a])
    while q:
        x = q.popleft()
        if x == b:
            return seen[x]
        for y in adj[x]:
            if y not in seen:
                seen[y] = seen[x] + 1
                q.append(y)
    raise ValueError("disconnected")


def level_ancestor(tree, c, L):
    chain = [c]
    while tree[chain[-1]] is not None:
        chain.append(tree[chain[-1]])
    chain.reverse()  # root first, so index == level
    return chain[L] if L < len(chain) else None


def mean(xs):
    # correctly rounded sums so that summation order cannot matter
    return math.fsum(xs) / len(xs) if xs else None


def expected(fx):
    tree, th, visits = fx["tree"], fx["threshold"], fx["visits"]
    out = {"per_modality": {}}
    for m in ("dx", "med"):
        r5, r10, nd = [], [], []
        tp = fp = fn = 0
        for v in visits:
            ranked = [c for c, _ in v["predictions"][m]]
            truth = set(v["truth"][m])
            chosen = {c for c, s in v["predictions"][m] if s >= th}
            tp += len(chosen & truth)
            fp += len(chosen - truth)
            fn += len(truth - chosen)
            if not truth:
                continue
            r5.append(sum(1 for c in ranked[:5] if c in truth) / len(truth))
            r10.append(sum(1 for c in ranked[:10] if c in truth) / len(truth))
            dcg = math.fsum(1 / math.log2(i + 2) for i, c in enumerate(ranked[:10]) if c in truth)
            idcg = math.fsum(1 / math.log2(i + 2) for i in range(min(10, len(truth))))
            nd.append(dcg / idcg)
        # exact rationals, rounded once at the end
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1 = float(2 * prec * rec / (prec + rec)) if prec + rec else 0.0
        out["per_modality"][m] = {"recall@5": mean(r5), "recall@10": mean(r10), "ndcg@10": mean(nd),
                                  "micro_f1": f1, "n": len(r5)}
    top1, top5, rr, dall, derr, l1, l2 = [], [], [], [], [], [], []
    for v in visits:
        ranked = [c for c, _ in v["predictions"]["dx"]]
        p = v["primary"]
        top1.append(1.0 if ranked[:1] == [p] else 0.0)
        top5.append(1.0 if p in ranked[:5] else 0.0)
        rr.append(1.0 / (ranked.index(p) + 1) if p in ranked else 0.0)
        d = bfs(tree, ranked[0], p)
        dall.append(float(d))
        if d:
            derr.append(float(d))
        for L, acc in ((1, l1), (2, l2)):
            acc.append(float(level_ancestor(tree, ranked[0], L) == level_ancestor(tree, p, L)))
    out["primary"] = {"top1": mean(top1), "top5": mean(top5), "mrr": mean(rr)}
    out["hierarchy"] = {"tree_distance_all": mean(dall), "tree_distance_errors_only": mean(derr),
                        "L1": mean(l1), "L2": mean(l2)}
    g = []
    for v in visits:
        preds = [c for m in v["predictions"] for c, _ in v["predictions"][m]]
        support = set(v["history"]) | set(v["horizon"])
        g.append(sum(1 for c in preds if c in support) / len(preds))
    out["grounding"] = {"grounded": mean(g), "unsupported": mean([1 - x for x in g])}
    return out


if __name__ == "__main__":
    fx = make_fixture()
    FIXTURE.write_text(json.dumps(fx, indent=1, sort_keys=True) + "\n")
    EXPECTED.write_text(json.dumps(expected(fx), indent=1, sort_keys=True) + "\n")
