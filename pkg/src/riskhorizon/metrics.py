"""Next-visit evaluation: ranking, primary-diagnosis, hierarchy and grounding metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .graph import Vocabulary

ANCESTOR_LEVELS = (1, 2)


class EvaluationError(ValueError):
    pass


def recall_at_k(predicted: Sequence[str], truth: set[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not truth:
        raise ValueError("recall needs a nonempty truth set")
    return len(set(predicted[:k]) & truth) / len(truth)


def ndcg_at_k(predicted: Sequence[str], truth: set[str], k: int) -> float:
    """Binary-relevance nDCG; the ideal list holds ``min(|truth|, k)`` hits."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not truth:
        raise ValueError("nDCG needs a nonempty truth set")
    dcg = math.fsum(1.0 / math.log2(r + 2) for r, p in enumerate(predicted[:k]) if p in truth)
    ideal = math.fsum(1.0 / math.log2(r + 2) for r in range(min(len(truth), k)))
    return dcg / ideal


def reciprocal_rank(predicted: Sequence[str], label: str) -> float:
    for r, p in enumerate(predicted, start=1):
        if p == label:
            return 1.0 / r
    return 0.0


def top_k_accuracy(predicted: Sequence[str], label: str, k: int) -> float:
    return float(label in predicted[:k])


def tree_distance(a: str, b: str, vocab: Vocabulary) -> int:
    """Path length through the lowest common ancestor."""
    ca, cb = vocab[a], vocab[b]
    if ca.modality != cb.modality:
        raise ValueError(f"{a!r} and {b!r} lie in different trees")
    up_a = [a] + vocab.ancestors(a)
    up_b = set([b] + vocab.ancestors(b))
    lca = next(x for x in up_a if x in up_b)
    return ca.level + cb.level - 2 * vocab[lca].level


def ancestor_match(a: str, b: str, level: int, vocab: Vocabulary) -> int | None:
    """1 if the level-``level`` ancestors coincide; None when either node is shallower."""
    xa, xb = vocab.ancestor_at(a, level), vocab.ancestor_at(b, level)
    if xa is None or xb is None:
        return None
    return int(xa == xb)


def f1_counts(predicted: set[str], truth: set[str]) -> tuple[int, int, int]:
    tp = len(predicted & truth)
    return tp, len(predicted) - tp, len(truth) - tp


def micro_f1(pairs: Iterable[tuple[set[str], set[str]]]) -> float:
    """Micro F1 over ``(predicted, truth)`` set pairs."""
    tp = fp = fn = 0
    for pred, truth in pairs:
        a, b, c = f1_counts(pred, truth)
        tp, fp, fn = tp + a, fp + b, fn + c
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class VisitOutcome:
    """Predictions for visit ``T + 1`` of one patient, made from visits ``0..T``."""

    patient_id: str
    T: int
    predictions: dict[str, list[tuple[str, float]]]
    truth: dict[str, set[str]]
    primary: str | None = None
    history: set[str] = field(default_factory=set)
    horizon: set[str] = field(default_factory=set)
    degraded: bool = False
    rejected: int = 0

    def ranked(self, modality: str) -> list[str]:
        return [cid for cid, _ in self.predictions.get(modality, [])]

    def above(self, modality: str, threshold: float) -> set[str]:
        return {cid for cid, s in self.predictions.get(modality, []) if s >= threshold}

    def to_record(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "T": self.T,
            "predictions": {m: [[c, s] for c, s in lst] for m, lst in self.predictions.items()},
            "truth": {m: sorted(v) for m, v in self.truth.items()},
            "primary": self.primary,
            "history": sorted(self.history),
            "horizon": sorted(self.horizon),
            "degraded": self.degraded,
            "rejected": self.rejected,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "VisitOutcome":
        return cls(
            rec["patient_id"], int(rec["T"]),
            {m: [(c, float(s)) for c, s in lst] for m, lst in rec["predictions"].items()},
            {m: set(v) for m, v in rec["truth"].items()},
            rec.get("primary"), set(rec.get("history", ())), set(rec.get("horizon", ())),
            bool(rec.get("degraded", False)), int(rec.get("rejected", 0)),
        )


def _modalities(outcomes: Sequence[VisitOutcome]) -> list[str]:
    from .corpus import MODALITIES

    seen = {m for o in outcomes for m in (*o.truth, *o.predictions)}
    return [m for m in MODALITIES if m in seen] + sorted(seen - set(MODALITIES))


def _f1_at(outcomes: Sequence[VisitOutcome], modalities: Sequence[str], threshold: float) -> float:
    return micro_f1((o.above(m, threshold), o.truth.get(m, set())) for o in outcomes for m in modalities)


def tune_threshold(outcomes: Sequence[VisitOutcome]) -> float:
    """Fused-score threshold maximizing pooled micro F1; ties go to the lowest threshold."""
    if not outcomes:
        raise EvaluationError("no validation outcomes to tune a threshold on")
    mods = _modalities(outcomes)
    n_truth = sum(len(o.truth.get(m, ())) for o in outcomes for m in mods)
    decisions = sorted(
        ((s, cid in o.truth.get(m, ())) for o in outcomes for m in mods for cid, s in o.predictions.get(m, [])),
        key=lambda x: -x[0],
    )
    if not decisions:
        return 0.0
    # sweep thresholds from high to low; each distinct score admits a block of decisions
    best, best_f1, tp, n_pred, i = math.inf, -1.0, 0, 0, 0
    while i < len(decisions):
        th = decisions[i][0]
        while i < len(decisions) and decisions[i][0] == th:
            tp += decisions[i][1]
            n_pred += 1
            i += 1
        denom = n_pred + n_truth
        f1 = 2 * tp / denom if denom else 0.0
        if f1 >= best_f1:
            best, best_f1 = th, f1
    return best


def _mean(xs: list[float]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


@dataclass
class EvalReport:
    per_modality: dict[str, dict]
    primary: dict
    hierarchy: dict
    grounding: dict
    counts: dict
    threshold: float
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "counts": self.counts,
            "grounding": self.grounding,
            "hierarchy": self.hierarchy,
            "per_modality": self.per_modality,
            "primary": self.primary,
            "threshold": self.threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def flat(self) -> list[tuple[str, object]]:
        rows: list[tuple[str, object]] = []

        def walk(prefix: str, node):
            if isinstance(node, dict):
                for k in sorted(node):
                    walk(f"{prefix}.{k}" if prefix else str(k), node[k])
            else:
                rows.append((prefix, node))

        walk("", self.to_dict())
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, val in self.flat():
            w.writerow([key, "" if val is None else repr(val) if isinstance(val, float) else val])
        return buf.getvalue()

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json(), encoding="utf-8")
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv(), encoding="utf-8")


def evaluate(outcomes: Sequence[VisitOutcome], vocab: Vocabulary, threshold: float = 0.5,
             ks: tuple[int, int] = (5, 10)) -> EvalReport:
    """Macro-average per-visit metrics. Visits with empty truth in a modality
    are left out of that modality's averages; micro F1 pools every decision."""
    if not outcomes:
        raise EvaluationError("zero evaluable visits")
    outcomes = sorted(outcomes, key=lambda o: (o.patient_id, o.T))
    k_lo, k_hi = ks
    per_modality = {}
    for m in _modalities(outcomes):
        rec_lo, rec_hi, nd = [], [], []
        for o in outcomes:
            truth = o.truth.get(m, set())
            if not truth:
                continue
            ranked = o.ranked(m)
            rec_lo.append(recall_at_k(ranked, truth, k_lo))
            rec_hi.append(recall_at_k(ranked, truth, k_hi))
            nd.append(ndcg_at_k(ranked, truth, k_hi))
        per_modality[m] = {
            f"recall@{k_lo}": _mean(rec_lo),
            f"recall@{k_hi}": _mean(rec_hi),
            f"ndcg@{k_hi}": _mean(nd),
            "micro_f1": _f1_at(outcomes, [m], threshold),
            "n": len(rec_lo),
        }

    top1, top5, rr, dist_all, dist_err = [], [], [], [], []
    anc: dict[int, list[int]] = {L: [] for L in ANCESTOR_LEVELS}
    anc_skipped = {L: 0 for L in ANCESTOR_LEVELS}
    no_primary = 0
    for o in outcomes:
        if o.primary is None or o.primary not in vocab:
            no_primary += 1
            continue
        ranked = o.ranked(vocab[o.primary].modality)
        top1.append(top_k_accuracy(ranked, o.primary, 1))
        top5.append(top_k_accuracy(ranked, o.primary, 5))
        rr.append(reciprocal_rank(ranked, o.primary))
        if not ranked:
            continue
        d = tree_distance(ranked[0], o.primary, vocab)
        dist_all.append(float(d))
        if d > 0:
            dist_err.append(float(d))
        for L in ANCESTOR_LEVELS:
            hit = ancestor_match(ranked[0], o.primary, L, vocab)
            if hit is None:
                anc_skipped[L] += 1
            else:
                anc[L].append(hit)

    grounded, unsupported = [], []
    from .rerank import grounding_audit

    for o in outcomes:
        preds = [c for lst in o.predictions.values() for c, _ in lst]
        g, u = grounding_audit(preds, o.history, o.horizon)
        grounded.append(g)
        unsupported.append(u)

    return EvalReport(
        per_modality=per_modality,
        primary={"top1": _mean(top1), "top5": _mean(top5), "mrr": _mean(rr), "n": len(rr)},
        hierarchy={
            "tree_distance_all": _mean(dist_all),
            "tree_distance_errors_only": _mean(dist_err),
            "ancestor_match": {f"L{L}": _mean([float(x) for x in anc[L]]) for L in ANCESTOR_LEVELS},
            "ancestor_skipped": {f"L{L}": anc_skipped[L] for L in ANCESTOR_LEVELS},
            "n": len(dist_all),
        },
        grounding={"grounded": _mean(grounded), "unsupported": _mean(unsupported)},
        counts={
            "visits": len(outcomes),
            "patients": len({o.patient_id for o in outcomes}),
            "without_primary": no_primary,
            "degraded": sum(o.degraded for o in outcomes),
            "rejected_ids": sum(o.rejected for o in outcomes),
        },
        threshold=threshold,
    )
