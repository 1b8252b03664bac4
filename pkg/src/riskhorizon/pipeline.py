"""Stage glue shared by the command line and the acceptance tests."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .central_event import CEConfig, CentralEvent, central_event
from .corpus import Cohort, filter_cohort, restrict_codes
from .graph import ClinicalGraph, GraphConfig, build_clinical_graph
from .metrics import VisitOutcome
from .rerank import RerankConfig, RemoteScorer, Scorer, build_request, compress_history, predict_next_visit
from .retrieval import RetrievalConfig, RiskHorizon, build_risk_horizon, horizon_records
from .trainer import EmbeddingStore

log = logging.getLogger(__name__)


def filter_train(train: Cohort, min_visits: int, min_code_freq: int) -> Cohort:
    return filter_cohort(train, min_visits, min_code_freq)


def restrict_to_graph(cohort: Cohort, graph: ClinicalGraph, min_visits: int = 2) -> Cohort:
    """Held-out patients keep only codes the training graph knows."""
    return restrict_codes(cohort, set(graph.vocab.ids()), min_visits)


def build_graph_for(train: Cohort, cfg: GraphConfig, min_visits: int, min_code_freq: int,
                    train_ids=None) -> tuple[Cohort, ClinicalGraph]:
    """Filter the training cohort, then build the graph from it alone."""
    kept = filter_train(train, min_visits, min_code_freq)
    return kept, build_clinical_graph(kept, cfg, train_ids=train_ids)


@dataclass
class _Task:
    patient_id: str
    T: int
    horizon: RiskHorizon
    outcome: VisitOutcome
    request: object


def predict_cohort(cohort: Cohort, graph: ClinicalGraph, store: EmbeddingStore, ce_cfg: CEConfig,
                   ret_cfg: RetrievalConfig, rr_cfg: RerankConfig, scorer: Scorer | None = None,
                   deterministic: bool = False) -> tuple[list[VisitOutcome], list[dict]]:
    """Predict visit ``T + 1`` from visits ``0..T`` for every prefix of every patient."""
    vocab = graph.vocab
    tasks: list[_Task] = []
    for tr in cohort:
        events: list[CentralEvent] = [central_event(v, store, vocab, ce_cfg) for v in tr.visits]
        for T in range(len(tr.visits) - 1):
            horizon = build_risk_horizon(events[T], graph, store, ret_cfg)
            nxt = tr.visits[T + 1]
            request = None
            if scorer is not None:
                history = compress_history(tr.visits[: T + 1], events[: T + 1], vocab, rr_cfg.history_budget)
                request = build_request(horizon, vocab, history, tr.visits[: T + 1])
            outcome = VisitOutcome(
                tr.patient_id, T, {},
                {m: set(nxt.codes(m)) for m in vocab.modalities()},
                nxt.primary,
                {c for v in tr.visits[: T + 1] for c in v.all_codes()},
                horizon.members(),
            )
            tasks.append(_Task(tr.patient_id, T, horizon, outcome, request))

    def run(task: _Task):
        return predict_next_visit(task.horizon, scorer, rr_cfg, task.request)

    workers = 1 if deterministic or not isinstance(scorer, RemoteScorer) else rr_cfg.max_in_flight
    if workers == 1:
        preds = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(run, tasks))

    outcomes, records = [], []
    for task, pred in zip(tasks, preds):
        task.outcome.predictions = pred.lists
        task.outcome.degraded = pred.degraded
        task.outcome.rejected = len(pred.rejected)
        outcomes.append(task.outcome)
        records.extend(horizon_records(task.patient_id, task.T, task.horizon))
    n_deg = sum(o.degraded for o in outcomes)
    if n_deg:
        log.warning("%d of %d predictions fell back to the geometric ranking", n_deg, len(outcomes))
    return outcomes, records
