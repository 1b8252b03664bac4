"""Command line entry point: file-based, seeded pipeline stages.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 a run that completed only by degrading the scorer while that was forbidden.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .central_event import EmptyVisitError
from .config import ConfigError, PipelineConfig
from .corpus import CohortError, dump_cohort, load_cohort, split_by_patient
from .graph import GraphError, load_graph, load_vocabulary, save_graph, save_vocabulary
from .metrics import EvaluationError, VisitOutcome, evaluate, tune_threshold
from .pipeline import build_graph_for, predict_cohort, restrict_to_graph
from .rerank import make_scorer
from .synthetic import SynthSpecError, generate_synthetic, save_rules
from .trainer import TrainingDivergedError, load_embeddings, save_embeddings, train

log = logging.getLogger("riskhorizon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEGRADED = 0, 1, 2, 3
STAGES = ("gen-synthetic", "split", "build-graph", "train", "predict", "evaluate")


class DegradedRun(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Context:
    def __init__(self, cfg: PipelineConfig, out_dir: Path, args: argparse.Namespace):
        self.cfg = cfg
        self.out = out_dir
        self.args = args
        self.hash = cfg.hash()

    def path(self, name: str) -> Path:
        return self.out / getattr(self.cfg.paths, name)

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing input {p} (run the earlier stage first)")
        return p

    def header(self, stage: str) -> str:
        return f"riskhorizon-{stage} config_hash={self.hash}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    header, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec:
                header = rec["header"]
            else:
                rows.append(rec)
    return header, rows


def stage_gen_synthetic(ctx: Context) -> None:
    cohort, _, rules = generate_synthetic(ctx.cfg.synthetic, ctx.cfg.seed)
    dump_cohort(cohort, ctx.path("cohort"), ctx.header("cohort"))
    save_rules(rules, ctx.path("rules"))
    log.info("wrote %d patients and %d planted rules", len(cohort), len(rules))


def stage_split(ctx: Context) -> None:
    cohort = load_cohort(ctx.need("cohort"))
    parts = dict(zip(("train", "val", "test"), split_by_patient(cohort, ctx.cfg.split)))
    for name, part in parts.items():
        dump_cohort(part, ctx.path(f"{name}_cohort"), ctx.header(f"{name}-cohort"))
    _write_json(ctx.path("split"), {
        "config_hash": ctx.hash,
        **{name: sorted(part.patient_ids) for name, part in parts.items()},
    })


def stage_build_graph(ctx: Context) -> None:
    manifest = json.loads(ctx.need("split").read_text(encoding="utf-8"))
    source = Path(ctx.args.input) if getattr(ctx.args, "input", None) else ctx.need("train_cohort")
    train_cohort = load_cohort(source)
    held_out = set(manifest.get("val", [])) | set(manifest.get("test", []))
    leaked = sorted(set(train_cohort.patient_ids) & held_out)
    if leaked:
        raise GraphError(f"refusing to build the graph: {len(leaked)} val/test patient(s) in {source}, e.g. {leaked[0]!r}")
    f = ctx.cfg.filter
    t0 = time.perf_counter()
    _, graph = build_graph_for(train_cohort, ctx.cfg.graph, f.min_visits, f.min_code_freq, manifest.get("train", []))
    save_vocabulary(graph.vocab, ctx.path("vocab"), ctx.header("vocab"))
    save_graph(graph, ctx.path("graph"), {"graph": ctx.cfg.to_dict()["graph"]}, ctx.hash)
    log.info("graph: %d concepts, %d edges (%d cross) in %.1fs",
             len(graph.vocab), len(graph.edges), len(graph.cross_edges), time.perf_counter() - t0)


def _load_graph(ctx: Context):
    vocab = load_vocabulary(ctx.need("vocab"))
    return load_graph(ctx.need("graph"), vocab)


def stage_train(ctx: Context) -> None:
    graph = _load_graph(ctx)
    f = ctx.cfg.filter
    cohort = restrict_to_graph(load_cohort(ctx.need("train_cohort")), graph, f.min_visits)
    store, report = train(graph, cohort, ctx.cfg.train)
    save_embeddings(store, ctx.path("embeddings"), ctx.hash)
    _write_json(ctx.path("train_report"), {"config_hash": ctx.hash, **report.to_dict()})
    log.info("trained %d epochs, final curvature %.4f", len(report.epochs), store.c)


def _resolve_scorer(ctx: Context):
    rr = ctx.cfg.rerank
    spec = rr.scorer
    if spec.startswith("oracle:"):
        rules = Path(spec.split(":", 1)[1])
        if not rules.is_absolute() and not rules.exists():
            rules = ctx.out / rules
        if not rules.exists():
            raise FileNotFoundError(f"oracle rules file {rules} not found")
        spec = f"oracle:{rules}"
    return make_scorer(dataclasses.replace(rr, scorer=spec))


def stage_predict(ctx: Context) -> None:
    graph = _load_graph(ctx)
    store = load_embeddings(ctx.need("embeddings"))
    scorer = _resolve_scorer(ctx)
    cfg = ctx.cfg
    rows, horizons, degraded = [], [], 0
    for split in ("val", "test"):
        cohort = restrict_to_graph(load_cohort(ctx.need(f"{split}_cohort")), graph, 2)
        outcomes, recs = predict_cohort(cohort, graph, store, cfg.central_event, cfg.retrieval, cfg.rerank,
                                        scorer, cfg.deterministic)
        degraded += sum(o.degraded for o in outcomes)
        rows.extend({"split": split, **o.to_record()} for o in outcomes)
        horizons.extend({"split": split, **r} for r in recs)
    head = {"config_hash": ctx.hash, "scorer": cfg.rerank.scorer, "lam": cfg.rerank.lam, "degraded": degraded}
    for name, body in (("predictions", rows), ("horizons", horizons)):
        with open(ctx.path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"header": head}, sort_keys=True) + "\n")
            for rec in body:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if degraded:
        log.warning("degraded predictions: %d", degraded)
        if getattr(ctx.args, "fail_on_degraded", False):
            raise DegradedRun(f"{degraded} prediction(s) fell back to the geometric ranking")


def stage_evaluate(ctx: Context) -> None:
    vocab = load_vocabulary(ctx.need("vocab"))
    _, rows = _read_jsonl(ctx.need("predictions"))
    by_split: dict[str, list[VisitOutcome]] = {"val": [], "test": []}
    for rec in rows:
        by_split.setdefault(rec.pop("split", "test"), []).append(VisitOutcome.from_record(rec))
    threshold = tune_threshold(by_split["val"]) if by_split["val"] else 0.5
    report = evaluate(by_split["test"], vocab, threshold)
    report.config_hash = ctx.hash
    report.save(ctx.path("report"), ctx.path("report_csv"))
    log.info("report written to %s", ctx.path("report"))


RUNNERS = {
    "gen-synthetic": stage_gen_synthetic,
    "split": stage_split,
    "build-graph": stage_build_graph,
    "train": stage_train,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--deterministic", action="store_true", help="single worker everywhere")
    p.add_argument("--out-dir", default=".", help="directory for every artifact")
    p.add_argument("--scorer", help="none | mock:<seed> | oracle:<rules-file> | http(s)://endpoint")
    p.add_argument("--lam", type=float, help="fusion weight of the external scorer")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="riskhorizon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in (*STAGES, "run-all"):
        p = sub.add_parser(name)
        _common(p)
        if name == "build-graph":
            p.add_argument("--input", help="training cohort file (default: the split's train file)")
        if name in ("predict", "run-all"):
            p.add_argument("--fail-on-degraded", action="store_true",
                           help="exit 3 when any scorer call fell back to the geometric ranking")
    return parser


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.deterministic:
        cfg = dataclasses.replace(cfg, deterministic=True)
    rr = cfg.rerank
    if args.scorer is not None or args.lam is not None:
        try:
            rr = dataclasses.replace(rr, scorer=args.scorer if args.scorer is not None else rr.scorer,
                                     lam=args.lam if args.lam is not None else rr.lam)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = dataclasses.replace(cfg, rerank=rr)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, out, args)
        stages = STAGES if args.command == "run-all" else (args.command,)
        for stage in stages:
            log.info("stage %s", stage)
            RUNNERS[stage](ctx)
    except (ConfigError, SynthSpecError) as exc:
        print(f"riskhorizon: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegradedRun as exc:
        print(f"riskhorizon: {exc}", file=sys.stderr)
        return EXIT_DEGRADED
    except (FileNotFoundError, CohortError, GraphError, EvaluationError, EmptyVisitError,
            TrainingDivergedError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"riskhorizon: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
