"""Operator entry point.

Subcommands walk the pipeline in order (ingest, evaluate, score, stratify,
taxonomy, deliberate, report), `pipeline` runs them all, and `serve` exposes
the annotation API for human resolution. Exit codes: 0 success, 2 when the
taxonomy loop ends non-convergent, 1 on any error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import pipeline
from .config import ConfigError, RunConfig
from .journal import JournalError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cti-triage", description=__doc__)
    parser.add_argument("--config", help="path to the run config (JSON)")
    parser.add_argument("--run-id", help="run identifier (defaults to the content hash)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--runs-dir", help="override the runs directory")
    parser.add_argument("--delta", type=float, help="quantile width (1/delta strata)")
    parser.add_argument("--rho", type=float, help="taxonomy-loop coverage threshold")
    parser.add_argument("--budget", type=float, help="manual-inspection budget fraction")
    parser.add_argument(
        "--agents", help="comma-separated deliberation agent ids to keep"
    )

    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("ingest", "standardize the corpus into threat instances"),
        ("evaluate", "run the evaluator agent over every instance"),
        ("score", "parse outputs and score them against references"),
        ("stratify", "bin scores, anchor verdicts, assign Failed/Correct/Boundary"),
        ("taxonomy", "run the refinement loop to the stabilized taxonomy"),
        ("deliberate", "two-round multi-agent labeling with human fallback"),
        ("report", "emit the per-task score table and failure-mode ratios"),
        ("pipeline", "run every stage in order"),
    ):
        sub.add_parser(name, help=doc)
    serve = sub.add_parser("serve", help="serve the annotation API")
    serve.add_argument("--serve-addr", default=None, help="host:port to bind")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    config.apply_overrides(
        delta=args.delta,
        budget=args.budget,
        rho=args.rho,
        epsilon_dist=None,
        seed=args.seed,
        runs_dir=args.runs_dir,
        agents=args.agents,
    )
    return config


def resolve_run_id(config: RunConfig, flag: str | None) -> str:
    if flag:
        return flag
    synth = config.corpus.get("synthetic")
    if synth is not None:
        from .ingestion import instance_to_record
        from .synthetic import make_corpus

        instances, _ = make_corpus(n=synth.get("n", 200), seed=config.seed)
        blob = "\n".join(
            json.dumps(instance_to_record(i), sort_keys=True) for i in instances
        ).encode("utf-8")
        corpus_sha = hashlib.sha256(blob).hexdigest()
    else:
        with open(config.corpus["path"], "rb") as handle:
            corpus_sha = hashlib.sha256(handle.read()).hexdigest()
    return pipeline.compute_run_id(config, corpus_sha)


def _serve(config: RunConfig, run_id: str, addr: str | None) -> int:
    import uvicorn

    from .annotation import InvalidResolution, TaskKind
    from .pipeline import RunContext, rebuild_queue, replay_run, run_status
    from .service import create_app

    ctx = RunContext.open(config, run_id)
    queue = rebuild_queue(ctx)

    def taxonomy_provider():
        replayed = replay_run(ctx)
        if replayed.taxonomy is not None:
            return replayed.taxonomy
        from .core import seed_catalog

        return seed_catalog()

    def validate_mode_resolution(task, resolution):
        if "name" in resolution:
            return
        if taxonomy_provider().get(resolution["mode_id"]) is None:
            raise InvalidResolution(
                f"mode {resolution['mode_id']} is not in the current taxonomy"
            )

    queue.on_resolution(TaskKind.UNCERTAIN_RESOLUTION, validate_mode_resolution)
    queue.on_resolution(TaskKind.TAXONOMY_SEED, validate_mode_resolution)
    queue.on_resolution(TaskKind.OTHER_REFINEMENT, validate_mode_resolution)

    def instance_provider(instance_id):
        return ctx.instance_map().get(instance_id)

    def status_provider(query_run_id):
        if query_run_id != run_id:
            return None
        return run_status(ctx)

    token_env = config.service.get("token_env", "CTI_TRIAGE_TOKEN")
    token = os.environ.get(token_env)
    if not token:
        print(f"error: bearer token env {token_env} is unset", file=sys.stderr)
        return 1
    app = create_app(
        queue,
        token=token,
        taxonomy_provider=taxonomy_provider,
        instance_provider=instance_provider,
        run_status_provider=status_provider,
    )
    bind = addr or config.service.get("addr", "127.0.0.1:8787")
    host, _, port = bind.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8787))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "ingest":
            ctx = pipeline.cmd_ingest(config, run_id_override=args.run_id)
            print(f"ingested run {ctx.run_id} -> {ctx.paths.run_dir}")
            return 0

        if args.command == "pipeline":
            ctx = pipeline.cmd_ingest(config, run_id_override=args.run_id)
            pipeline.cmd_evaluate(ctx)
            pipeline.cmd_score(ctx)
            pipeline.cmd_stratify(ctx)
            result = pipeline.cmd_taxonomy(ctx)
            pipeline.cmd_deliberate(ctx)
            text, _ = pipeline.cmd_report(ctx)
            print(text)
            if not result.converged:
                print("taxonomy loop did not converge", file=sys.stderr)
                return 2
            return 0

        run_id = resolve_run_id(config, args.run_id)
        if args.command == "serve":
            return _serve(config, run_id, args.serve_addr)

        ctx = pipeline.RunContext.open(config, run_id)
        if args.command == "evaluate":
            pipeline.cmd_evaluate(ctx)
            print(f"evaluated run {run_id}")
        elif args.command == "score":
            pipeline.cmd_score(ctx)
            print(f"scored run {run_id}")
        elif args.command == "stratify":
            state = pipeline.cmd_stratify(ctx)
            print(
                f"stratified run {run_id}: {len(state.strata)} strata, "
                f"{state.inspected_count} manual inspections"
            )
        elif args.command == "taxonomy":
            result = pipeline.cmd_taxonomy(ctx)
            print(
                f"taxonomy run {run_id}: version {result.taxonomy.version}, "
                f"{result.iterations} iterations, coverage {result.state.coverage:.3f}"
            )
            if not result.converged:
                print("taxonomy loop did not converge", file=sys.stderr)
                return 2
        elif args.command == "deliberate":
            records = pipeline.cmd_deliberate(ctx)
            uncertain = sum(1 for r in records.values() if r.uncertain)
            print(f"deliberated run {run_id}: {len(records)} instances, {uncertain} uncertain")
        elif args.command == "report":
            text, _ = pipeline.cmd_report(ctx)
            print(text)
        return 0
    except (
        pipeline.PipelineError,
        ConfigError,
        JournalError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
