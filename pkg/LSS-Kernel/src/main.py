"""
main.py - ``lss`` command-line entry point.

Subcommands:
1. bench    - three-variant retrieval bench with per-role token accounting
2. store    - put / get / log / rollback / maintain artifacts
3. run      - one worker cycle replayed from a transcript
4. evolve   - replay a task suite, optionally A/B a patch and gate its merge
5. trace    - print the supply chain behind a binding event

Exit codes: 0 success, 2 malformed input, 3 invariant violation.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from agent_runtime import AgentRuntime, EndCriteria, RoleBundle, run_lens_flow
from artifact_store import ArtifactStore, Kind, run_maintenance
from bench import (
    VariantConfig,
    compute_metrics,
    emit_report,
    format_summary,
    generate_synthetic_corpus,
    load_corpus,
    parse_variant,
    run_bench,
)
from binding_engine import trace_chain
from config import load_settings
from constants import EXIT_INVARIANT, EXIT_MALFORMED, EXIT_OK
from evolution_engine import Evolver, TaskSuite, write_fitness_tsv
from reasoner import ScriptedReasoner, Transcript, build_reasoner
from utils import InputError, InvariantError, LssError, configure_logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lss",
        description="LSS kernel: artifacts, views, bindings, agents and evolution",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
            Examples:
            lss bench --synthetic 100 --candidates 50 --variant all --out results/bench.csv
            lss store put --kind skill --name parse-csv --file skill.md
            lss run --transcript fixtures/run.json --intent "summarize the csv skill"
            lss evolve --suite fixtures/suite.json --patch skill-0001 --body new.md --hypothesis "shorter steps"
            lss trace 42
        """
    )
    parser.add_argument("--home", default=None, help="Store directory (default: LSS_HOME or ./lss_home)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="Run the retrieval bench")
    source = bench.add_mutually_exclusive_group(required=True)
    source.add_argument("--corpus", type=Path, help="JSONL corpus of queries")
    source.add_argument("--synthetic", type=int, metavar="N", help="Generate N synthetic queries instead")
    bench.add_argument("--candidates", type=int, default=50, help="Candidates per synthetic query (default: 50)")
    bench.add_argument(
        "--variant",
        default="all",
        choices=["worker_only", "lens", "lens_index", "all"],
        help="Variant to run (default: all)",
    )
    bench.add_argument("--k", type=int, default=None, help="Top-k selected per query (default: 5)")
    bench.add_argument("--brief-limit", type=int, default=None, help="Chars of each candidate the lens sees (default: 280)")
    bench.add_argument("--read-limit", type=int, default=None, help="Chars of each selected candidate the worker reads (default: 700)")
    bench.add_argument("--local-context-tokens", type=int, default=None, help="Worker local context window (default: 512)")
    bench.add_argument("--reasoner", default="lexical", help="lexical | bm25 | scripted:<path> | remote:<url> | chat:<model>")
    bench.add_argument("--seed", type=int, default=0, help="Seed for synthetic corpora")
    bench.add_argument("--out", type=Path, default=Path("results/bench.csv"), help="Report path")
    bench.add_argument("--format", default="csv", choices=["csv", "json", "both"], help="Report format")
    bench.add_argument("--workers", type=int, default=1, help="Parallel query workers")

    store = sub.add_parser("store", help="Artifact store operations")
    store_sub = store.add_subparsers(dest="store_command", required=True)
    put = store_sub.add_parser("put", help="Create an artifact")
    put.add_argument("--kind", required=True, choices=[k.value for k in Kind])
    put.add_argument("--name", default=None)
    put.add_argument("--id", dest="artifact_id", default=None)
    body = put.add_mutually_exclusive_group(required=True)
    body.add_argument("--file", type=Path)
    body.add_argument("--content")
    get = store_sub.add_parser("get", help="Print an artifact")
    get.add_argument("artifact_id")
    get.add_argument("--version", type=int, default=None)
    log = store_sub.add_parser("log", help="Print an artifact's palimpsest")
    log.add_argument("artifact_id")
    rollback = store_sub.add_parser("rollback", help="Restore an earlier version as a new one")
    rollback.add_argument("artifact_id")
    rollback.add_argument("version", type=int)
    maintain = store_sub.add_parser("maintain", help="Scan for duplicates, stale items and conflicts")
    maintain.add_argument("--window", type=int, default=None, help="Staleness window in steps")
    maintain.add_argument("--apply", action="store_true", help="Move retire candidates to the cold tier")

    run = sub.add_parser("run", help="Run one worker cycle")
    run.add_argument("--transcript", type=Path, required=True, help="Scripted reasoner transcript (JSON)")
    run.add_argument("--bundle", type=Path, default=None, help="Role bundle file")
    run.add_argument("--intent", default="continue the task", help="Initial intent")
    run.add_argument("--budget", type=int, default=None, help="View token budget")
    run.add_argument("--max-steps", type=int, default=10)
    run.add_argument("--lens", action="store_true", help="Select the view through the lens flow first")

    evolve = sub.add_parser("evolve", help="Replay a task suite and gate patches")
    evolve.add_argument("--suite", type=Path, required=True, help="Task suite (JSON)")
    evolve.add_argument("--patch", default=None, metavar="ARTIFACT_ID", help="Artifact to patch")
    evolve.add_argument("--body", type=Path, default=None, help="New body for the patched artifact")
    evolve.add_argument("--hypothesis", default=None, help="Why the patch should help")
    evolve.add_argument("--fitness-out", type=Path, default=None, help="Write fitness reports as TSV")

    trace = sub.add_parser("trace", help="Print the supply chain of a binding event")
    trace.add_argument("event_id", type=int)
    return parser


# --------------------------------- #
# subcommands
# --------------------------------- #

def _pick(value, default):
    return default if value is None else value


def cmd_bench(args, settings) -> None:
    print("--- STEP 1: Loading corpus... ---")
    if args.synthetic is not None:
        queries = generate_synthetic_corpus(args.synthetic, args.candidates, seed=args.seed)
        print(f"[INFO] Generated {len(queries)} synthetic queries x {args.candidates} candidates (seed {args.seed})")
    else:
        queries = load_corpus(args.corpus)
        print(f"[INFO] Loaded {len(queries)} queries from {args.corpus}")

    names = ["worker_only", "lens", "lens_index"] if args.variant == "all" else [args.variant]
    configs = [
        VariantConfig(
            variant=parse_variant(name),
            k=_pick(args.k, settings.top_k),
            brief_limit=_pick(args.brief_limit, settings.brief_limit),
            read_limit=_pick(args.read_limit, settings.read_limit),
            local_context_tokens=_pick(args.local_context_tokens, settings.local_context_tokens),
        )
        for name in names
    ]
    reasoner = build_reasoner(args.reasoner, settings)

    print(f"\n--- STEP 2: Running {', '.join(c.variant.value for c in configs)} ---")
    reports = run_bench(queries, configs, reasoner=reasoner, workers=args.workers, progress=True)

    print("\n--- STEP 3: Writing report... ---")
    if not reports:
        print("[WARNING] Corpus is empty; nothing to report")
        return
    summary = compute_metrics(reports)
    for path in emit_report(summary, args.out, fmt=args.format):
        print(f"✓ Results saved to: {path}")
    print(format_summary(summary))


def cmd_store(args, settings) -> None:
    store = ArtifactStore.open(settings)

    if args.store_command == "put":
        content = args.file.read_text(encoding="utf-8") if args.file else args.content
        front = {"name": args.name} if args.name else None
        artifact = store.put_artifact(Kind(args.kind), content, front_matter=front, artifact_id=args.artifact_id, author="cli")
        print(f"[SUCCESS] Created {artifact.id} ({artifact.metadata_line()})")

    elif args.store_command == "get":
        if args.version is None:
            sys.stdout.write(store.get_artifact(args.artifact_id).to_markdown())
        else:
            sys.stdout.write(store.read_version(args.artifact_id, args.version))

    elif args.store_command == "log":
        for entry in store.history(args.artifact_id):
            print(f"v{entry.version}\tstep {entry.step}\t{entry.author}\t{entry.rationale}")

    elif args.store_command == "rollback":
        artifact = store.rollback_artifact(args.artifact_id, args.version, author="cli")
        print(f"[SUCCESS] {artifact.id} restored from v{args.version} as v{artifact.version}")

    elif args.store_command == "maintain":
        report = run_maintenance(store, staleness_window=args.window, apply_retirement=args.apply)
        if report.is_empty():
            print("[INFO] Nothing to report")
        for group in report.duplicate_groups:
            print(f"duplicate\t{' '.join(group)}")
        for kind, name, ids in report.conflicts:
            print(f"conflict\t{kind}\t{name}\t{' '.join(ids)}")
        for artifact_id in report.stale:
            print(f"stale\t{artifact_id}")
        for artifact_id in report.retire_candidates:
            print(f"retire\t{artifact_id}")
        for warning in report.warnings:
            print(f"[WARNING] {warning}")


def cmd_run(args, settings) -> None:
    store = ArtifactStore.open(settings)
    runtime = AgentRuntime(store, settings=settings)
    reasoner = ScriptedReasoner(Transcript.load(args.transcript))
    bundle = RoleBundle.load(args.bundle)
    budget = args.budget or settings.local_context_tokens

    worker = runtime.create_instance(
        instance_id=bundle.agent_for("worker"),
        end_criteria=EndCriteria.max_steps(args.max_steps),
    )
    selection: Optional[List[str]] = None
    if args.lens:
        flow = run_lens_flow(runtime, worker, args.intent, settings.top_k, reasoner.fresh(), budget, bundle)
        selection = flow.selected_ids
        print(f"[INFO] Lens {flow.lens_instance_id} selected: {', '.join(selection) or '(none)'}")

    trajectory = runtime.run_cycle(
        worker, store, args.intent, budget, reasoner,
        max_steps=args.max_steps, lens_selection=selection,
    )
    sys.stdout.write(trajectory.serialize())
    print(f"[SUCCESS] {worker.instance_id} ran {len(trajectory.steps)} steps; status {worker.status.value}")


def cmd_evolve(args, settings) -> None:
    store = ArtifactStore.open(settings)
    evolver = Evolver(store)
    suite = TaskSuite.load(args.suite)
    reports = []

    if args.patch is None:
        report = evolver.replay(suite)
        reports.append(report)
        print(f"[INFO] {report.summary()}")
    else:
        if args.body is None or not args.hypothesis:
            raise InputError("--patch needs --body and --hypothesis")
        patch = evolver.propose_patch(args.patch, args.body.read_text(encoding="utf-8"), args.hypothesis)
        report = evolver.evaluate_in_sandbox(evolver.open_sandbox(), patch, suite, ab=True)
        reports.extend([r for r in (report.control, report) if r is not None])
        print(f"[INFO] {report.summary()}")
        merged = evolver.select_merge([patch])
        if merged:
            print(f"[SUCCESS] Merged {patch.patch_id} into {patch.target_artifact}")
        else:
            print(f"[WARNING] {patch.patch_id} not merged ({patch.status.value})")

    if args.fitness_out:
        print(f"✓ Fitness saved to: {write_fitness_tsv(reports, args.fitness_out)}")


def cmd_trace(args, settings) -> None:
    store = ArtifactStore.open(settings)
    chain = trace_chain(store.log, args.event_id)
    for event in chain.events:
        print(event.to_line().rstrip("\n"))


COMMANDS = {
    "bench": cmd_bench,
    "store": cmd_store,
    "run": cmd_run,
    "evolve": cmd_evolve,
    "trace": cmd_trace,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(logging.INFO if args.verbose else logging.WARNING)

    try:
        settings = load_settings(home=args.home)
        COMMANDS[args.command](args, settings)
    except InvariantError as e:
        print(f"[ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except InputError as e:
        print(f"[ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_MALFORMED
    except LssError as e:
        print(f"[ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_MALFORMED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
