"""Command-line entry point: run sessions, meta-train, evaluate frozen
policies, and aggregate run logs into report tables.

Exit codes: 0 success, 2 usage/config error, 3 data-integrity error,
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

from .agents import make_naive_policy, propose
from .config import ConfigError, RunConfig, Runtime, build_runtime
from .core import AdaptationPolicy, DegenerateColumnError
from .metatrain import run_training
from .store import (
    HashChainError,
    RunLock,
    RunStore,
    SequenceError,
    SessionRecorder,
    StoreError,
    canonical_json,
    verify_log,
)
from .ttl import SessionRequest, run_ttl

logger = logging.getLogger(__name__)

EVAL_CSV_HEADER = ["task_id", "episode", "return", "wauc", "avg_score"]


def _task_payload(task) -> dict:
    return {
        "task_id": task.task_id,
        "env_kind": task.env_kind,
        "max_return": task.max_return,
        "horizon": task.horizon,
        "episode_budget": task.episode_budget,
    }


def _resolve_policy(
    source: str, runtime: Runtime, out_root: Path
) -> AdaptationPolicy | None:
    """Map a --policy argument to a policy object (None means static)."""
    if source == "static":
        return None
    if source == "seed":
        seed_text = str(runtime.config.train.get("seed_policy_text", "")) or None
        if seed_text:
            return make_naive_policy(seed_text=seed_text, policy_id="seed")
        return make_naive_policy(policy_id="seed")
    if source.startswith("pool:"):
        policy_id = source[len("pool:") :]
        for run_dir in sorted(out_root.glob("*")):
            selected = run_dir / "report" / "selected_policy.json"
            if selected.exists():
                body = json.loads(selected.read_text(encoding="utf-8"))
                if body.get("policy_id") == policy_id:
                    return _policy_from_dict(body)
            snapshots = sorted((run_dir / "pool").glob("snapshot_*.json"))
            if snapshots:
                body = json.loads(snapshots[-1].read_text(encoding="utf-8"))
                registry = body.get("pool", {}).get("registry", {})
                if policy_id in registry:
                    return _policy_from_dict(registry[policy_id])
        raise ConfigError(f"policy {policy_id!r} not found in any pool under {out_root}")
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"policy file not found: {source}")
    return _policy_from_dict(json.loads(path.read_text(encoding="utf-8")))


def _policy_from_dict(body: dict) -> AdaptationPolicy:
    parent_id = body.get("parent_id")
    # Rootless policies are seeds by definition; "manual" only annotates
    # hand-edits of an existing policy.
    default_provenance = "seed" if parent_id is None else "manual"
    try:
        return AdaptationPolicy(
            policy_id=str(body["policy_id"]),
            meta_prompt=str(body["meta_prompt"]),
            parent_id=parent_id,
            created_at_iteration=int(body.get("created_at_iteration", 0)),
            provenance=str(body.get("provenance") or default_provenance),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"malformed policy record: {exc}") from exc


def _policy_to_dict(policy: AdaptationPolicy) -> dict:
    return {
        "policy_id": policy.policy_id,
        "meta_prompt": policy.meta_prompt,
        "parent_id": policy.parent_id,
        "created_at_iteration": policy.created_at_iteration,
        "provenance": policy.provenance,
    }


def _make_runner(runtime: Runtime, store: RunStore):
    def run(policy, task_id, run_seed, tags, session_id):
        task = runtime.tasks[task_id]
        recorder = SessionRecorder(
            store.session_log(session_id),
            session_id,
            _task_payload(task),
            policy.policy_id if policy is not None else "static",
            tags,
            run_seed,
        )
        request = SessionRequest(
            task=task, policy=policy, actor=runtime.actor, run_seed=run_seed, tags=tuple(tags)
        )
        return run_ttl(
            request,
            meta=runtime.meta,
            recorder=recorder,
            timeout_s=runtime.config.session_timeout_s,
        )

    return run


# ---------------------------------------------------------------------------
# subcommands


def cmd_run_ttl(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config)
    runtime = build_runtime(config)
    if args.task not in runtime.tasks:
        raise ConfigError(f"unknown task id {args.task!r}")
    out_root = Path(args.out or config.output_dir)
    policy = _resolve_policy(args.policy, runtime, out_root)
    label = policy.policy_id if policy is not None else "static"
    run_id = f"ttl-{args.task}-{label}-s{args.seed}"
    store = RunStore(out_root, run_id, clock=config.log_clock())
    with RunLock(store.run_dir):
        store.append("run_config", config.loggable_payload())
        runner = _make_runner(runtime, store)
        session = runner(policy, args.task, args.seed, ("cli", "run-ttl"), "session-0001")
    for trajectory in session.trajectories:
        print(
            f"episode {trajectory.episode_index}: return {trajectory.episode_return:g} "
            f"({trajectory.terminated})"
        )
    print(f"W-AUC: {session.wauc:.4f}")
    return 0


def make_propose_fn(runtime: Runtime):
    def propose_fn(parent, session, candidate_id, iteration):
        return propose(
            parent, session, runtime.proposer,
            candidate_id=candidate_id, iteration=iteration,
        )

    return propose_fn


def write_selection_report(store: RunStore, result, mode: str) -> None:
    result.score_table.write_csv(store.report_dir / "score_table.csv")
    selection_payload = {
        "selected_policy_id": result.selected.policy_id,
        "mode": mode,
        "raw_ranking": [[cid, score] for cid, score in result.raw_ranking],
        "zscore_ranking": (
            [[cid, score] for cid, score in result.zscore_ranking]
            if result.zscore_ranking is not None
            else None
        ),
        "zscore_unavailable_reason": result.zscore_unavailable_reason,
        "funnel": {
            "proposals": result.funnel.proposals,
            "locally_validated": result.funnel.locally_validated,
            "pool_improvements": result.funnel.pool_improvements,
        },
    }
    (store.report_dir / "selection.json").write_text(
        canonical_json(selection_payload) + "\n", encoding="utf-8"
    )
    (store.report_dir / "selected_policy.json").write_text(
        canonical_json(_policy_to_dict(result.selected)) + "\n", encoding="utf-8"
    )


def cmd_meta_train(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config)
    runtime = build_runtime(config)
    train_config = config.train_config()
    out_root = Path(args.out or config.output_dir)
    store = RunStore(out_root, args.run_id, clock=config.log_clock())
    with RunLock(store.run_dir):
        result = run_training(
            train_config,
            _make_runner(runtime, store),
            make_propose_fn(runtime),
            store=store,
            run_config_payload=config.loggable_payload(),
        )
        write_selection_report(store, result, train_config.selection_mode)
    print(
        f"Gate funnel: proposals={result.funnel.proposals} "
        f"locally_validated={result.funnel.locally_validated} "
        f"pool_improvements={result.funnel.pool_improvements}"
    )
    print("Raw ranking:")
    for position, (cid, score) in enumerate(result.raw_ranking, start=1):
        print(f"  {position}. {cid} {score:.6f}")
    if result.zscore_ranking is not None:
        print("Z-score ranking:")
        for position, (cid, score) in enumerate(result.zscore_ranking, start=1):
            print(f"  {position}. {cid} {score:.6f}")
    else:
        print(f"Z-score ranking: unavailable ({result.zscore_unavailable_reason})")
    print(f"Selected policy: {result.selected.policy_id} (mode={train_config.selection_mode})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config)
    runtime = build_runtime(config)
    out_root = Path(args.out or config.output_dir)
    policy = _resolve_policy(args.policy, runtime, out_root)
    label = policy.policy_id if policy is not None else "static"
    tasks = runtime.tasks_in_split(args.split)
    if not tasks:
        raise ConfigError(f"no tasks in split {args.split!r}")
    run_id = f"eval-{label}-{args.split}-s{args.seed}"
    store = RunStore(out_root, run_id, clock=config.log_clock())
    rows: list[list[str]] = []
    with RunLock(store.run_dir):
        store.append("run_config", config.loggable_payload())
        runner = _make_runner(runtime, store)
        for task in tasks:
            session = runner(
                policy, task.task_id, args.seed, ("eval", args.split),
                f"eval-{task.task_id}",
            )
            avg = statistics.fmean(session.episode_returns)
            for trajectory in session.trajectories:
                rows.append(
                    [task.task_id, str(trajectory.episode_index),
                     str(trajectory.episode_return), str(session.wauc), str(avg)]
                )
    csv_path = out_root / f"{run_id}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_CSV_HEADER)
        writer.writerows(rows)
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def _session_summary(path: Path) -> dict | None:
    records = verify_log(path)
    header = next((r.payload for r in records if r.kind == "episode_start"), None)
    if header is None:
        return None
    returns = [
        (int(r.payload["episode"]), float(r.payload["return"]))
        for r in records
        if r.kind == "episode_end"
    ]
    if not returns:
        return None
    returns.sort()
    values = [ret for _, ret in returns]
    max_return = float(header["max_return"])
    weights = list(range(1, len(values) + 1))
    wauc = sum(w * v for w, v in zip(weights, values)) / (sum(weights) * max_return)
    return {
        "task_id": header["task_id"],
        "policy_id": header["policy_id"],
        "avg_score": statistics.fmean(values),
        "wauc": wauc,
    }


def cmd_report(args: argparse.Namespace) -> int:
    runs_root = Path(args.runs_dir)
    summaries = []
    run_dirs = sorted(p for p in runs_root.glob("*") if p.is_dir())
    for run_dir in run_dirs:
        run_log = run_dir / "run.jsonl"
        if run_log.exists():
            verify_log(run_log)
        for session_path in sorted((run_dir / "sessions").glob("*.jsonl")):
            summary = _session_summary(session_path)
            if summary is not None:
                summaries.append(summary)
    if not summaries:
        print("no runs found")
        return 0
    grouped: dict[tuple[str, str], list[dict]] = {}
    for summary in summaries:
        grouped.setdefault((summary["policy_id"], summary["task_id"]), []).append(summary)
    methods = sorted({key[0] for key in grouped})
    tasks = sorted({key[1] for key in grouped})

    csv_path = runs_root / "report_summary.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy_id", "task_id", "sessions", "avg_score", "wauc"])
        for (method, task), items in sorted(grouped.items()):
            writer.writerow(
                [method, task, str(len(items)),
                 str(statistics.fmean(s["avg_score"] for s in items)),
                 str(statistics.fmean(s["wauc"] for s in items))]
            )

    width = max(12, *(len(m) for m in methods))
    for metric in ("avg_score", "wauc"):
        print(f"{metric}:")
        print("  " + "method".ljust(width) + "".join(t.rjust(16) for t in tasks))
        for method in methods:
            cells = []
            for task in tasks:
                items = grouped.get((method, task))
                if items:
                    cells.append(f"{statistics.fmean(s[metric] for s in items):.4f}".rjust(16))
                else:
                    cells.append("-".rjust(16))
            print("  " + method.ljust(width) + "".join(cells))
    print(f"wrote {csv_path}")
    return 0


def cmd_select_expert(args: argparse.Namespace) -> int:
    from .core import ScoreTable, ranking_raw, ranking_zscore

    run_dir = Path(args.run_dir)
    run_log = run_dir / "run.jsonl"
    if not run_log.exists():
        raise ConfigError(f"no run log found at {run_log}")
    records = verify_log(run_log)
    seed_scores: dict[str, float] | None = None
    seed_id: str | None = None
    rows: dict[str, dict[str, float]] = {}
    for record in records:
        if record.kind == "pool_update" and record.payload.get("phase") == "init":
            seed_scores = {k: float(v) for k, v in record.payload["scores"].items()}
            snapshot = json.loads(
                (run_dir / "pool" / f"snapshot_{int(record.payload['snapshot']):05d}.json")
                .read_text(encoding="utf-8")
            )
            entries = snapshot["pool"]["entries"]
            seed_id = next(iter(entries.values()))["policy_id"]
        elif record.kind == "proposal" and record.payload.get("outcome") == "validated":
            rows[record.payload["candidate_id"]] = {
                k: float(v) for k, v in record.payload["validation_scores"].items()
            }
    if seed_scores is None or seed_id is None:
        raise ConfigError(f"run at {run_dir} has no completed pool initialization")
    rows[seed_id] = seed_scores
    table = ScoreTable(rows=rows)
    if args.mode == "raw":
        ranking = ranking_raw(table)
    else:
        ranking = ranking_zscore(table)
    print(f"Ranking (mode={args.mode}):")
    for position, (cid, score) in enumerate(ranking, start=1):
        print(f"  {position}. {cid} {score:.6f}")
    print(f"Selected policy: {ranking[0][0]} (mode={args.mode})")
    payload = {
        "selected_policy_id": ranking[0][0],
        "mode": args.mode,
        "ranking": [[cid, score] for cid, score in ranking],
    }
    out_path = run_dir / "report" / f"selection-{args.mode}.json"
    out_path.parent.mkdir(exist_ok=True)
    out_path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttlopt",
        description="Learn and evaluate between-episode adaptation policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run-ttl", help="run one session on one task")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--task", required=True)
    p_run.add_argument("--policy", default="seed",
                       help="seed | static | pool:ID | path to a policy JSON file")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run_ttl)

    p_train = sub.add_parser("meta-train", help="run the outer training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--run-id", default="meta-train")
    p_train.set_defaults(func=cmd_meta_train)

    p_eval = sub.add_parser("eval", help="evaluate a frozen policy on a split")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--policy", default="seed")
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="aggregate session logs into tables")
    p_report.add_argument("runs_dir")
    p_report.set_defaults(func=cmd_report)

    p_select = sub.add_parser(
        "select-expert", help="re-run expert selection on an existing run"
    )
    p_select.add_argument("run_dir")
    p_select.add_argument("--mode", default="raw", choices=["raw", "zscore"])
    p_select.set_defaults(func=cmd_select_expert)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DegenerateColumnError as exc:
        print(
            f"error: {exc}\nhint: z-score selection needs at least two candidates with "
            "per-task score spread; use --mode raw or run more iterations.",
            file=sys.stderr,
        )
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (HashChainError, SequenceError) as exc:
        print(f"data integrity error: {exc}", file=sys.stderr)
        return 3
    except StoreError as exc:
        print(f"store error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort exit-code mapping
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
