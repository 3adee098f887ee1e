"""Acceptance suite: every criterion runs offline against scripted backends
and deterministic environments, with independently computed expectations.

Conftest prints one ACCEPTANCE <name>: PASS/FAIL line per test here.
"""

from __future__ import annotations

import random
import time
from pathlib import Path

import pytest

from ttlopt.agents import ActorConfig, MetaAgentConfig, ProposalFailedError, make_naive_policy
from ttlopt.backends import ScriptedBackend
from ttlopt.cli import _make_runner, main, make_propose_fn, write_selection_report
from ttlopt.config import RunConfig, build_runtime
from ttlopt.core import (
    AdaptationPolicy,
    ScoreTable,
    Session,
    Trajectory,
    ranking_raw,
    ranking_zscore,
    score_wauc,
    select_expert_raw,
    select_expert_zscore,
    zscore_normalize,
)
from ttlopt.envs import make_env
from ttlopt.metatrain import TrainConfig, build_selection_table, init_pool, run_training, train_step
from ttlopt.store import JsonlLog, RunStore, SessionRecorder
from ttlopt.ttl import SessionRequest, run_ttl

import fixtures_demo
from fixtures_demo import (
    SCRIPTS_BY_LEVEL,
    chain_config_dict,
    trajectory_with_return,
    trio_config_dict,
)

# Reference expert-selection example: per-task statistics from a wider
# candidate set, two candidates' raw score rows, and the rounded z-cells
# they are expected to reproduce.
REFERENCE_EXAMPLE_STATS = {
    "detective": (0.554, 0.108),
    "zork1": (0.145, 0.013),
    "temple": (0.197, 0.019),
}
REFERENCE_EXAMPLE_ROWS = {
    "P11": {"detective": 0.675, "zork1": 0.161, "temple": 0.207},
    "P5": {"detective": 0.783, "zork1": 0.131, "temple": 0.199},
}
REFERENCE_EXAMPLE_Z = {
    "P11": {"detective": 1.13, "zork1": 1.27, "temple": 0.48},
    "P5": {"detective": 2.12, "zork1": -1.04, "temple": 0.10},
}
REFERENCE_EXAMPLE_AVG_Z = {"P11": 0.96, "P5": 0.40}
REFERENCE_EXAMPLE_RAW_AVG = {"P11": 0.348, "P5": 0.371}


def wauc_by_hand(returns, max_return) -> float:
    numerator = 0.0
    denominator = 0.0
    for k, value in enumerate(returns, start=1):
        numerator += k * value
        denominator += k * max_return
    return numerator / denominator


def trajectories_of(returns) -> list[Trajectory]:
    return [trajectory_with_return(k, r) for k, r in enumerate(returns, start=1)]


def test_selection_example_reproduction():
    started = time.monotonic()
    table = ScoreTable(rows=REFERENCE_EXAMPLE_ROWS)
    z = zscore_normalize(table, stats=REFERENCE_EXAMPLE_STATS)
    for candidate, cells in REFERENCE_EXAMPLE_Z.items():
        for game, printed in cells.items():
            assert z.rows[candidate][game] == pytest.approx(printed, abs=0.1)
    mean_z = {cid: sum(row.values()) / len(row) for cid, row in z.rows.items()}
    assert mean_z["P11"] == pytest.approx(REFERENCE_EXAMPLE_AVG_Z["P11"], abs=0.05)
    assert mean_z["P5"] == pytest.approx(REFERENCE_EXAMPLE_AVG_Z["P5"], abs=0.05)
    raw_means = dict(ranking_raw(table))
    assert raw_means["P11"] == pytest.approx(REFERENCE_EXAMPLE_RAW_AVG["P11"], abs=0.002)
    assert raw_means["P5"] == pytest.approx(REFERENCE_EXAMPLE_RAW_AVG["P5"], abs=0.002)
    assert select_expert_raw(table) == "P5"
    assert select_expert_zscore(table, stats=REFERENCE_EXAMPLE_STATS) == "P11"
    assert ranking_zscore(table, stats=REFERENCE_EXAMPLE_STATS)[0][0] == "P11"
    assert time.monotonic() - started < 1.0


def test_wauc_oracle_equivalence():
    started = time.monotonic()
    rng = random.Random(2024)
    for _ in range(1000):
        k = rng.randint(1, 10)
        max_return = rng.uniform(0.25, 500.0)
        returns = [rng.uniform(0.0, max_return) for _ in range(k)]
        expected = wauc_by_hand(returns, max_return)
        got = score_wauc(trajectories_of(returns), max_return)
        assert abs(got - expected) <= 1e-12 * max(abs(expected), 1e-300)
    # Boundary cases are exact for arbitrary maximum returns.
    for max_return in (1.0, 3.0, 7.3, 40.0, 123.456):
        assert score_wauc(trajectories_of([0.0] * 5), max_return) == 0.0
        assert score_wauc(trajectories_of([max_return] * 3), max_return) == 1.0
    assert time.monotonic() - started < 1.0


def test_algorithm1_structure(templates, tmp_path):
    started = time.monotonic()
    rng = random.Random(99)
    base_task = fixtures_demo.chain_task("grid", "train")
    for fixture_index in range(12):
        episode_budget = rng.randint(1, 5)
        level = rng.randint(0, 3)
        rule_subset = [r for r in fixtures_demo.chain_actor_rules() if rng.random() < 0.7]
        static = fixture_index % 4 == 3

        from ttlopt.core import TaskSpec

        task = TaskSpec(task_id=f"grid-{fixture_index}", env_kind="gridquest",
                        env_config=base_task["env_config"], horizon=8,
                        episode_budget=episode_budget, max_return=20.0, split="train")
        actor = ActorConfig(
            backend=ScriptedBackend.from_spec(
                {"rules": rule_subset, "default_response": "look"}
            ),
            base_instructions="Control the agent.",
            guidance="Play carefully and maximize score.",
            max_context_steps=0,
            templates=templates,
        )
        meta = MetaAgentConfig(
            backend=ScriptedBackend.from_spec(
                {"rules": [],
                 "default_response": "<think>x</think><learn>"
                 + fixtures_demo.HINTS_BY_LEVEL[level] + "</learn>"}
            ),
            templates=templates,
        )
        log = JsonlLog(tmp_path / f"fixture-{fixture_index}.jsonl", clock=lambda: 0.0)
        recorder = SessionRecorder(
            log, f"s{fixture_index}",
            {"task_id": task.task_id, "max_return": task.max_return,
             "horizon": task.horizon, "episode_budget": task.episode_budget},
            "static" if static else "p", (), 0,
        )
        policy = None if static else make_naive_policy(policy_id="p", seed_text="seed text")
        session = run_ttl(SessionRequest(task, policy, actor), meta=meta,
                          recorder=recorder)

        # Exactly K episodes and K-1 adaptation events (0 when static).
        assert len(session.trajectories) == episode_budget
        records = log.records()
        adapts = sum(1 for r in records if r.kind == "adapt")
        assert adapts == (0 if static else episode_budget - 1)
        # Horizon respected, per-episode prompts aligned.
        assert all(len(t.steps) <= task.horizon for t in session.trajectories)
        assert len(session.actor_prompts) == episode_budget
        # Reset isolation: replaying each episode's actions in a fresh
        # environment reproduces its rewards exactly.
        for trajectory in session.trajectories:
            env = make_env(task)
            env.reset()
            replayed = [env.step(step.action).reward for step in trajectory.steps]
            assert replayed == [step.reward for step in trajectory.steps]
        # The stored score recomputes from the trajectories.
        assert session.wauc == score_wauc(session.trajectories, task.max_return)
        assert session.wauc == pytest.approx(
            wauc_by_hand(session.episode_returns, task.max_return), rel=1e-12
        )
    assert time.monotonic() - started < 10.0


def synthetic_session(policy_id: str, task_id: str, score: float) -> Session:
    trajectory = trajectory_with_return(1, score)
    return Session(task_id=task_id, policy_id=policy_id, trajectories=(trajectory,),
                   actor_prompts=("p",), wauc=score_wauc((trajectory,), 1.0))


def test_algorithm2_gate_and_pool():
    started = time.monotonic()
    for seed in (21, 22, 23):
        config = TrainConfig(
            train_task_ids=("train-a", "train-b"),
            val_task_ids=("val-a", "val-b", "val-c"),
            iterations=25,
            seed_policy=AdaptationPolicy("seed", "gen0", provenance="seed"),
            random_seed=seed,
        )
        plan_rng = random.Random(seed)
        failing = {t for t in range(1, 26) if plan_rng.random() < 0.15}

        def generation(policy):
            return policy.meta_prompt.count("+")

        def score(policy, task):
            mix = random.Random(f"{seed}:{generation(policy)}:{task}")
            return round(mix.random(), 6)

        calls = []

        def runner(policy, task_id, run_seed, tags, session_id):
            calls.append(session_id)
            return synthetic_session(policy.policy_id, task_id, score(policy, task_id))

        def propose_fn(parent, session, candidate_id, iteration):
            if iteration in failing:
                raise ProposalFailedError("scripted failure")
            return AdaptationPolicy(candidate_id, parent.meta_prompt + "+",
                                    parent_id=parent.policy_id,
                                    created_at_iteration=iteration,
                                    provenance="proposed")

        pool, seed_scores = init_pool(config, runner)
        records = []
        history = [dict(pool.entries)]
        for t in range(1, config.iterations + 1):
            records.append(train_step(pool, config, t, runner, propose_fn))
            history.append(dict(pool.entries))

        # (i) Gate soundness: locally-rejected candidates appear nowhere.
        rejected = {r.candidate_id for r in records if r.outcome == "rejected_local"}
        pool_ids = {e.policy_id for e in pool.entries.values()}
        table = build_selection_table("seed", seed_scores, records)
        assert not rejected & pool_ids
        assert not rejected & set(table.rows)
        for record in records:
            if record.outcome == "validated":
                assert record.candidate_score > record.parent_score
        # (ii) Per-task pool scores never decrease.
        for earlier, later in zip(history, history[1:]):
            for task, entry in earlier.items():
                assert later[task].score >= entry.score
        # (iii) Session accounting: |D_val| init sessions plus, per
        # iteration, 1 when the proposal failed, 2 when locally rejected,
        # and 2 + |D_val| when validated.
        per_outcome = {"proposal_failed": 1, "rejected_local": 2,
                       "validated": 2 + len(config.val_task_ids)}
        assert len(calls) == len(config.val_task_ids) + sum(
            per_outcome[r.outcome] for r in records
        )
        assert all(r.sessions_run == per_outcome[r.outcome] for r in records)
        assert len(records) == config.iterations
    assert time.monotonic() - started < 30.0


def test_end_to_end_learning(tmp_path):
    started = time.monotonic()
    out_dir = tmp_path / "runs"
    config = RunConfig.from_dict(chain_config_dict(str(out_dir)))
    runtime = build_runtime(config)
    train_config = config.train_config()
    store = RunStore(out_dir, "accept-train", clock=config.log_clock())
    result = run_training(train_config, _make_runner(runtime, store),
                          make_propose_fn(runtime), store=store,
                          run_config_payload=config.loggable_payload())

    # Oracle: replay each hint level's action script straight through the
    # environment to get the per-episode returns the scripted actor earns.
    def expected_session_wauc(task_id, level) -> float:
        task = runtime.tasks[task_id]
        env = make_env(task)
        env.reset()
        late_return = 0.0
        for action in SCRIPTS_BY_LEVEL[level]:
            late_return += env.step(action).reward
        returns = [0.0] + [late_return] * (task.episode_budget - 1)
        return wauc_by_hand(returns, task.max_return)

    eval_runtime = build_runtime(config)  # fresh backends for evaluation
    runner = _make_runner(eval_runtime, RunStore(out_dir, "accept-eval",
                                                 clock=config.log_clock()))
    seed_policy = make_naive_policy(policy_id="seed")
    for task_id in train_config.val_task_ids:
        selected_session = runner(result.selected, task_id, 0, ("eval",),
                                  f"sel-{task_id}")
        naive_session = runner(seed_policy, task_id, 0, ("eval",), f"naive-{task_id}")
        expected_selected = expected_session_wauc(task_id, level=3)
        expected_naive = expected_session_wauc(task_id, level=0)
        assert selected_session.wauc == pytest.approx(expected_selected, abs=1e-12)
        assert naive_session.wauc == pytest.approx(expected_naive, abs=1e-12)
        assert selected_session.wauc > naive_session.wauc  # strict, every task

    # The winning policy is the fully-informed meta-prompt, found in 5
    # iterations from the generic seed.
    assert result.selected.policy_id == "cand-0003"
    assert "MARK_LEVEL3" in result.selected.meta_prompt
    # Proposer budget: one successful call per iteration in this fixture.
    assert runtime.proposer.backend.stats.calls == result.funnel.proposals
    assert time.monotonic() - started < 60.0


def test_determinism_and_resume(tmp_path):
    started = time.monotonic()

    def run_dir_bytes(run_dir: Path) -> dict:
        return {
            str(p.relative_to(run_dir)): p.read_bytes()
            for p in sorted(run_dir.rglob("*"))
            if p.is_file()
        }

    # (a) Two full scripted runs with the same seed: bytewise-identical logs.
    snapshots = []
    for name in ("det-a", "det-b"):
        out_dir = tmp_path / name
        config_path = tmp_path / f"{name}.json"
        import json as _json

        config_path.write_text(_json.dumps(chain_config_dict(str(out_dir))),
                               encoding="utf-8")
        assert main(["meta-train", "--config", str(config_path)]) == 0
        snapshots.append(run_dir_bytes(out_dir / "meta-train"))
    assert snapshots[0] == snapshots[1]

    # (b) Kill at a random iteration boundary, resume, compare the final
    # report bytewise with an uninterrupted run.
    boundary = random.Random(4242).randint(1, 4)

    def train(root: Path, interrupt_at: int | None):
        config = RunConfig.from_dict(chain_config_dict(str(root)))
        runtime = build_runtime(config)
        store = RunStore(root, "meta-train", clock=config.log_clock())

        def interrupt(record):
            if interrupt_at is not None and record.iteration == interrupt_at:
                raise KeyboardInterrupt

        try:
            result = run_training(config.train_config(), _make_runner(runtime, store),
                                  make_propose_fn(runtime), store=store,
                                  run_config_payload=config.loggable_payload(),
                                  on_iteration=interrupt)
        except KeyboardInterrupt:
            return None
        write_selection_report(store, result, config.train_config().selection_mode)
        return result

    reference_root = tmp_path / "uninterrupted"
    resumed_root = tmp_path / "resumed"
    assert train(reference_root, None) is not None
    assert train(resumed_root, boundary) is None  # killed mid-run
    assert train(resumed_root, None) is not None  # resumed to completion

    reference = run_dir_bytes(reference_root / "meta-train")
    resumed = run_dir_bytes(resumed_root / "meta-train")
    assert resumed["report/selection.json"] == reference["report/selection.json"]
    assert resumed["report/score_table.csv"] == reference["report/score_table.csv"]
    assert resumed["report/selected_policy.json"] == reference["report/selected_policy.json"]
    assert resumed == reference  # boundary kill: the whole run dir matches
    assert time.monotonic() - started < 120.0


def test_baseline_differential(tmp_path):
    import csv as _csv
    import json as _json

    out_dir = tmp_path / "runs"
    config_path = tmp_path / "trio.json"
    config_path.write_text(_json.dumps(trio_config_dict(str(out_dir))), encoding="utf-8")
    assert main(["eval", "--config", str(config_path), "--policy", "static",
                 "--split", "test", "--seed", "0"]) == 0
    csv_path = next(out_dir.glob("eval-static-test-*.csv"))
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(_csv.DictReader(fh))
    by_task: dict[str, list[dict]] = {}
    for row in rows:
        by_task.setdefault(row["task_id"], []).append(row)
    for task_id, task_rows in by_task.items():
        returns = [float(r["return"]) for r in task_rows]
        # Flat learning curve: identical per-episode returns.
        assert len(set(returns)) == 1
        # Its weighted learning-curve score equals any single episode's
        # normalized return, and the CSV reflects this exactly.
        waucs = {float(r["wauc"]) for r in task_rows}
        assert waucs == {returns[0] / 40.0}
        avgs = {float(r["avg_score"]) for r in task_rows}
        assert avgs == {returns[0]}


def test_run_shape_representability(tmp_path):
    validated_iters = {1, 2, 4, 6, 7, 9, 11, 12, 14, 16, 17, 19, 21, 22, 24, 26}
    improving_iters = {1, 6, 11, 16, 21, 26}
    assert len(validated_iters) == 16 and improving_iters < validated_iters
    improvement_rank = {t: i for i, t in enumerate(sorted(improving_iters), start=1)}

    def planned_scores(policy) -> dict:
        if policy.provenance == "seed":
            return {"local": 0.2, "val": 0.5}
        body = dict(pair.split("=") for pair in policy.meta_prompt.split(";"))
        return {"local": float(body["local"]), "val": float(body["val"])}

    def propose_fn(parent, session, candidate_id, iteration):
        parent_scores = planned_scores(parent)
        if iteration in validated_iters:
            local = parent_scores["local"] + 0.001
            if iteration in improving_iters:
                val = 0.5 + 0.05 * improvement_rank[iteration]
            else:
                val = 0.01
        else:
            local = parent_scores["local"]  # tie: fails the strict gate
            val = 0.01
        return AdaptationPolicy(candidate_id, f"local={local};val={val}",
                                parent_id=parent.policy_id,
                                created_at_iteration=iteration, provenance="proposed")

    def runner(policy, task_id, run_seed, tags, session_id):
        scores = planned_scores(policy)
        value = scores["local"] if task_id.startswith("train") else scores["val"]
        return synthetic_session(policy.policy_id, task_id, value)

    config = TrainConfig(
        train_task_ids=("train-a",),
        val_task_ids=("val-a", "val-b", "val-c"),
        iterations=26,
        seed_policy=AdaptationPolicy("seed", "seed prompt", provenance="seed"),
        random_seed=5,
    )
    store = RunStore(tmp_path, "shape", clock=lambda: 0.0)
    result = run_training(config, runner, propose_fn, store=store,
                          run_config_payload={"schema_version": 1})
    write_selection_report(store, result, "raw")

    assert result.funnel.proposals == 26
    assert result.funnel.locally_validated == 16
    assert result.funnel.pool_improvements == 6
    funnel_line = (
        f"proposals={result.funnel.proposals} "
        f"locally_validated={result.funnel.locally_validated} "
        f"pool_improvements={result.funnel.pool_improvements}"
    )
    assert funnel_line == "proposals=26 locally_validated=16 pool_improvements=6"
    import json as _json

    report = _json.loads((store.report_dir / "selection.json").read_text())
    assert report["funnel"] == {"proposals": 26, "locally_validated": 16,
                                "pool_improvements": 6}
