"""The outer evolutionary loop: propose meta-prompt mutations from training
rollouts, gate them on local improvement, score survivors on every
validation task, and keep a per-task pool of the best policies found.

Session execution is injected as a callable so the loop can be driven by
the real runner or by synthetic fixtures; the loop itself is sequential
across iterations because each iteration's pool must reflect all prior
updates.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

from .agents import ProposalFailedError
from .core import (
    AdaptationPolicy,
    DegenerateColumnError,
    ScoreTable,
    Session,
    ranking_raw,
    ranking_zscore,
    select_expert_raw,
    select_expert_zscore,
)
from .store import RunStore

logger = logging.getLogger(__name__)

GATE_OUTCOMES = ("proposal_failed", "rejected_local", "validated")
SELECTION_MODES = ("raw", "zscore")
PARENT_SAMPLING_RULES = ("uniform_distinct", "uniform_entries")


class SessionRunner(Protocol):
    def __call__(
        self,
        policy: AdaptationPolicy,
        task_id: str,
        run_seed: int,
        tags: tuple[str, ...],
        session_id: str,
    ) -> Session: ...


ProposeFn = Callable[[AdaptationPolicy, Session, str, int], AdaptationPolicy]


@dataclass(frozen=True)
class PoolEntry:
    policy_id: str
    score: float


@dataclass
class ExpertPool:
    """Best (policy, score) found so far for each validation task.

    Per-task scores only ever increase: an entry is replaced solely on
    strict improvement.
    """

    entries: dict[str, PoolEntry] = field(default_factory=dict)
    registry: dict[str, AdaptationPolicy] = field(default_factory=dict)

    def update(self, task_id: str, policy: AdaptationPolicy, score: float) -> None:
        current = self.entries.get(task_id)
        if current is not None and score <= current.score:
            raise ValueError(
                f"pool update for {task_id!r} must strictly improve "
                f"({score} <= {current.score})"
            )
        self.entries[task_id] = PoolEntry(policy_id=policy.policy_id, score=score)
        self.registry[policy.policy_id] = policy

    def distinct_policy_ids(self) -> list[str]:
        return sorted({entry.policy_id for entry in self.entries.values()})

    def to_payload(self) -> dict:
        return {
            "entries": {
                task: {"policy_id": e.policy_id, "score": e.score}
                for task, e in sorted(self.entries.items())
            },
            "registry": {
                pid: {
                    "policy_id": p.policy_id,
                    "meta_prompt": p.meta_prompt,
                    "parent_id": p.parent_id,
                    "created_at_iteration": p.created_at_iteration,
                    "provenance": p.provenance,
                }
                for pid, p in sorted(self.registry.items())
            },
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "ExpertPool":
        registry = {
            pid: AdaptationPolicy(
                policy_id=raw["policy_id"],
                meta_prompt=raw["meta_prompt"],
                parent_id=raw["parent_id"],
                created_at_iteration=raw["created_at_iteration"],
                provenance=raw["provenance"],
            )
            for pid, raw in payload["registry"].items()
        }
        entries = {
            task: PoolEntry(policy_id=raw["policy_id"], score=raw["score"])
            for task, raw in payload["entries"].items()
        }
        for task, entry in entries.items():
            if entry.policy_id not in registry:
                raise ValueError(f"pool entry for {task!r} references unknown policy")
        return cls(entries=entries, registry=registry)


@dataclass(frozen=True)
class TrainConfig:
    train_task_ids: tuple[str, ...]
    val_task_ids: tuple[str, ...]
    iterations: int
    seed_policy: AdaptationPolicy
    selection_mode: str = "raw"
    parent_sampling: str = "uniform_distinct"
    random_seed: int = 0
    reuse_parent_seed: bool = True

    def __post_init__(self):
        if not self.train_task_ids:
            raise ValueError("training task list must be non-empty")
        if not self.val_task_ids:
            raise ValueError("validation task list must be non-empty")
        if self.iterations < 1:
            raise ValueError("iteration budget must be >= 1")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.parent_sampling not in PARENT_SAMPLING_RULES:
            raise ValueError(f"parent_sampling must be one of {PARENT_SAMPLING_RULES}")
        if self.seed_policy.provenance != "seed":
            raise ValueError("the starting policy must have seed provenance")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    parent_id: str
    task_id: str
    parent_score: float
    candidate_id: str | None
    candidate_score: float | None
    candidate_meta_prompt: str | None
    candidate_parent_id: str | None
    outcome: str
    validation_scores: dict[str, float] = field(default_factory=dict)
    validation_errors: dict[str, str] = field(default_factory=dict)
    replaced_tasks: tuple[str, ...] = ()
    sessions_run: int = 0

    def __post_init__(self):
        if self.outcome not in GATE_OUTCOMES:
            raise ValueError(f"outcome must be one of {GATE_OUTCOMES}")
        if self.outcome == "rejected_local":
            if self.candidate_score is None or self.candidate_score > self.parent_score:
                raise ValueError("a locally-rejected candidate cannot out-score its parent")

    def to_payload(self) -> dict:
        return {
            "iteration": self.iteration,
            "parent_id": self.parent_id,
            "task_id": self.task_id,
            "parent_score": self.parent_score,
            "candidate_id": self.candidate_id,
            "candidate_score": self.candidate_score,
            "candidate_meta_prompt": self.candidate_meta_prompt,
            "candidate_parent_id": self.candidate_parent_id,
            "outcome": self.outcome,
            "validation_scores": dict(sorted(self.validation_scores.items())),
            "validation_errors": dict(sorted(self.validation_errors.items())),
            "replaced_tasks": list(self.replaced_tasks),
            "sessions_run": self.sessions_run,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "IterationRecord":
        return cls(
            iteration=payload["iteration"],
            parent_id=payload["parent_id"],
            task_id=payload["task_id"],
            parent_score=payload["parent_score"],
            candidate_id=payload["candidate_id"],
            candidate_score=payload["candidate_score"],
            candidate_meta_prompt=payload.get("candidate_meta_prompt"),
            candidate_parent_id=payload.get("candidate_parent_id"),
            outcome=payload["outcome"],
            validation_scores=dict(payload["validation_scores"]),
            validation_errors=dict(payload["validation_errors"]),
            replaced_tasks=tuple(payload["replaced_tasks"]),
            sessions_run=payload["sessions_run"],
        )


def iteration_rng(random_seed: int, iteration: int) -> random.Random:
    """Per-iteration generator, derived independently of loop history so an
    interrupted run resumes with identical draws."""
    return random.Random(f"{random_seed}:iter:{iteration}")


def init_pool(
    config: TrainConfig,
    runner: SessionRunner,
) -> tuple[ExpertPool, dict[str, float]]:
    """Score the seed policy on every validation task; errors propagate
    because an incomplete pool is unusable."""
    pool = ExpertPool()
    rng = random.Random(f"{config.random_seed}:init")
    scores: dict[str, float] = {}
    for task_id in config.val_task_ids:
        seed = rng.getrandbits(32)
        session = runner(
            config.seed_policy, task_id, seed, ("init", "global-validation"),
            f"init-val-{task_id}",
        )
        scores[task_id] = session.wauc
        pool.entries[task_id] = PoolEntry(config.seed_policy.policy_id, session.wauc)
    pool.registry[config.seed_policy.policy_id] = config.seed_policy
    return pool, scores


def sample_parent(
    pool: ExpertPool, rng: random.Random, rule: str = "uniform_distinct"
) -> AdaptationPolicy:
    """Draw the next parent from the pool.

    uniform_distinct weights each distinct policy equally; uniform_entries
    weights by the number of tasks a policy is expert for.
    """
    if not pool.entries:
        raise ValueError("cannot sample from an empty pool")
    if rule == "uniform_distinct":
        choices = pool.distinct_policy_ids()
    elif rule == "uniform_entries":
        choices = [pool.entries[t].policy_id for t in sorted(pool.entries)]
    else:
        raise ValueError(f"unknown parent sampling rule {rule!r}")
    return pool.registry[rng.choice(choices)]


def train_step(
    pool: ExpertPool,
    config: TrainConfig,
    iteration: int,
    runner: SessionRunner,
    propose_fn: ProposeFn,
) -> IterationRecord:
    """One outer-loop iteration: parent rollout, proposal, local gate,
    global validation, pool update."""
    rng = iteration_rng(config.random_seed, iteration)
    parent = sample_parent(pool, rng, config.parent_sampling)
    task_id = rng.choice(config.train_task_ids)
    parent_seed = rng.getrandbits(32)
    candidate_seed = parent_seed if config.reuse_parent_seed else rng.getrandbits(32)
    val_seeds = {h: rng.getrandbits(32) for h in config.val_task_ids}

    parent_session = runner(
        parent, task_id, parent_seed, ("train", "parent"), f"it{iteration:04d}-parent"
    )
    parent_score = parent_session.wauc
    base = dict(
        iteration=iteration, parent_id=parent.policy_id, task_id=task_id,
        parent_score=parent_score,
    )

    candidate_id = f"cand-{iteration:04d}"
    try:
        candidate = propose_fn(parent, parent_session, candidate_id, iteration)
    except ProposalFailedError as exc:
        logger.warning("iteration %d: proposal failed: %s", iteration, exc)
        return IterationRecord(
            **base, candidate_id=None, candidate_score=None,
            candidate_meta_prompt=None, candidate_parent_id=None,
            outcome="proposal_failed", sessions_run=1,
        )

    candidate_session = runner(
        candidate, task_id, candidate_seed, ("train", "local-validation"),
        f"it{iteration:04d}-local",
    )
    candidate_score = candidate_session.wauc
    base.update(
        candidate_id=candidate.policy_id,
        candidate_score=candidate_score,
        candidate_meta_prompt=candidate.meta_prompt,
        candidate_parent_id=candidate.parent_id,
    )
    if candidate_score <= parent_score:
        return IterationRecord(**base, outcome="rejected_local", sessions_run=2)

    # Validation sessions are independent of each other (and could run in
    # parallel); the pool is mutated only after all of them complete.
    validation_scores: dict[str, float] = {}
    validation_errors: dict[str, str] = {}
    for task in config.val_task_ids:
        try:
            score = runner(
                candidate, task, val_seeds[task], ("global-validation",),
                f"it{iteration:04d}-val-{task}",
            ).wauc
        except Exception as exc:  # noqa: BLE001 - a failed session scores 0
            logger.warning(
                "iteration %d: validation session on %s failed: %s", iteration, task, exc
            )
            score = 0.0
            validation_errors[task] = str(exc)
        validation_scores[task] = score
    replaced: list[str] = []
    for task in config.val_task_ids:
        if validation_scores[task] > pool.entries[task].score:
            pool.update(task, candidate, validation_scores[task])
            replaced.append(task)
    return IterationRecord(
        **base,
        outcome="validated",
        validation_scores=validation_scores,
        validation_errors=validation_errors,
        replaced_tasks=tuple(replaced),
        sessions_run=2 + len(config.val_task_ids),
    )


@dataclass(frozen=True)
class GateFunnel:
    proposals: int
    locally_validated: int
    pool_improvements: int


@dataclass
class TrainResult:
    pool: ExpertPool
    selected: AdaptationPolicy
    records: list[IterationRecord]
    score_table: ScoreTable
    funnel: GateFunnel
    raw_ranking: list[tuple[str, float]]
    zscore_ranking: list[tuple[str, float]] | None
    zscore_unavailable_reason: str | None
    seed_scores: dict[str, float]


def build_selection_table(
    seed_policy_id: str,
    seed_scores: Mapping[str, float],
    records: Sequence[IterationRecord],
) -> ScoreTable:
    """Score rows for every candidate that reached global validation, plus
    the seed policy's own row."""
    rows: dict[str, dict[str, float]] = {seed_policy_id: dict(seed_scores)}
    for record in records:
        if record.outcome == "validated":
            rows[record.candidate_id] = dict(record.validation_scores)
    return ScoreTable(rows=rows)


def compute_funnel(records: Sequence[IterationRecord]) -> GateFunnel:
    return GateFunnel(
        proposals=len(records),
        locally_validated=sum(1 for r in records if r.outcome == "validated"),
        pool_improvements=sum(1 for r in records if r.replaced_tasks),
    )


def _policy_lookup(
    config: TrainConfig, pool: ExpertPool, records: Sequence[IterationRecord]
) -> dict[str, AdaptationPolicy]:
    policies = {config.seed_policy.policy_id: config.seed_policy}
    policies.update(pool.registry)
    for record in records:
        if record.candidate_id and record.candidate_meta_prompt:
            policies.setdefault(
                record.candidate_id,
                AdaptationPolicy(
                    policy_id=record.candidate_id,
                    meta_prompt=record.candidate_meta_prompt,
                    parent_id=record.candidate_parent_id,
                    created_at_iteration=record.iteration,
                    provenance="proposed",
                ),
            )
    return policies


def run_training(
    config: TrainConfig,
    runner: SessionRunner,
    propose_fn: ProposeFn,
    store: RunStore | None = None,
    run_config_payload: Mapping[str, object] | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> TrainResult:
    """Initialize (or resume) the pool, run the iteration budget, and select
    the deployment policy.

    With a store attached the run is resumable from any iteration boundary:
    completed iterations are read back instead of re-run, and an iteration
    without its terminal record is replayed from scratch.
    """
    records: list[IterationRecord] = []
    seed_scores: dict[str, float] = {}
    pool: ExpertPool | None = None
    next_iteration = 1
    selection_done = False
    snapshot_index = 0

    if store is not None:
        state = store.load_resume_point()
        if state.run_config is not None:
            if run_config_payload is not None and dict(state.run_config) != dict(
                run_config_payload
            ):
                raise ValueError(
                    "run directory was created with a different configuration; "
                    "refusing to resume"
                )
        elif run_config_payload is not None:
            store.append("run_config", run_config_payload)
        if state.init_done and state.pool_payload is not None:
            pool = ExpertPool.from_payload(state.pool_payload["pool"])
            seed_scores = dict(state.pool_payload["seed_scores"])
            snapshot_index = int(state.pool_payload["snapshot_index"])
            complete = [
                IterationRecord.from_payload(state.iteration_payloads[t])
                for t in sorted(state.iteration_payloads)
                if t < state.next_iteration
            ]
            records.extend(complete)
            next_iteration = state.next_iteration
            selection_done = state.selection_done

    if pool is None:
        pool, seed_scores = init_pool(config, runner)
        if store is not None:
            snapshot_index = 0
            store.write_pool_snapshot(
                snapshot_index,
                {"pool": pool.to_payload(), "seed_scores": dict(sorted(seed_scores.items())),
                 "snapshot_index": snapshot_index},
            )
            store.append(
                "pool_update",
                {"phase": "init", "snapshot": snapshot_index,
                 "scores": dict(sorted(seed_scores.items()))},
            )

    for t in range(next_iteration, config.iterations + 1):
        record = train_step(pool, config, t, runner, propose_fn)
        records.append(record)
        if store is not None:
            if record.outcome == "validated":
                store.append(
                    "validation_result",
                    {"iteration": t, "candidate_id": record.candidate_id,
                     "scores": dict(sorted(record.validation_scores.items())),
                     "errors": dict(sorted(record.validation_errors.items()))},
                )
            if record.replaced_tasks:
                snapshot_index += 1
                store.write_pool_snapshot(
                    snapshot_index,
                    {"pool": pool.to_payload(),
                     "seed_scores": dict(sorted(seed_scores.items())),
                     "snapshot_index": snapshot_index},
                )
                store.append(
                    "pool_update",
                    {"iteration": t, "snapshot": snapshot_index,
                     "replaced_tasks": list(record.replaced_tasks)},
                )
            payload = record.to_payload()
            payload["snapshot"] = snapshot_index
            store.append("proposal", payload)
        if on_iteration is not None:
            on_iteration(record)

    table = build_selection_table(config.seed_policy.policy_id, seed_scores, records)
    raw_rank = ranking_raw(table)
    z_rank: list[tuple[str, float]] | None
    z_reason: str | None = None
    try:
        z_rank = ranking_zscore(table)
    except DegenerateColumnError as exc:
        z_rank = None
        z_reason = str(exc)
    if config.selection_mode == "raw":
        selected_id = select_expert_raw(table)
    else:
        selected_id = select_expert_zscore(table)
    policies = _policy_lookup(config, pool, records)
    selected = policies[selected_id]
    funnel = compute_funnel(records)

    if store is not None and not selection_done:
        store.append(
            "selection",
            {"selected_policy_id": selected_id, "mode": config.selection_mode,
             "raw_ranking": [[cid, score] for cid, score in raw_rank],
             "zscore_ranking": (
                 [[cid, score] for cid, score in z_rank] if z_rank is not None else None
             ),
             "zscore_unavailable_reason": z_reason,
             "funnel": {"proposals": funnel.proposals,
                        "locally_validated": funnel.locally_validated,
                        "pool_improvements": funnel.pool_improvements}},
        )
    return TrainResult(
        pool=pool,
        selected=selected,
        records=records,
        score_table=table,
        funnel=funnel,
        raw_ranking=raw_rank,
        zscore_ranking=z_rank,
        zscore_unavailable_reason=z_reason,
        seed_scores=seed_scores,
    )
