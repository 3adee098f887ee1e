"""Shared domain types, the session learning-curve metric, and expert selection.

Everything here is an immutable value or a pure function; callers may use
these from any number of workers without coordination.
"""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TERMINATION_KINDS = ("env_done", "horizon_exhausted", "aborted")
PROVENANCE_KINDS = ("seed", "proposed", "manual")


class DegenerateColumnError(ValueError):
    """A score column has no usable spread, so z-scoring it is meaningless."""

    def __init__(self, task_id: str, detail: str):
        self.task_id = task_id
        super().__init__(f"degenerate score column for task {task_id!r}: {detail}")


@dataclass(frozen=True)
class TaskSpec:
    """One episodic task instance: which environment, and its session budget."""

    task_id: str
    env_kind: str
    env_config: Mapping[str, object]
    horizon: int
    episode_budget: int
    max_return: float
    split: str = "train"

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.episode_budget < 1:
            raise ValueError(f"episode_budget must be >= 1, got {self.episode_budget}")
        if self.max_return <= 0:
            raise ValueError(f"max_return must be > 0, got {self.max_return}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class Step:
    """One (observation, action, reward) transition inside an episode."""

    index: int
    observation: str
    action: str
    reward: float
    cumulative_return: float


@dataclass(frozen=True)
class Trajectory:
    """One complete episode rollout and its return."""

    episode_index: int
    steps: tuple[Step, ...]
    episode_return: float
    terminated: str

    def __post_init__(self):
        if self.terminated not in TERMINATION_KINDS:
            raise ValueError(
                f"terminated must be one of {TERMINATION_KINDS}, got {self.terminated!r}"
            )
        expected = self.steps[-1].cumulative_return if self.steps else 0.0
        if abs(self.episode_return - expected) > 1e-9:
            raise ValueError(
                f"episode_return {self.episode_return} != final cumulative return {expected}"
            )


@dataclass(frozen=True)
class Session:
    """K consecutive episodes on one task plus the prompts that governed them."""

    task_id: str
    policy_id: str
    trajectories: tuple[Trajectory, ...]
    actor_prompts: tuple[str, ...]
    wauc: float

    def __post_init__(self):
        for i, traj in enumerate(self.trajectories):
            if traj.episode_index != i + 1:
                raise ValueError(
                    f"trajectory at position {i} has episode_index {traj.episode_index}"
                )
        if len(self.actor_prompts) != len(self.trajectories):
            raise ValueError("one actor prompt required per episode")

    @property
    def episode_returns(self) -> tuple[float, ...]:
        return tuple(t.episode_return for t in self.trajectories)


@dataclass(frozen=True)
class AdaptationPolicy:
    """A meta-prompt plus the lineage metadata of how it was obtained."""

    policy_id: str
    meta_prompt: str
    parent_id: str | None = None
    created_at_iteration: int = 0
    provenance: str = "seed"

    def __post_init__(self):
        if self.provenance not in PROVENANCE_KINDS:
            raise ValueError(
                f"provenance must be one of {PROVENANCE_KINDS}, got {self.provenance!r}"
            )
        if (self.provenance == "seed") != (self.parent_id is None):
            raise ValueError("seed policies have no parent; non-seed policies require one")
        if not self.meta_prompt:
            raise ValueError("meta_prompt must be non-empty")


@dataclass(frozen=True)
class ScoreTable:
    """Rectangular candidate-by-task score table."""

    rows: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        task_sets = {frozenset(row) for row in self.rows.values()}
        if len(task_sets) > 1:
            raise ValueError("all candidates must cover the same task-id set")

    @property
    def candidate_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.rows))

    @property
    def task_ids(self) -> tuple[str, ...]:
        if not self.rows:
            return ()
        any_row = next(iter(self.rows.values()))
        return tuple(sorted(any_row))

    def score(self, candidate_id: str, task_id: str) -> float:
        return self.rows[candidate_id][task_id]

    def write_csv(self, path: str | Path) -> None:
        tasks = self.task_ids
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["candidate_id", *tasks])
            for cid in self.candidate_ids:
                writer.writerow([cid, *[str(self.rows[cid][t]) for t in tasks]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "ScoreTable":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "candidate_id":
                raise ValueError(f"score table {path}: first column must be candidate_id")
            tasks = header[1:]
            rows: dict[str, dict[str, float]] = {}
            for line in reader:
                if not line:
                    continue
                if len(line) != len(tasks) + 1:
                    raise ValueError(f"score table {path}: ragged row {line!r}")
                rows[line[0]] = {t: float(v) for t, v in zip(tasks, line[1:])}
        return cls(rows=rows)


def score_wauc(trajectories: Sequence[Trajectory], max_return: float) -> float:
    """Score a session by its late-weighted learning curve.

    Episode k is weighted by k and the total is normalized by the weighted
    maximum achievable return, so sustained improvement scores higher than a
    lucky early episode. Returns outside [0, max_return] are passed through
    arithmetically (a warning is logged); the result is in [0, 1] only when
    every return is in range.
    """
    if not trajectories:
        raise ValueError("cannot score an empty trajectory list")
    if max_return <= 0:
        raise ValueError(f"max_return must be > 0, got {max_return}")
    numerator = 0.0
    denominator = 0.0
    for k, traj in enumerate(trajectories, start=1):
        if not 0.0 <= traj.episode_return <= max_return:
            logger.warning(
                "episode %d return %s outside [0, %s]; passing through unclamped",
                k,
                traj.episode_return,
                max_return,
            )
        numerator += k * traj.episode_return
        denominator += k * max_return
    return numerator / denominator


def average_score(trajectories: Sequence[Trajectory]) -> float:
    """Unweighted mean of episode returns (the plain companion to score_wauc)."""
    if not trajectories:
        raise ValueError("cannot average an empty trajectory list")
    return sum(t.episode_return for t in trajectories) / len(trajectories)


def zscore_normalize(
    table: ScoreTable,
    stats: Mapping[str, tuple[float, float]] | None = None,
) -> ScoreTable:
    """Standardize each task column to zero mean and unit spread.

    By default the per-task mean and population standard deviation are
    computed over all candidates in the table; pass ``stats`` as
    ``{task_id: (mean, stddev)}`` to normalize against externally supplied
    statistics instead. A column with zero spread (or too few candidates to
    estimate spread) raises DegenerateColumnError naming the task.
    """
    if not table.rows:
        raise ValueError("cannot normalize an empty score table")
    tasks = table.task_ids
    candidates = table.candidate_ids
    resolved: dict[str, tuple[float, float]] = {}
    for task in tasks:
        if stats is not None:
            if task not in stats:
                raise ValueError(f"no statistics supplied for task {task!r}")
            mu, sigma = stats[task]
        else:
            column = [table.rows[c][task] for c in candidates]
            if len(column) < 2:
                raise DegenerateColumnError(
                    task, "need at least 2 candidates to estimate spread"
                )
            mu = statistics.fmean(column)
            sigma = statistics.pstdev(column)
        if sigma <= 0:
            raise DegenerateColumnError(task, f"standard deviation is {sigma}")
        resolved[task] = (mu, sigma)
    z_rows = {
        cid: {
            task: (table.rows[cid][task] - resolved[task][0]) / resolved[task][1]
            for task in tasks
        }
        for cid in candidates
    }
    return ScoreTable(rows=z_rows)


def _mean_ranking(table: ScoreTable) -> list[tuple[str, float]]:
    means = {
        cid: statistics.fmean(table.rows[cid].values()) for cid in table.candidate_ids
    }
    return sorted(means.items(), key=lambda item: (-item[1], item[0]))


def select_expert_raw(table: ScoreTable) -> str:
    """Candidate with the highest unweighted mean score; ties go to the
    lexicographically smallest candidate id."""
    if not table.rows:
        raise ValueError("cannot select from an empty score table")
    return _mean_ranking(table)[0][0]


def select_expert_zscore(
    table: ScoreTable,
    stats: Mapping[str, tuple[float, float]] | None = None,
) -> str:
    """Candidate with the highest mean per-task z-score; same tie-break as
    select_expert_raw."""
    return select_expert_raw(zscore_normalize(table, stats=stats))


def ranking_raw(table: ScoreTable) -> list[tuple[str, float]]:
    """Candidates ordered by descending mean raw score (id breaks ties)."""
    if not table.rows:
        raise ValueError("cannot rank an empty score table")
    return _mean_ranking(table)


def ranking_zscore(
    table: ScoreTable,
    stats: Mapping[str, tuple[float, float]] | None = None,
) -> list[tuple[str, float]]:
    """Candidates ordered by descending mean z-score (id breaks ties)."""
    return _mean_ranking(zscore_normalize(table, stats=stats))
