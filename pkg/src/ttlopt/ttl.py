"""Run one test-time-learning session: K episodes on one task, with the
meta-agent rewriting the actor's guidance between episodes.

A crashed episode is a bad episode, not a crashed experiment: actor failures
abort the episode (recorded as such, return kept as accrued) and the session
continues, so outer-loop comparisons are never killed by infrastructure
noise.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

from .agents import (
    ActorConfig,
    ActorError,
    AdaptationInput,
    MetaAgentConfig,
    act,
    adapt,
    render_actor_prompt,
)
from .core import AdaptationPolicy, Session, Step, TaskSpec, Trajectory, score_wauc
from .envs import Environment, make_env
from .store import SessionRecorder

logger = logging.getLogger(__name__)

STATIC_POLICY_ID = "static"


@dataclass(frozen=True)
class SessionRequest:
    task: TaskSpec
    policy: AdaptationPolicy | None  # None runs the static baseline
    actor: ActorConfig
    run_seed: int = 0
    tags: tuple[str, ...] = ()


def run_episode(
    env: Environment,
    actor: ActorConfig,
    guidance: str,
    horizon: int,
    episode_index: int = 1,
    on_step: Callable[[Step], None] | None = None,
) -> Trajectory:
    """Reset, then loop act/step until the environment ends the episode or
    the horizon is reached."""
    observation = env.reset()
    steps: list[Step] = []
    cumulative = 0.0
    terminated = "horizon_exhausted"
    while not observation.done and len(steps) < horizon:
        try:
            action = act(actor, guidance, steps, observation.text)
        except ActorError as exc:
            logger.warning("episode %d aborted: %s", episode_index, exc)
            terminated = "aborted"
            break
        observation_before = observation.text
        observation = env.step(action)
        cumulative += observation.reward
        step = Step(
            index=len(steps),
            observation=observation_before,
            action=action,
            reward=observation.reward,
            cumulative_return=cumulative,
        )
        steps.append(step)
        if on_step is not None:
            on_step(step)
    if observation.done and terminated != "aborted":
        terminated = "horizon_exhausted" if env.ended_by_horizon else "env_done"
    return Trajectory(
        episode_index=episode_index,
        steps=tuple(steps),
        episode_return=cumulative,
        terminated=terminated,
    )


def run_ttl(
    request: SessionRequest,
    meta: MetaAgentConfig | None = None,
    recorder: SessionRecorder | None = None,
    env_factory: Callable[[TaskSpec], Environment] = make_env,
    timeout_s: float | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> Session:
    """Run the K-episode inner loop and score it.

    After every episode but the last, the meta-agent reads the full history
    and rewrites the guidance for the next episode. Every episode, step,
    and guidance revision is appended to the recorder before the next
    begins.
    """
    task = request.task
    if request.policy is not None and meta is None:
        raise ValueError("a meta-agent configuration is required to run a policy")
    policy_id = request.policy.policy_id if request.policy else STATIC_POLICY_ID
    env = env_factory(task)
    deadline = clock() + timeout_s if timeout_s is not None else None
    guidance = request.actor.guidance
    trajectories: list[Trajectory] = []
    prompts: list[str] = []
    try:
        for k in range(1, task.episode_budget + 1):
            prompt = render_actor_prompt(request.actor, guidance)
            prompts.append(prompt)
            if recorder is not None:
                recorder.episode_start(k, prompt, guidance)
            if deadline is not None and clock() > deadline:
                logger.warning("session timeout; marking episode %d aborted", k)
                trajectory = Trajectory(
                    episode_index=k, steps=(), episode_return=0.0, terminated="aborted"
                )
                if recorder is not None:
                    recorder.episode_end(k, 0.0, "aborted", note="session timeout")
            else:
                on_step = None
                if recorder is not None:
                    on_step = lambda step, k=k: recorder.step(
                        k, step.index, step.observation, step.action,
                        step.reward, step.cumulative_return,
                    )
                trajectory = run_episode(
                    env, request.actor, guidance, task.horizon,
                    episode_index=k, on_step=on_step,
                )
                if recorder is not None:
                    recorder.episode_end(k, trajectory.episode_return, trajectory.terminated)
            trajectories.append(trajectory)
            if k < task.episode_budget and request.policy is not None:
                calls_before = meta.backend.stats.calls
                new_guidance = adapt(
                    AdaptationInput(
                        meta_prompt=request.policy.meta_prompt,
                        current_actor_prompt=prompt,
                        current_guidance=guidance,
                        history=tuple(trajectories),
                        max_return=task.max_return,
                        horizon=task.horizon,
                        episode_budget=task.episode_budget,
                        episodes_remaining=task.episode_budget - k,
                    ),
                    meta,
                )
                if recorder is not None:
                    recorder.adapt_event(
                        k, guidance, new_guidance,
                        calls_used=meta.backend.stats.calls - calls_before,
                    )
                guidance = new_guidance
    finally:
        env.close()
    return Session(
        task_id=task.task_id,
        policy_id=policy_id,
        trajectories=tuple(trajectories),
        actor_prompts=tuple(prompts),
        wauc=score_wauc(trajectories, task.max_return),
    )
