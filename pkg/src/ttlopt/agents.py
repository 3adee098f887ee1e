"""The three backend-driven roles: the in-episode actor, the between-episode
meta-agent that rewrites the actor's guidance, and the proposer that mutates
meta-prompts, plus the unadapted baselines.

The actor's system prompt has two parts: fixed base instructions and a
mutable guidance section. Rewriting the guidance is the only mechanism any
role has for changing the actor's behavior.
"""

from __future__ import annotations

import hashlib
import logging
import re
import uuid
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template
from typing import Sequence

from .backends import Backend, BackendError, ChatMessage, GenerationRequest
from .core import AdaptationPolicy, Session, Step, TaskSpec, Trajectory

logger = logging.getLogger(__name__)

DEFAULT_SEED_TEXT = "analyze the game trajectory and provide feedback"
DEFAULT_INITIAL_GUIDANCE = "Play carefully and maximize score."

CANDIDATE_BEGIN = "BEGIN_CANDIDATE_PROMPT"
CANDIDATE_END = "END_CANDIDATE_PROMPT"

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_LEARN_RE = re.compile(r"<learn>(.*?)</learn>", re.DOTALL)

REPROMPT_SUFFIX = (
    "\n\nREMINDER: your previous reply was not in the required format. "
    "Reply again, following the format exactly."
)


class ActorError(RuntimeError):
    """The actor could not produce an action; the episode aborts."""


class MetaParseError(ValueError):
    pass


class ProposalFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplates:
    actor_system: str
    meta_context: str
    proposer_context: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptTemplates":
        def read(name: str) -> str:
            if directory is not None:
                return Path(directory, name).read_text(encoding="utf-8")
            return (
                resources.files("ttlopt").joinpath("templates", name).read_text("utf-8")
            )

        return cls(
            actor_system=read("actor_system.txt"),
            meta_context=read("meta_context.txt"),
            proposer_context=read("proposer_context.txt"),
        )

    def hashes(self) -> dict[str, str]:
        return {
            name: hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, text in (
                ("actor_system", self.actor_system),
                ("meta_context", self.meta_context),
                ("proposer_context", self.proposer_context),
            )
        }


@dataclass(frozen=True)
class ActorConfig:
    backend: Backend
    base_instructions: str
    guidance: str = DEFAULT_INITIAL_GUIDANCE
    max_context_steps: int = 8
    noop_action: str = "look"
    model_id: str = "actor"
    temperature: float = 0.7
    max_output_tokens: int = 256
    templates: PromptTemplates | None = None

    def resolved_templates(self) -> PromptTemplates:
        return self.templates if self.templates is not None else _default_templates()


@dataclass(frozen=True)
class MetaAgentConfig:
    backend: Backend
    templates: PromptTemplates
    model_id: str = "meta"
    temperature: float = 0.7
    max_output_tokens: int = 2048
    history_char_budget: int = 20000


@dataclass(frozen=True)
class ProposerConfig:
    backend: Backend
    templates: PromptTemplates
    model_id: str = "proposer"
    temperature: float = 1.0
    max_output_tokens: int = 4096
    session_char_budget: int = 30000


_TEMPLATE_CACHE: PromptTemplates | None = None


def _default_templates() -> PromptTemplates:
    global _TEMPLATE_CACHE
    if _TEMPLATE_CACHE is None:
        _TEMPLATE_CACHE = PromptTemplates.load()
    return _TEMPLATE_CACHE


def render_actor_prompt(actor: ActorConfig, guidance: str) -> str:
    return Template(actor.resolved_templates().actor_system).safe_substitute(
        base_instructions=actor.base_instructions, guidance=guidance
    )


@dataclass(frozen=True)
class AdaptationInput:
    meta_prompt: str
    current_actor_prompt: str
    current_guidance: str
    history: tuple[Trajectory, ...]
    max_return: float
    horizon: int
    episode_budget: int
    episodes_remaining: int

    def __post_init__(self):
        if not self.history:
            raise ValueError("adaptation needs at least one completed episode")
        if len(self.history) >= self.episode_budget:
            raise ValueError("adaptation is never invoked after the final episode")


@dataclass(frozen=True)
class MetaOutput:
    think: str
    learn: str


def parse_meta_output(raw: str) -> MetaOutput:
    """Extract the first <think> span (optional) and <learn> span (required)."""
    think_match = _THINK_RE.search(raw)
    learn_match = _LEARN_RE.search(raw)
    if learn_match is None:
        raise MetaParseError("no <learn>...</learn> span found")
    learn = learn_match.group(1).strip()
    if not learn:
        raise MetaParseError("<learn> span is empty")
    return MetaOutput(think=think_match.group(1).strip() if think_match else "", learn=learn)


def _oneline(text: str) -> str:
    return text.replace("\n", " / ")


def _episode_lines(trajectory: Trajectory) -> list[str]:
    lines = [f"=== Episode {trajectory.episode_index} ==="]
    for step in trajectory.steps:
        n = step.index + 1
        lines.append(f"[{n}] obs: {_oneline(step.observation)}")
        lines.append(f"[{n}] act: {step.action}")
        lines.append(f"[{n}] reward: {step.reward:g}")
    lines.append(
        f"Episode {trajectory.episode_index} final return: {trajectory.episode_return:g}"
    )
    return lines


def _omitted_episode_lines(trajectory: Trajectory) -> list[str]:
    return [
        f"=== Episode {trajectory.episode_index} (transcript omitted) ===",
        f"Episode {trajectory.episode_index} final return: {trajectory.episode_return:g}",
    ]


def serialize_history(history: Sequence[Trajectory], char_budget: int = 20000) -> str:
    """Render episode transcripts oldest-first for the meta-agent.

    When over budget, whole early transcripts are dropped first, then the
    middle of the oldest retained transcript; every episode's final score
    line survives any truncation.
    """
    blocks = [_episode_lines(t) for t in history]

    def total(bs: list[list[str]]) -> int:
        return sum(len(line) + 1 for b in bs for line in b)

    dropped = 0
    while total(blocks) > char_budget and dropped < len(history) - 1:
        blocks[dropped] = _omitted_episode_lines(history[dropped])
        dropped += 1
    if total(blocks) > char_budget and dropped < len(history):
        oldest = blocks[dropped]
        # Keep the header, a head and tail of steps, and the score line.
        body = oldest[1:-1]
        head, tail = 3, 3
        if len(body) > head + tail:
            omitted = len(body) - head - tail
            marker = f"[... {omitted} lines omitted ...]"
            blocks[dropped] = [oldest[0], *body[:head], marker, *body[-tail:], oldest[-1]]
    return "\n".join(line for block in blocks for line in block)


def serialize_session(session: Session, char_budget: int = 30000) -> str:
    """Render a full session record, including the prompt each episode ran
    under, for the proposer."""
    lines = [
        f"task: {session.task_id}",
        f"policy: {session.policy_id}",
        f"session score (weighted learning curve): {session.wauc:g}",
    ]
    for trajectory, prompt in zip(session.trajectories, session.actor_prompts):
        lines.append(f"--- episode {trajectory.episode_index} actor prompt ---")
        lines.append(_oneline(prompt))
    lines.append("--- transcripts ---")
    lines.append(serialize_history(session.trajectories, char_budget=char_budget))
    return "\n".join(lines)


def act(
    actor: ActorConfig,
    guidance: str,
    episode_so_far: Sequence[Step],
    observation: str,
) -> str:
    """Pick the next environment action: first non-empty completion line.

    Raises ActorError when the backend fails; an empty completion falls back
    to the configured no-op action.
    """
    if not observation:
        raise ValueError("observation must be non-empty")
    recent = list(episode_so_far)[-actor.max_context_steps :] if actor.max_context_steps else []
    parts = []
    if recent:
        parts.append("Recent steps:")
        for step in recent:
            parts.append(f"[{step.index + 1}] obs: {_oneline(step.observation)}")
            parts.append(f"[{step.index + 1}] act: {step.action} (reward {step.reward:g})")
    parts.append("Current observation:")
    parts.append(observation)
    parts.append("Your next action (reply with a single command line):")
    request = GenerationRequest(
        messages=(
            ChatMessage("system", render_actor_prompt(actor, guidance)),
            ChatMessage("user", "\n".join(parts)),
        ),
        model_id=actor.model_id,
        temperature=actor.temperature,
        max_output_tokens=actor.max_output_tokens,
    )
    try:
        completion = actor.backend.generate(request)
    except BackendError as exc:
        raise ActorError(f"actor backend failed: {exc}") from exc
    for line in completion.splitlines():
        line = line.strip()
        if line:
            return line
    logger.warning("empty actor completion; substituting no-op action %r", actor.noop_action)
    return actor.noop_action


def render_meta_context(inputs: AdaptationInput, meta: MetaAgentConfig) -> str:
    return Template(meta.templates.meta_context).safe_substitute(
        max_return=f"{inputs.max_return:g}",
        horizon=str(inputs.horizon),
        episode_budget=str(inputs.episode_budget),
        episodes_remaining=str(inputs.episodes_remaining),
        current_actor_prompt=inputs.current_actor_prompt,
        history=serialize_history(inputs.history, char_budget=meta.history_char_budget),
    )


def adapt(inputs: AdaptationInput, meta: MetaAgentConfig) -> str:
    """Ask the meta-agent for the next episode's guidance.

    Any failure mode (backend error, malformed output after one reprompt)
    returns the previous guidance unchanged so the session always proceeds
    with a previously-valid prompt.
    """
    user = render_meta_context(inputs, meta)
    for attempt, user_text in enumerate((user, user + REPROMPT_SUFFIX)):
        request = GenerationRequest(
            messages=(
                ChatMessage("system", inputs.meta_prompt),
                ChatMessage("user", user_text),
            ),
            model_id=meta.model_id,
            temperature=meta.temperature,
            max_output_tokens=meta.max_output_tokens,
        )
        try:
            raw = meta.backend.generate(request)
        except BackendError as exc:
            logger.warning("meta backend failed; keeping previous guidance: %s", exc)
            return inputs.current_guidance
        try:
            return parse_meta_output(raw).learn
        except MetaParseError as exc:
            logger.warning("meta output unparseable (attempt %d): %s", attempt + 1, exc)
    logger.warning("meta output unparseable after reprompt; keeping previous guidance")
    return inputs.current_guidance


def extract_candidate(raw: str) -> str:
    """Pull the text between the candidate sentinel lines."""
    lines = raw.splitlines()
    try:
        begin = next(i for i, line in enumerate(lines) if line.strip() == CANDIDATE_BEGIN)
        end = next(
            i for i, line in enumerate(lines) if i > begin and line.strip() == CANDIDATE_END
        )
    except StopIteration:
        raise ProposalFailedError("candidate sentinels not found in proposer output")
    candidate = "\n".join(lines[begin + 1 : end]).strip()
    if not candidate:
        raise ProposalFailedError("candidate text between sentinels is empty")
    return candidate


def propose(
    parent: AdaptationPolicy,
    session: Session,
    proposer: ProposerConfig,
    candidate_id: str | None = None,
    iteration: int = 0,
) -> AdaptationPolicy:
    """Mutate the parent meta-prompt after reading its session.

    Raises ProposalFailedError if the candidate cannot be extracted after
    one reprompt; the caller counts the iteration and moves on.
    """
    returns = ", ".join(f"{r:g}" for r in session.episode_returns)
    user = Template(proposer.templates.proposer_context).safe_substitute(
        parent_prompt=parent.meta_prompt,
        session_record=serialize_session(session, char_budget=proposer.session_char_budget),
        episode_scores=returns,
        wauc=f"{session.wauc:g}",
    )
    last_error: ProposalFailedError | None = None
    for user_text in (user, user + REPROMPT_SUFFIX):
        request = GenerationRequest(
            messages=(
                ChatMessage("system", "You revise instructions for adaptation agents."),
                ChatMessage("user", user_text),
            ),
            model_id=proposer.model_id,
            temperature=proposer.temperature,
            max_output_tokens=proposer.max_output_tokens,
        )
        try:
            raw = proposer.backend.generate(request)
        except BackendError as exc:
            raise ProposalFailedError(f"proposer backend failed: {exc}") from exc
        try:
            text = extract_candidate(raw)
            return AdaptationPolicy(
                policy_id=candidate_id or f"{parent.policy_id}.{uuid.uuid4().hex[:8]}",
                meta_prompt=text,
                parent_id=parent.policy_id,
                created_at_iteration=iteration,
                provenance="proposed",
            )
        except ProposalFailedError as exc:
            last_error = exc
    raise ProposalFailedError(f"proposal failed after reprompt: {last_error}")


def make_naive_policy(
    seed_text: str = DEFAULT_SEED_TEXT, policy_id: str | None = None
) -> AdaptationPolicy:
    """The unoptimized seed policy; running sessions with it is the Naive
    baseline, and it is the root every evolved policy descends from."""
    if not seed_text:
        raise ValueError("seed text must be non-empty")
    return AdaptationPolicy(
        policy_id=policy_id or f"seed-{uuid.uuid4().hex[:8]}",
        meta_prompt=seed_text,
        parent_id=None,
        created_at_iteration=0,
        provenance="seed",
    )


def run_baseline_static(
    task: TaskSpec,
    actor: ActorConfig,
    run_seed: int = 0,
    recorder=None,
    tags: tuple[str, ...] = ("baseline", "static"),
) -> Session:
    """Run a session with the guidance frozen at its initial value; no
    meta-agent calls occur."""
    from .ttl import SessionRequest, run_ttl

    request = SessionRequest(task=task, policy=None, actor=actor, run_seed=run_seed, tags=tags)
    return run_ttl(request, meta=None, recorder=recorder)
