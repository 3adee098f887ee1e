"""Learning between-episode adaptation policies for episodic language agents.

An inner loop runs multi-episode sessions in which a meta-agent rewrites the
actor's system prompt after every episode; an outer evolutionary loop
mutates the meta-agent's governing meta-prompt, gates candidates on local
improvement, and keeps a per-task pool of the best policies found.
"""

from .agents import (
    ActorConfig,
    AdaptationInput,
    MetaAgentConfig,
    MetaOutput,
    PromptTemplates,
    ProposerConfig,
    act,
    adapt,
    make_naive_policy,
    parse_meta_output,
    propose,
    run_baseline_static,
)
from .backends import (
    Backend,
    ChatMessage,
    GenerationRequest,
    HttpBackend,
    ScriptedBackend,
    ScriptedRule,
    with_retries,
)
from .core import (
    AdaptationPolicy,
    DegenerateColumnError,
    ScoreTable,
    Session,
    Step,
    TaskSpec,
    Trajectory,
    average_score,
    score_wauc,
    select_expert_raw,
    select_expert_zscore,
    zscore_normalize,
)
from .envs import Environment, Observation, make_env
from .metatrain import (
    ExpertPool,
    IterationRecord,
    TrainConfig,
    init_pool,
    run_training,
    sample_parent,
    train_step,
)
from .store import RunStore, SessionRecorder
from .ttl import SessionRequest, run_episode, run_ttl

__all__ = [
    "ActorConfig",
    "AdaptationInput",
    "AdaptationPolicy",
    "Backend",
    "ChatMessage",
    "DegenerateColumnError",
    "Environment",
    "ExpertPool",
    "GenerationRequest",
    "HttpBackend",
    "IterationRecord",
    "MetaAgentConfig",
    "MetaOutput",
    "Observation",
    "PromptTemplates",
    "ProposerConfig",
    "RunStore",
    "ScoreTable",
    "ScriptedBackend",
    "ScriptedRule",
    "Session",
    "SessionRecorder",
    "SessionRequest",
    "Step",
    "TaskSpec",
    "TrainConfig",
    "Trajectory",
    "act",
    "adapt",
    "average_score",
    "init_pool",
    "make_env",
    "make_naive_policy",
    "parse_meta_output",
    "propose",
    "run_baseline_static",
    "run_episode",
    "run_training",
    "run_ttl",
    "sample_parent",
    "score_wauc",
    "select_expert_raw",
    "select_expert_zscore",
    "train_step",
    "with_retries",
    "zscore_normalize",
]

__version__ = "0.1.0"
