"""Run-configuration file: one JSON document describing tasks, backends,
role bindings, and training settings, plus the wiring that turns it into
live objects.

Parsing and re-serializing a config is idempotent, and the payload logged
with each run omits filesystem paths and resolved secrets (API keys are
referenced by environment-variable name only).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .agents import (
    DEFAULT_INITIAL_GUIDANCE,
    DEFAULT_SEED_TEXT,
    ActorConfig,
    MetaAgentConfig,
    PromptTemplates,
    ProposerConfig,
    make_naive_policy,
)
from .backends import Backend, HttpBackend, ScriptedBackend, with_retries
from .core import SPLITS, TaskSpec
from .metatrain import PARENT_SAMPLING_RULES, SELECTION_MODES, TrainConfig

DEFAULT_BASE_INSTRUCTIONS = (
    "You control an agent in a text environment. Read the observation and "
    "reply with exactly one command."
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendDef:
    kind: str  # scripted | http
    rules: tuple[dict, ...] = ()
    default_response: str = ""
    base_url: str = ""
    headers: Mapping[str, str] = field(default_factory=dict)
    api_key_env: str | None = None
    timeout_s: float = 60.0
    max_in_flight: int = 4
    max_attempts: int = 3

    def build(self) -> Backend:
        if self.kind == "scripted":
            return ScriptedBackend.from_spec(
                {"rules": list(self.rules), "default_response": self.default_response}
            )
        if self.kind == "http":
            backend = HttpBackend(
                base_url=self.base_url,
                headers=dict(self.headers),
                api_key_env=self.api_key_env,
                timeout_s=self.timeout_s,
                max_in_flight=self.max_in_flight,
            )
            if self.max_attempts > 1:
                return with_retries(backend, max_attempts=self.max_attempts)
            return backend
        raise ConfigError(f"unknown backend kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "scripted":
            return {
                "kind": self.kind,
                "rules": [dict(r) for r in self.rules],
                "default_response": self.default_response,
            }
        return {
            "kind": self.kind,
            "base_url": self.base_url,
            "headers": dict(self.headers),
            "api_key_env": self.api_key_env,
            "timeout_s": self.timeout_s,
            "max_in_flight": self.max_in_flight,
            "max_attempts": self.max_attempts,
        }


@dataclass(frozen=True)
class RoleDef:
    backend: str
    model_id: str
    temperature: float
    max_output_tokens: int
    extras: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            **dict(self.extras),
        }


@dataclass(frozen=True)
class RunConfig:
    tasks: Mapping[str, TaskSpec]
    backends: Mapping[str, BackendDef]
    actor: RoleDef
    meta: RoleDef
    proposer: RoleDef
    train: Mapping[str, object]
    eval_tasks: tuple[str, ...]
    output_dir: str
    templates_dir: str | None
    session_timeout_s: float | None
    deterministic_log_clock: bool | None

    def __post_init__(self):
        for role_name, role in (("actor", self.actor), ("meta", self.meta),
                                ("proposer", self.proposer)):
            if role.backend not in self.backends:
                raise ConfigError(
                    f"role {role_name!r} binds to undefined backend {role.backend!r}"
                )
        referenced = list(self.train.get("train_tasks", []))
        referenced += list(self.train.get("val_tasks", []))
        referenced += list(self.eval_tasks)
        for task_id in referenced:
            if task_id not in self.tasks:
                raise ConfigError(f"referenced task id {task_id!r} is not defined")

    # -- (de)serialization -------------------------------------------------

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "RunConfig":
        try:
            tasks = {
                task_id: TaskSpec(
                    task_id=task_id,
                    env_kind=str(body["env_kind"]),
                    env_config=body.get("env_config", {}),
                    horizon=int(body["horizon"]),
                    episode_budget=int(body["episode_budget"]),
                    max_return=float(body["max_return"]),
                    split=str(body.get("split", "train")),
                )
                for task_id, body in raw.get("tasks", {}).items()
            }
            backends = {
                name: BackendDef(
                    kind=str(body["kind"]),
                    rules=tuple(body.get("rules", [])),
                    default_response=str(body.get("default_response", "")),
                    base_url=str(body.get("base_url", "")),
                    headers=dict(body.get("headers", {})),
                    api_key_env=body.get("api_key_env"),
                    timeout_s=float(body.get("timeout_s", 60.0)),
                    max_in_flight=int(body.get("max_in_flight", 4)),
                    max_attempts=int(body.get("max_attempts", 3)),
                )
                for name, body in raw.get("backends", {}).items()
            }

            def role(name: str, defaults: dict) -> RoleDef:
                body = dict(raw.get(name, {}))
                merged = {**defaults, **body}
                known = ("backend", "model_id", "temperature", "max_output_tokens")
                return RoleDef(
                    backend=str(merged["backend"]),
                    model_id=str(merged["model_id"]),
                    temperature=float(merged["temperature"]),
                    max_output_tokens=int(merged["max_output_tokens"]),
                    extras={k: v for k, v in merged.items() if k not in known},
                )

            actor = role("actor", {"model_id": "actor", "temperature": 0.7,
                                   "max_output_tokens": 256})
            meta = role("meta", {"model_id": "meta", "temperature": 0.7,
                                 "max_output_tokens": 2048})
            proposer = role("proposer", {"model_id": "proposer", "temperature": 1.0,
                                         "max_output_tokens": 4096})
            train = dict(raw.get("train", {}))
            config = cls(
                tasks=tasks,
                backends=backends,
                actor=actor,
                meta=meta,
                proposer=proposer,
                train=train,
                eval_tasks=tuple(raw.get("eval_tasks", [])),
                output_dir=str(raw.get("output_dir", "runs")),
                templates_dir=raw.get("templates_dir"),
                session_timeout_s=raw.get("session_timeout_s"),
                deterministic_log_clock=raw.get("deterministic_log_clock"),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"malformed run config: {exc}") from exc
        if train:
            config.train_config()  # fail fast on bad training settings
        return config

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "tasks": {
                task_id: {
                    "env_kind": spec.env_kind,
                    "env_config": spec.env_config,
                    "horizon": spec.horizon,
                    "episode_budget": spec.episode_budget,
                    "max_return": spec.max_return,
                    "split": spec.split,
                }
                for task_id, spec in self.tasks.items()
            },
            "backends": {name: b.to_dict() for name, b in self.backends.items()},
            "actor": self.actor.to_dict(),
            "meta": self.meta.to_dict(),
            "proposer": self.proposer.to_dict(),
            "train": dict(self.train),
            "eval_tasks": list(self.eval_tasks),
            "output_dir": self.output_dir,
            "templates_dir": self.templates_dir,
            "session_timeout_s": self.session_timeout_s,
            "deterministic_log_clock": self.deterministic_log_clock,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # -- semantics ---------------------------------------------------------

    def train_config(self, seed_policy=None) -> TrainConfig:
        train = self.train
        if not train:
            raise ConfigError("config has no 'train' section")
        mode = str(train.get("selection_mode", "raw"))
        if mode not in SELECTION_MODES:
            raise ConfigError(f"selection_mode must be one of {SELECTION_MODES}")
        sampling = str(train.get("parent_sampling", "uniform_distinct"))
        if sampling not in PARENT_SAMPLING_RULES:
            raise ConfigError(f"parent_sampling must be one of {PARENT_SAMPLING_RULES}")
        if seed_policy is None:
            seed_policy = make_naive_policy(
                seed_text=str(train.get("seed_policy_text", DEFAULT_SEED_TEXT)),
                policy_id="seed",
            )
        try:
            return TrainConfig(
                train_task_ids=tuple(train.get("train_tasks", [])),
                val_task_ids=tuple(train.get("val_tasks", [])),
                iterations=int(train.get("iterations", 1)),
                seed_policy=seed_policy,
                selection_mode=mode,
                parent_sampling=sampling,
                random_seed=int(train.get("random_seed", 0)),
                reuse_parent_seed=bool(train.get("reuse_parent_seed", True)),
            )
        except ValueError as exc:
            raise ConfigError(f"bad training settings: {exc}") from exc

    def is_deterministic(self) -> bool:
        if self.deterministic_log_clock is not None:
            return bool(self.deterministic_log_clock)
        return all(b.kind == "scripted" for b in self.backends.values())

    def log_clock(self):
        return (lambda: 0.0) if self.is_deterministic() else time.time

    def loggable_payload(self) -> dict:
        """What gets written into the run_config record: no paths, no
        resolved secrets."""
        body = self.to_dict()
        body.pop("output_dir", None)
        body.pop("templates_dir", None)
        templates = self.load_templates()
        return {"schema_version": 1, "template_hashes": templates.hashes(), **body}

    def load_templates(self) -> PromptTemplates:
        return PromptTemplates.load(self.templates_dir)


@dataclass
class Runtime:
    """Live objects assembled from a RunConfig."""

    config: RunConfig
    tasks: Mapping[str, TaskSpec]
    backends: Mapping[str, Backend]
    templates: PromptTemplates
    actor: ActorConfig
    meta: MetaAgentConfig
    proposer: ProposerConfig

    def tasks_in_split(self, split: str) -> list[TaskSpec]:
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        if self.config.eval_tasks:
            chosen = [self.tasks[t] for t in self.config.eval_tasks]
            return [t for t in chosen if t.split == split]
        return [t for t in self.tasks.values() if t.split == split]


def build_runtime(config: RunConfig) -> Runtime:
    backends = {name: spec.build() for name, spec in config.backends.items()}
    templates = config.load_templates()
    actor_extras = dict(config.actor.extras)
    actor = ActorConfig(
        backend=backends[config.actor.backend],
        base_instructions=str(actor_extras.get("base_instructions", DEFAULT_BASE_INSTRUCTIONS)),
        guidance=str(actor_extras.get("guidance", DEFAULT_INITIAL_GUIDANCE)),
        max_context_steps=int(actor_extras.get("max_context_steps", 8)),
        noop_action=str(actor_extras.get("noop_action", "look")),
        model_id=config.actor.model_id,
        temperature=config.actor.temperature,
        max_output_tokens=config.actor.max_output_tokens,
        templates=templates,
    )
    meta = MetaAgentConfig(
        backend=backends[config.meta.backend],
        templates=templates,
        model_id=config.meta.model_id,
        temperature=config.meta.temperature,
        max_output_tokens=config.meta.max_output_tokens,
        history_char_budget=int(config.meta.extras.get("history_char_budget", 20000)),
    )
    proposer = ProposerConfig(
        backend=backends[config.proposer.backend],
        templates=templates,
        model_id=config.proposer.model_id,
        temperature=config.proposer.temperature,
        max_output_tokens=config.proposer.max_output_tokens,
        session_char_budget=int(config.proposer.extras.get("session_char_budget", 30000)),
    )
    return Runtime(
        config=config,
        tasks=config.tasks,
        backends=backends,
        templates=templates,
        actor=actor,
        meta=meta,
        proposer=proposer,
    )
