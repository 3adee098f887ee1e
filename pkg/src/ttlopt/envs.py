"""Episodic environments: the handle contract, two built-in deterministic
games, and a stdio adapter for external environments.

gridquest gives dense per-action rewards; formfill gives a single binary
reward at episode end. Both are fully deterministic so sessions are exactly
replayable. The external adapter speaks newline-delimited JSON over a child
process's stdin/stdout so non-Python environments can be plugged in without
touching this package.
"""

from __future__ import annotations

import json
import math
import subprocess
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .core import TaskSpec


class EnvError(Exception):
    pass


class UnknownEnvironmentError(EnvError):
    pass


class EnvConfigError(EnvError):
    pass


class StepAfterDoneError(EnvError):
    pass


class AdapterError(EnvError):
    """External adapter unreachable or speaking the protocol incorrectly."""


@dataclass(frozen=True)
class Observation:
    text: str
    done: bool = False
    reward: float = 0.0


class Environment(ABC):
    """One episode-at-a-time environment handle.

    A handle is single-session: one in-flight operation at a time, owned by
    one worker. reset() discards all episode state; step() after done raises.
    """

    max_return: float
    horizon: int

    @abstractmethod
    def reset(self) -> Observation: ...

    @abstractmethod
    def step(self, action: str) -> Observation: ...

    @property
    def ended_by_horizon(self) -> bool:
        """Whether the last done=True was forced by the step limit rather
        than a terminal state. External environments may not know; default
        False."""
        return False

    def close(self) -> None:
        pass


# --------------------------------------------------------------------------
# gridquest: a small grid of rooms with scoreable items and lethal tiles.

_DIRECTIONS = {"north": (0, 1), "south": (0, -1), "east": (1, 0), "west": (-1, 0)}

# Exact-match command synonyms, applied before parsing.
COMMAND_SYNONYMS = {
    "n": "go north",
    "s": "go south",
    "e": "go east",
    "w": "go west",
    "north": "go north",
    "south": "go south",
    "east": "go east",
    "west": "go west",
    "l": "look",
}
VERB_SYNONYMS = {"get": "take", "grab": "take", "pick": "take", "move": "go", "walk": "go"}

UNPARSEABLE_TEXT = "I don't understand that."


@dataclass(frozen=True)
class GridItem:
    name: str
    kind: str  # key | door | treasure
    pos: tuple[int, int]
    score: float
    requires: str | None = None

    def __post_init__(self):
        if self.kind not in ("key", "door", "treasure"):
            raise EnvConfigError(f"unknown item kind {self.kind!r}")
        if self.score < 0:
            raise EnvConfigError(f"item {self.name!r} has negative score")


@dataclass(frozen=True)
class GridQuestConfig:
    width: int
    height: int
    start: tuple[int, int]
    items: tuple[GridItem, ...]
    death_tiles: tuple[tuple[int, int], ...] = ()
    descriptions: Mapping[str, str] = None  # keyed "x,y"
    seed: int = 0

    def __post_init__(self):
        if self.descriptions is None:
            object.__setattr__(self, "descriptions", {})
        if self.width < 1 or self.height < 1:
            raise EnvConfigError("grid dimensions must be positive")
        names = [it.name for it in self.items]
        if len(names) != len(set(names)):
            raise EnvConfigError("item names must be unique")
        for it in self.items:
            if not self._in_bounds(it.pos):
                raise EnvConfigError(f"item {it.name!r} placed off-grid at {it.pos}")
            if it.requires is not None and it.requires not in names:
                raise EnvConfigError(
                    f"item {it.name!r} requires unknown item {it.requires!r}"
                )
        for tile in self.death_tiles:
            if not self._in_bounds(tile):
                raise EnvConfigError(f"death tile off-grid at {tile}")

    def _in_bounds(self, pos: tuple[int, int]) -> bool:
        return 0 <= pos[0] < self.width and 0 <= pos[1] < self.height

    @property
    def max_return(self) -> float:
        return sum(it.score for it in self.items)

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "GridQuestConfig":
        try:
            items = tuple(
                GridItem(
                    name=str(d["name"]),
                    kind=str(d["kind"]),
                    pos=(int(d["pos"][0]), int(d["pos"][1])),
                    score=float(d["score"]),
                    requires=d.get("requires"),
                )
                for d in raw.get("items", [])
            )
            return cls(
                width=int(raw["width"]),
                height=int(raw["height"]),
                start=(int(raw["start"][0]), int(raw["start"][1])),
                items=items,
                death_tiles=tuple((int(t[0]), int(t[1])) for t in raw.get("death_tiles", [])),
                descriptions=dict(raw.get("descriptions", {})),
                seed=int(raw.get("seed", 0)),
            )
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise EnvConfigError(f"malformed gridquest config: {exc}") from exc


class GridQuest(Environment):
    def __init__(self, config: GridQuestConfig, horizon: int):
        self.config = config
        self.horizon = horizon
        self.max_return = config.max_return
        self._items = {it.name: it for it in config.items}
        self.reset()

    def reset(self) -> Observation:
        self._pos = self.config.start
        self._acquired: set[str] = set()
        self._score = 0.0
        self._steps = 0
        self._done = False
        self._horizon_hit = False
        return Observation(text=self._room_text(), done=False, reward=0.0)

    @property
    def ended_by_horizon(self) -> bool:
        return self._horizon_hit

    def step(self, action: str) -> Observation:
        if self._done:
            raise StepAfterDoneError("episode is already done")
        if self._steps >= self.horizon:
            raise EnvError("horizon exceeded")
        self._steps += 1
        reward, text = self._apply(action)
        self._score += reward
        if not self._done and self._steps >= self.horizon:
            self._done = True
            self._horizon_hit = True
        return Observation(text=text, done=self._done, reward=reward)

    # -- mechanics ---------------------------------------------------------

    def _apply(self, action: str) -> tuple[float, str]:
        parsed = parse_grid_action(action)
        if parsed is None:
            return 0.0, UNPARSEABLE_TEXT
        verb, noun = parsed
        if verb == "look":
            return 0.0, self._room_text()
        if verb == "go":
            return self._go(noun)
        if verb == "take":
            return self._take(noun)
        if verb == "open":
            return self._open(noun)
        return 0.0, UNPARSEABLE_TEXT

    def _go(self, direction: str) -> tuple[float, str]:
        if direction not in _DIRECTIONS:
            return 0.0, UNPARSEABLE_TEXT
        dx, dy = _DIRECTIONS[direction]
        target = (self._pos[0] + dx, self._pos[1] + dy)
        if not self.config._in_bounds(target):
            return 0.0, f"You can't go that way.\n{self._room_text()}"
        self._pos = target
        if target in self.config.death_tiles:
            self._done = True
            return 0.0, "You step onto a cursed tile and die."
        return 0.0, self._room_text()

    def _take(self, name: str) -> tuple[float, str]:
        item = self._items.get(name)
        if item is None or item.pos != self._pos or item.kind == "door":
            return 0.0, f"There is no {name} here.\n{self._room_text()}"
        if name in self._acquired:
            return 0.0, f"You already took the {name}.\n{self._room_text()}"
        if item.requires is not None and item.requires not in self._acquired:
            return 0.0, f"You can't take the {name} yet.\n{self._room_text()}"
        self._acquired.add(name)
        return item.score, self._score_text(f"You take the {name}.", item.score)

    def _open(self, name: str) -> tuple[float, str]:
        item = self._items.get(name)
        if item is None or item.pos != self._pos or item.kind != "door":
            return 0.0, f"There is no {name} here.\n{self._room_text()}"
        if name in self._acquired:
            return 0.0, f"The {name} is already open.\n{self._room_text()}"
        if item.requires is not None and item.requires not in self._acquired:
            return 0.0, f"The {name} is locked.\n{self._room_text()}"
        self._acquired.add(name)
        return item.score, self._score_text(f"The {name} swings open.", item.score)

    def _score_text(self, event: str, score: float) -> str:
        if len(self._acquired) == len(self._items):
            self._done = True
            return f"{event} (+{score:g} points)\nYou have collected everything!"
        return f"{event} (+{score:g} points)\n{self._room_text()}"

    def _room_text(self) -> str:
        key = f"{self._pos[0]},{self._pos[1]}"
        desc = self.config.descriptions.get(key, "a featureless room")
        visible = [it.name for it in self.config.items if it.pos == self._pos and it.name not in self._acquired]
        if visible:
            seen = " You see: " + ", ".join(visible) + "."
        else:
            seen = " You see nothing special."
        exits = [
            d
            for d, (dx, dy) in _DIRECTIONS.items()
            if self.config._in_bounds((self._pos[0] + dx, self._pos[1] + dy))
        ]
        return f"You are in {desc}.{seen} Exits: {', '.join(exits)}."


def parse_grid_action(action: str) -> tuple[str, str] | None:
    """Normalize synonyms and split into (verb, noun); None if unparseable."""
    text = " ".join(action.lower().split())
    text = COMMAND_SYNONYMS.get(text, text)
    if not text:
        return None
    tokens = text.split()
    verb = VERB_SYNONYMS.get(tokens[0], tokens[0])
    if verb == "look" and len(tokens) == 1:
        return ("look", "")
    if verb in ("go", "take", "open") and len(tokens) >= 2:
        return (verb, " ".join(tokens[1:]))
    return None


# --------------------------------------------------------------------------
# formfill: fill named fields, then submit; one binary reward at the end.


@dataclass(frozen=True)
class FormFillConfig:
    fields: Mapping[str, str]  # required field -> expected value
    distractors: tuple[str, ...] = ()
    success: str = "all_required"

    def __post_init__(self):
        if not self.fields:
            raise EnvConfigError("formfill needs at least one required field")
        if self.success != "all_required":
            raise EnvConfigError(f"unknown success predicate {self.success!r}")
        overlap = set(self.fields) & set(self.distractors)
        if overlap:
            raise EnvConfigError(f"fields duplicated as distractors: {sorted(overlap)}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "FormFillConfig":
        try:
            return cls(
                fields={str(k): str(v) for k, v in raw["fields"].items()},
                distractors=tuple(str(d) for d in raw.get("distractors", [])),
                success=str(raw.get("success", "all_required")),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise EnvConfigError(f"malformed formfill config: {exc}") from exc


class FormFill(Environment):
    max_return = 1.0

    def __init__(self, config: FormFillConfig, horizon: int):
        self.config = config
        self.horizon = horizon
        self._field_order = list(config.fields) + list(config.distractors)
        self.reset()

    def reset(self) -> Observation:
        self._values: dict[str, str] = {f: "" for f in self._field_order}
        self._steps = 0
        self._done = False
        self._horizon_hit = False
        return Observation(text=self._form_text(), done=False, reward=0.0)

    @property
    def ended_by_horizon(self) -> bool:
        return self._horizon_hit

    def step(self, action: str) -> Observation:
        if self._done:
            raise StepAfterDoneError("episode is already done")
        if self._steps >= self.horizon:
            raise EnvError("horizon exceeded")
        self._steps += 1
        reward, text = self._apply(action)
        if not self._done and self._steps >= self.horizon:
            self._done = True
            self._horizon_hit = True
        return Observation(text=text, done=self._done, reward=reward)

    def _apply(self, action: str) -> tuple[float, str]:
        tokens = action.strip().split()
        if not tokens:
            return 0.0, UNPARSEABLE_TEXT
        verb = tokens[0].lower()
        if verb == "look" and len(tokens) == 1:
            return 0.0, self._form_text()
        if verb == "fill" and len(tokens) >= 3:
            field = tokens[1]
            value = " ".join(tokens[2:])
            if field not in self._values:
                return 0.0, f"There is no {field} field on this form.\n{self._form_text()}"
            self._values[field] = value
            return 0.0, f"You write '{value}' into {field}.\n{self._form_text()}"
        if verb == "submit" and len(tokens) == 1:
            self._done = True
            ok = all(self._values[f] == want for f, want in self.config.fields.items())
            if ok:
                return 1.0, "You submit the form. It is accepted."
            return 0.0, "You submit the form. It is rejected."
        return 0.0, UNPARSEABLE_TEXT

    def _form_text(self) -> str:
        cells = "; ".join(f"{f}=[{self._values[f]}]" for f in self._field_order)
        return f"The form shows: {cells}. Use 'fill <field> <value>' and 'submit'."


# --------------------------------------------------------------------------
# external adapter: newline-delimited JSON over a child process's stdio.


class ExternalProcessEnv(Environment):
    """Drives an external environment over stdio.

    Requests: {"op": "reset"} and {"op": "step", "action": <text>}; the
    adapter answers one JSON object per line with fields text/reward/done.
    """

    def __init__(self, command: Sequence[str], max_return: float, horizon: int):
        self.max_return = max_return
        self.horizon = horizon
        self._command = list(command)
        try:
            self._proc = subprocess.Popen(
                self._command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise AdapterError(f"cannot start adapter {self._command}: {exc}") from exc
        self._steps = 0
        self._done = False
        self._horizon_hit = False

    def _request(self, payload: Mapping[str, object]) -> Observation:
        if self._proc.poll() is not None:
            raise AdapterError("adapter process has exited")
        try:
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise AdapterError(f"adapter I/O failed: {exc}") from exc
        if not line:
            raise AdapterError("adapter closed its stdout")
        try:
            body = json.loads(line)
            return Observation(
                text=str(body["text"]), done=bool(body["done"]), reward=float(body["reward"])
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise AdapterError(f"adapter protocol violation in {line!r}: {exc}") from exc

    def reset(self) -> Observation:
        obs = self._request({"op": "reset"})
        if obs.done or obs.reward != 0.0:
            raise AdapterError("reset response must carry reward 0 and done false")
        self._steps = 0
        self._done = False
        self._horizon_hit = False
        return obs

    @property
    def ended_by_horizon(self) -> bool:
        return self._horizon_hit

    def step(self, action: str) -> Observation:
        if self._done:
            raise StepAfterDoneError("episode is already done")
        if self._steps >= self.horizon:
            raise EnvError("horizon exceeded")
        obs = self._request({"op": "step", "action": action})
        self._steps += 1
        done = obs.done
        if not done and self._steps >= self.horizon:
            done = True
            self._horizon_hit = True
            obs = Observation(text=obs.text, done=True, reward=obs.reward)
        self._done = done
        return obs

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


# --------------------------------------------------------------------------
# construction


def _make_gridquest(spec: TaskSpec) -> Environment:
    config = GridQuestConfig.from_dict(spec.env_config)
    if not math.isclose(config.max_return, spec.max_return):
        raise EnvConfigError(
            f"task {spec.task_id!r}: item scores sum to {config.max_return}, "
            f"but max_return is {spec.max_return}"
        )
    return GridQuest(config, horizon=spec.horizon)


def _make_formfill(spec: TaskSpec) -> Environment:
    config = FormFillConfig.from_dict(spec.env_config)
    if not math.isclose(spec.max_return, 1.0):
        raise EnvConfigError(
            f"task {spec.task_id!r}: formfill rewards are binary; max_return must be 1"
        )
    return FormFill(config, horizon=spec.horizon)


def _make_external(spec: TaskSpec) -> Environment:
    command = spec.env_config.get("command")
    if not command or not isinstance(command, (list, tuple)):
        raise EnvConfigError(
            f"task {spec.task_id!r}: external env needs a 'command' argv list"
        )
    return ExternalProcessEnv(
        [str(c) for c in command], max_return=spec.max_return, horizon=spec.horizon
    )


ENV_REGISTRY: dict[str, Callable[[TaskSpec], Environment]] = {
    "gridquest": _make_gridquest,
    "formfill": _make_formfill,
    "external": _make_external,
}


def make_env(spec: TaskSpec) -> Environment:
    """Build a fresh handle for the task; construction performs no steps."""
    factory = ENV_REGISTRY.get(spec.env_kind)
    if factory is None:
        raise UnknownEnvironmentError(
            f"unknown env_kind {spec.env_kind!r} (registered: {sorted(ENV_REGISTRY)})"
        )
    return factory(spec)


def solve_gridquest(config: GridQuestConfig, horizon: int) -> list[str] | None:
    """Breadth-first search for an action script collecting every item.

    Returns a command list achieving the full max_return within the horizon,
    or None if the layout is unsolvable. Intended for desk-scale grids.
    """
    items = list(config.items)
    start = (config.start, frozenset())
    queue = deque([(start, [])])
    seen = {start}
    while queue:
        (pos, acquired), script = queue.popleft()
        if len(script) > horizon:
            continue
        if len(acquired) == len(items):
            return script
        candidates: list[tuple[tuple[tuple[int, int], frozenset], str]] = []
        for it in items:
            if it.name in acquired or it.pos != pos:
                continue
            if it.requires is not None and it.requires not in acquired:
                continue
            verb = "open" if it.kind == "door" else "take"
            candidates.append(((pos, acquired | {it.name}), f"{verb} {it.name}"))
        for direction, (dx, dy) in _DIRECTIONS.items():
            target = (pos[0] + dx, pos[1] + dy)
            if not config._in_bounds(target) or target in config.death_tiles:
                continue
            candidates.append(((target, acquired), f"go {direction}"))
        for state, command in candidates:
            if state in seen or len(script) + 1 > horizon:
                continue
            seen.add(state)
            queue.append((state, script + [command]))
    return None


def formfill_reference_script(config: FormFillConfig) -> list[str]:
    """Action script that fills every required field and submits."""
    return [f"fill {f} {v}" for f, v in config.fields.items()] + ["submit"]


# Desk-scale default layouts. The three-room chain exercises the
# requires-dependency mechanics; the trio layout has independent pickups.

DEFAULT_GRIDQUEST_CONFIG: dict[str, object] = {
    "width": 3,
    "height": 3,
    "start": [0, 0],
    "items": [
        {"name": "key", "kind": "key", "pos": [1, 0], "score": 3.0},
        {"name": "door", "kind": "door", "pos": [2, 0], "score": 5.0, "requires": "key"},
        {"name": "treasure", "kind": "treasure", "pos": [2, 1], "score": 12.0, "requires": "door"},
    ],
    "death_tiles": [[0, 1]],
    "descriptions": {
        "0,0": "a stone antechamber",
        "1,0": "a dusty armory",
        "2,0": "a torch-lit hallway",
        "2,1": "the treasure vault",
    },
    "seed": 0,
}

TRIO_GRIDQUEST_CONFIG: dict[str, object] = {
    "width": 3,
    "height": 3,
    "start": [0, 0],
    "items": [
        {"name": "coin", "kind": "key", "pos": [1, 0], "score": 10.0},
        {"name": "gem", "kind": "key", "pos": [2, 0], "score": 10.0},
        {"name": "ring", "kind": "key", "pos": [2, 1], "score": 10.0},
        {"name": "crown", "kind": "treasure", "pos": [0, 2], "score": 10.0},
    ],
    "death_tiles": [],
    "descriptions": {
        "0,0": "a stone antechamber",
        "1,0": "a dusty armory",
        "2,0": "a torch-lit hallway",
        "2,1": "the treasure vault",
        "0,2": "a collapsed gallery",
    },
    "seed": 0,
}

DEFAULT_FORMFILL_CONFIG: dict[str, object] = {
    "fields": {"name": "Ada", "email": "ada@example.org"},
    "distractors": ["phone"],
    "success": "all_required",
}
