#!/usr/bin/env python3
"""Offline end-to-end demo: evolve an adaptation policy with scripted
backends, then evaluate the selected policy against the static and naive
baselines and print the aggregate report.

Everything is deterministic; no network access or API keys are needed.
The scripted world is a small key/door/treasure grid in which the actor
only executes route segments whose HINT token appears in its guidance,
so better meta-prompts visibly produce better learning curves.

Usage: python scripts/demo_meta_train.py [--out runs/demo]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ttlopt.cli import main as ttlopt_main  # noqa: E402

SEED_TEXT = "analyze the game trajectory and provide feedback"

ACTOR_RULES = [
    {"trigger": ["HINT[key]", "You see: key"], "response": "take key"},
    {"trigger": ["HINT[door]", "You see: door"], "response": "open door"},
    {"trigger": ["HINT[treasure]", "You see: treasure"], "response": "take treasure"},
    {"trigger": ["HINT[key]", "stone antechamber"], "response": "go east"},
    {"trigger": ["HINT[door]", "dusty armory"], "response": "go east"},
    {"trigger": ["HINT[treasure]", "torch-lit hallway"], "response": "go north"},
]

META_RULES = [
    {"trigger": "MARK_LEVEL3",
     "response": "<think>full route</think>"
                 "<learn>HINT[key] HINT[door] HINT[treasure]</learn>"},
    {"trigger": "MARK_LEVEL2",
     "response": "<think>door next</think><learn>HINT[key] HINT[door]</learn>"},
    {"trigger": "MARK_LEVEL1",
     "response": "<think>key first</think><learn>HINT[key]</learn>"},
]


def candidate(text: str) -> str:
    return "BEGIN_CANDIDATE_PROMPT\n" + text + "\nEND_CANDIDATE_PROMPT"


PROPOSER_RULES = [
    {"trigger": "MARK_LEVEL3",
     "response": candidate("Guide the actor along the whole route, politely. MARK_LEVEL3")},
    {"trigger": "MARK_LEVEL2",
     "response": candidate("Guide the actor along the whole route. MARK_LEVEL3")},
    {"trigger": "MARK_LEVEL1",
     "response": candidate("Tell the actor about the key and the door. MARK_LEVEL2")},
    {"trigger": SEED_TEXT,
     "response": candidate("Tell the actor where the key is. MARK_LEVEL1")},
]


def grid_task(split: str, scale: float = 1.0) -> dict:
    return {
        "env_kind": "gridquest",
        "env_config": {
            "width": 3,
            "height": 3,
            "start": [0, 0],
            "items": [
                {"name": "key", "kind": "key", "pos": [1, 0], "score": 3.0 * scale},
                {"name": "door", "kind": "door", "pos": [2, 0], "score": 5.0 * scale,
                 "requires": "key"},
                {"name": "treasure", "kind": "treasure", "pos": [2, 1],
                 "score": 12.0 * scale, "requires": "door"},
            ],
            "death_tiles": [[0, 1]],
            "descriptions": {
                "0,0": "a stone antechamber",
                "1,0": "a dusty armory",
                "2,0": "a torch-lit hallway",
                "2,1": "the treasure vault",
            },
            "seed": 0,
        },
        "horizon": 12,
        "episode_budget": 4,
        "max_return": 20.0 * scale,
        "split": split,
    }


def build_config(out_dir: str) -> dict:
    return {
        "tasks": {
            "grid-train": grid_task("train"),
            "grid-val-a": grid_task("val"),
            "grid-val-b": grid_task("val", scale=2.0),
            "grid-test": grid_task("test"),
        },
        "backends": {
            "actor-sim": {"kind": "scripted", "rules": ACTOR_RULES,
                          "default_response": "look"},
            "meta-sim": {"kind": "scripted", "rules": META_RULES,
                         "default_response": "<think>generic</think>"
                                             "<learn>Explore carefully.</learn>"},
            "proposer-sim": {"kind": "scripted", "rules": PROPOSER_RULES,
                             "default_response": "no proposal"},
        },
        "actor": {"backend": "actor-sim", "guidance": "Play carefully and maximize score.",
                  "max_context_steps": 0},
        "meta": {"backend": "meta-sim"},
        "proposer": {"backend": "proposer-sim"},
        "train": {
            "train_tasks": ["grid-train"],
            "val_tasks": ["grid-val-a", "grid-val-b"],
            "iterations": 5,
            "seed_policy_text": SEED_TEXT,
            "selection_mode": "raw",
            "random_seed": 7,
        },
        "eval_tasks": [],
        "output_dir": out_dir,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    args = parser.parse_args()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(build_config(str(out_dir)), indent=2),
                           encoding="utf-8")
    print(f"# config written to {config_path}\n")

    print("# meta-training (outer evolutionary loop)")
    if ttlopt_main(["meta-train", "--config", str(config_path)]) != 0:
        return 1

    selected = json.loads(
        (out_dir / "meta-train" / "report" / "selected_policy.json").read_text()
    )["policy_id"]
    print(f"\n# evaluating selected policy ({selected}) vs baselines on the test split")
    for policy in (f"pool:{selected}", "seed", "static"):
        if ttlopt_main(["eval", "--config", str(config_path), "--policy", policy,
                        "--split", "test"]) != 0:
            return 1

    print("\n# aggregate report")
    return ttlopt_main(["report", str(out_dir)])


if __name__ == "__main__":
    sys.exit(main())
