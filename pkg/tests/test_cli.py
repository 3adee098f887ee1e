from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from ttlopt.cli import main
from ttlopt.config import RunConfig

import fixtures_demo


def write_config(tmp_path: Path, body: dict, name: str = "config.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(body), encoding="utf-8")
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestRunTtlCommand:
    def test_worked_example_wauc_on_stdout(self, trio_config_path, capsys):
        assert main(["run-ttl", "--config", str(trio_config_path), "--task", "trio"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[-1] == "W-AUC: 0.5833"
        assert out[0] == "episode 1: return 10 (horizon_exhausted)"
        assert out[1] == "episode 2: return 20 (horizon_exhausted)"
        assert out[2] == "episode 3: return 30 (horizon_exhausted)"

    def test_unknown_task_exits_2_naming_id(self, trio_config_path, capsys):
        assert main(["run-ttl", "--config", str(trio_config_path), "--task", "nosuch"]) == 2
        assert "nosuch" in capsys.readouterr().err

    def test_policy_seed_uses_default_naive_text(self, trio_config_path, tmp_path):
        out_dir = tmp_path / "out"
        assert main(["run-ttl", "--config", str(trio_config_path), "--task", "trio",
                     "--policy", "seed", "--out", str(out_dir)]) == 0
        run_dirs = list(out_dir.glob("ttl-trio-seed-*"))
        assert len(run_dirs) == 1
        session_log = next((run_dirs[0] / "sessions").glob("*.jsonl")).read_text()
        assert '"policy_id":"seed"' in session_log

    def test_missing_config_exits_2(self, capsys):
        assert main(["run-ttl", "--config", "/nope.json", "--task", "t"]) == 2

    def test_static_policy_supported(self, trio_config_path, capsys):
        assert main(["run-ttl", "--config", str(trio_config_path), "--task", "trio",
                     "--policy", "static"]) == 0
        out = capsys.readouterr().out
        assert "W-AUC: 0.2500" in out


class TestMetaTrainCommand:
    def test_deterministic_report_across_fresh_runs(self, tmp_path, capsys):
        outputs = []
        artifacts = []
        for name in ("one", "two"):
            out_dir = tmp_path / name
            config = write_config(tmp_path, fixtures_demo.chain_config_dict(str(out_dir)),
                                  f"{name}.json")
            assert main(["meta-train", "--config", str(config)]) == 0
            outputs.append(capsys.readouterr().out)
            run_dir = out_dir / "meta-train"
            artifacts.append({
                "run_log": (run_dir / "run.jsonl").read_bytes(),
                "selection": (run_dir / "report" / "selection.json").read_bytes(),
                "table": (run_dir / "report" / "score_table.csv").read_bytes(),
                "sessions": {
                    p.name: p.read_bytes() for p in (run_dir / "sessions").glob("*.jsonl")
                },
            })
        assert outputs[0] == outputs[1]
        assert artifacts[0] == artifacts[1]

    def test_funnel_and_selection_content(self, chain_config_path, capsys):
        assert main(["meta-train", "--config", str(chain_config_path)]) == 0
        out = capsys.readouterr().out
        assert "Gate funnel: proposals=5 locally_validated=3 pool_improvements=3" in out
        assert "Selected policy: cand-0003 (mode=raw)" in out
        assert "Z-score ranking:" in out

    def test_reinvocation_resumes_to_identical_report(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        config = write_config(tmp_path, fixtures_demo.chain_config_dict(str(out_dir)))
        assert main(["meta-train", "--config", str(config)]) == 0
        first = (out_dir / "meta-train" / "report" / "selection.json").read_bytes()
        first_log = (out_dir / "meta-train" / "run.jsonl").read_bytes()
        assert main(["meta-train", "--config", str(config)]) == 0
        second = (out_dir / "meta-train" / "report" / "selection.json").read_bytes()
        second_log = (out_dir / "meta-train" / "run.jsonl").read_bytes()
        assert first == second
        assert first_log == second_log

    def test_zscore_with_single_candidate_surfaces_guidance(self, tmp_path, capsys):
        body = fixtures_demo.chain_config_dict(str(tmp_path / "out"), iterations=2,
                                               selection_mode="zscore")
        # A proposer that never emits sentinels: every proposal fails, so only
        # the seed row reaches selection.
        body["backends"]["proposer-sim"]["rules"] = []
        config = write_config(tmp_path, body)
        assert main(["meta-train", "--config", str(config)]) == 2
        err = capsys.readouterr().err
        assert "degenerate" in err
        assert "hint" in err

    def test_locked_run_dir_rejected(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        config = write_config(tmp_path, fixtures_demo.chain_config_dict(str(out_dir)))
        run_dir = out_dir / "meta-train"
        run_dir.mkdir(parents=True)
        (run_dir / ".lock").write_text("9999")
        assert main(["meta-train", "--config", str(config)]) == 1
        assert "locked" in capsys.readouterr().err


class TestEvalCommand:
    def test_csv_header_and_row_count(self, trio_config_path, tmp_path, capsys):
        out_dir = tmp_path / "eval-out"
        assert main(["eval", "--config", str(trio_config_path), "--policy", "seed",
                     "--split", "test", "--out", str(out_dir)]) == 0
        csv_path = next(out_dir.glob("eval-seed-test-*.csv"))
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "task_id,episode,return,wauc,avg_score"
        assert len(lines) - 1 == 3 * 3  # three tasks, three episodes each

    def test_eighteen_rows_for_three_tasks_k6(self, tmp_path):
        body = fixtures_demo.trio_config_dict(str(tmp_path / "out"))
        for task in body["tasks"].values():
            task["episode_budget"] = 6
        config = write_config(tmp_path, body)
        out_dir = tmp_path / "eval-out"
        assert main(["eval", "--config", str(config), "--policy", "seed",
                     "--split", "test", "--out", str(out_dir)]) == 0
        rows = read_csv(next(out_dir.glob("*.csv")))
        assert len(rows) == 18

    def test_static_vs_policy_differential(self, trio_config_path, tmp_path):
        out_dir = tmp_path / "eval-out"
        for policy in ("static", "seed"):
            assert main(["eval", "--config", str(trio_config_path), "--policy", policy,
                         "--split", "test", "--out", str(out_dir)]) == 0
        static_rows = read_csv(next(out_dir.glob("eval-static-test-*.csv")))
        policy_rows = read_csv(next(out_dir.glob("eval-seed-test-*.csv")))
        by_episode = lambda rows, task: {r["episode"]: float(r["return"])
                                         for r in rows if r["task_id"] == task}
        static_trio = by_episode(static_rows, "trio")
        policy_trio = by_episode(policy_rows, "trio")
        assert static_trio["1"] == policy_trio["1"]
        assert static_trio["2"] != policy_trio["2"]
        assert static_trio["3"] != policy_trio["3"]
        # Static baseline: flat curve, wauc equals the normalized single return.
        assert set(static_trio.values()) == {10.0}
        static_wauc = {float(r["wauc"]) for r in static_rows if r["task_id"] == "trio"}
        assert static_wauc == {10.0 / 40.0}

    def test_empty_split_rejected(self, trio_config_path, capsys):
        assert main(["eval", "--config", str(trio_config_path), "--policy", "seed",
                     "--split", "val"]) == 2
        assert "no tasks" in capsys.readouterr().err


class TestReportCommand:
    def make_two_method_two_task_runs(self, tmp_path) -> Path:
        body = fixtures_demo.trio_config_dict(str(tmp_path / "runs"))
        del body["tasks"]["trio-c"]
        config = write_config(tmp_path, body)
        for policy in ("static", "seed"):
            assert main(["eval", "--config", str(config), "--policy", policy,
                         "--split", "test"]) == 0
        return tmp_path / "runs"

    def test_four_cell_table_means(self, tmp_path, capsys):
        runs = self.make_two_method_two_task_runs(tmp_path)
        assert main(["report", str(runs)]) == 0
        rows = read_csv(runs / "report_summary.csv")
        cells = {(r["policy_id"], r["task_id"]): r for r in rows}
        assert set(cells) == {("static", "trio"), ("static", "trio-b"),
                              ("seed", "trio"), ("seed", "trio-b")}
        assert float(cells[("static", "trio")]["avg_score"]) == pytest.approx(10.0)
        assert float(cells[("static", "trio")]["wauc"]) == pytest.approx(0.25)
        assert float(cells[("seed", "trio")]["avg_score"]) == pytest.approx(20.0)
        assert float(cells[("seed", "trio")]["wauc"]) == pytest.approx(140.0 / 240.0)
        out = capsys.readouterr().out
        assert "avg_score:" in out and "wauc:" in out

    def test_empty_runs_dir(self, tmp_path, capsys):
        runs = tmp_path / "empty"
        runs.mkdir()
        assert main(["report", str(runs)]) == 0
        assert "no runs" in capsys.readouterr().out

    def test_hash_chain_break_exits_3_naming_file(self, tmp_path, capsys):
        runs = self.make_two_method_two_task_runs(tmp_path)
        victim = next(runs.glob("*/sessions/*.jsonl"))
        lines = victim.read_text().splitlines()
        body = json.loads(lines[0])
        body["payload"]["task_id"] = "forged"
        lines[0] = json.dumps(body, sort_keys=True, separators=(",", ":"))
        victim.write_text("\n".join(lines) + "\n")
        assert main(["report", str(runs)]) == 3
        assert victim.name in capsys.readouterr().err


class TestPolicyResolution:
    def test_eval_with_pool_policy_from_training_run(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        config = write_config(tmp_path, fixtures_demo.chain_config_dict(str(out_dir)))
        assert main(["meta-train", "--config", str(config)]) == 0
        capsys.readouterr()
        assert main(["eval", "--config", str(config), "--policy", "pool:cand-0003",
                     "--split", "test"]) == 0
        csv_path = next(out_dir.glob("eval-cand-0003-test-*.csv"))
        rows = read_csv(csv_path)
        # The fully-informed policy reaches max return from episode 2 on.
        assert [float(r["return"]) for r in rows] == [0.0, 20.0, 20.0, 20.0]

    def test_eval_with_policy_file(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        config = write_config(tmp_path, fixtures_demo.chain_config_dict(str(out_dir)))
        policy_file = tmp_path / "policy.json"
        policy_file.write_text(json.dumps({
            "policy_id": "handmade",
            "meta_prompt": fixtures_demo.LEVEL2_TEXT,
        }), encoding="utf-8")
        assert main(["eval", "--config", str(config), "--policy", str(policy_file),
                     "--split", "test"]) == 0
        rows = read_csv(next(out_dir.glob("eval-handmade-test-*.csv")))
        assert [float(r["return"]) for r in rows] == [0.0, 8.0, 8.0, 8.0]

    def test_unknown_pool_policy_exits_2(self, trio_config_path, capsys):
        assert main(["eval", "--config", str(trio_config_path),
                     "--policy", "pool:ghost", "--split", "test"]) == 2
        assert "ghost" in capsys.readouterr().err


class TestSelectExpertCommand:
    def test_reselection_with_both_modes(self, chain_config_path, tmp_path, capsys):
        assert main(["meta-train", "--config", str(chain_config_path)]) == 0
        capsys.readouterr()
        config = RunConfig.load(chain_config_path)
        run_dir = Path(config.output_dir) / "meta-train"
        for mode in ("raw", "zscore"):
            assert main(["select-expert", str(run_dir), "--mode", mode]) == 0
            out = capsys.readouterr().out
            assert f"Selected policy: cand-0003 (mode={mode})" in out
            assert (run_dir / "report" / f"selection-{mode}.json").exists()

    def test_missing_run_dir(self, tmp_path, capsys):
        assert main(["select-expert", str(tmp_path / "ghost")]) == 2


class TestConfigRoundTrip:
    def test_parse_serialize_idempotent(self, tmp_path):
        body = fixtures_demo.chain_config_dict(str(tmp_path / "out"))
        path = write_config(tmp_path, body)
        config = RunConfig.load(path)
        once = config.dumps()
        again = RunConfig.from_dict(json.loads(once)).dumps()
        assert once == again

    def test_undefined_backend_rejected(self, tmp_path):
        body = fixtures_demo.chain_config_dict(str(tmp_path / "out"))
        body["actor"]["backend"] = "ghost"
        path = write_config(tmp_path, body)
        with pytest.raises(Exception):
            RunConfig.load(path)

    def test_undefined_task_rejected(self, tmp_path):
        body = fixtures_demo.chain_config_dict(str(tmp_path / "out"))
        body["train"]["val_tasks"] = ["grid-val-a", "ghost-task"]
        path = write_config(tmp_path, body)
        with pytest.raises(Exception):
            RunConfig.load(path)

    def test_deterministic_clock_auto_detection(self, tmp_path):
        body = fixtures_demo.chain_config_dict(str(tmp_path / "out"))
        config = RunConfig.from_dict(body)
        assert config.is_deterministic()
        body["backends"]["actor-sim"] = {"kind": "http", "base_url": "http://x/v1"}
        assert not RunConfig.from_dict(body).is_deterministic()
        body["deterministic_log_clock"] = True
        assert RunConfig.from_dict(body).is_deterministic()


class TestSecretHygiene:
    def test_api_key_never_reaches_logs(self, tmp_path, monkeypatch):
        # An http backend is configured (though unused by the roles); its key
        # must not appear anywhere in the run directory.
        secret = "sk-super-secret-value-9907"
        monkeypatch.setenv("TTLOPT_TEST_KEY", secret)
        body = fixtures_demo.trio_config_dict(str(tmp_path / "runs"))
        body["backends"]["remote"] = {
            "kind": "http",
            "base_url": "http://127.0.0.1:9/v1/chat/completions",
            "api_key_env": "TTLOPT_TEST_KEY",
        }
        body["deterministic_log_clock"] = True
        config = write_config(tmp_path, body)
        assert main(["run-ttl", "--config", str(config), "--task", "trio"]) == 0
        for path in (tmp_path / "runs").rglob("*"):
            if path.is_file():
                assert secret not in path.read_text(encoding="utf-8")
