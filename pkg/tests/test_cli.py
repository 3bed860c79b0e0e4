"""End-to-end CLI behavior and exit codes."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from tpgo.cli import main
from tpgo.graph import deserialize

RUNNER = CliRunner()

PARSER_SCRIPT = {
    "parser": {
        "role": "parser",
        "strict": True,
        "responses": {
            "Prompt label: main": json.dumps(
                {
                    "title": "main",
                    "type": "generic",
                    "children": [
                        {"title": "Persona", "type": "role", "content": "You are a planner."},
                        {"title": "Rule", "type": "logic", "content": "Check every input twice."},
                    ],
                }
            )
        },
    }
}


def write_parser_script(tmp_path: Path) -> Path:
    path = tmp_path / "parser_script.json"
    path.write_text(json.dumps(PARSER_SCRIPT), encoding="utf-8")
    return path


class TestParseCommand:
    def test_scripted_parse_writes_valid_graph(self, tmp_path):
        prompt = tmp_path / "prompt.txt"
        prompt.write_text("You are a planner. Check every input twice.", encoding="utf-8")
        out = tmp_path / "graph.json"
        result = RUNNER.invoke(
            main,
            ["parse", str(prompt), "--label", "main", "--out", str(out), "--script", str(write_parser_script(tmp_path))],
        )
        assert result.exit_code == 0, result.output
        graph = deserialize(out.read_text(encoding="utf-8"))
        assert len(graph.roots) == 1
        assert "3 nodes" in result.output

    def test_unreadable_prompt_exits_2(self, tmp_path):
        result = RUNNER.invoke(
            main, ["parse", str(tmp_path / "absent.txt"), "--out", str(tmp_path / "g.json")]
        )
        assert result.exit_code == 2

    def test_materialization_contains_instruction_lines(self, tmp_path):
        prompt = tmp_path / "prompt.txt"
        prompt.write_text("You are a planner. Check every input twice.", encoding="utf-8")
        out = tmp_path / "graph.json"
        RUNNER.invoke(
            main,
            ["parse", str(prompt), "--label", "main", "--out", str(out), "--script", str(write_parser_script(tmp_path))],
        )
        result = RUNNER.invoke(main, ["graph", "materialize", str(out)])
        assert result.exit_code == 0
        assert "You are a planner." in result.output
        assert "Check every input twice." in result.output

    def test_provider_rejection_exits_1(self, tmp_path):
        prompt = tmp_path / "prompt.txt"
        prompt.write_text("unmatched content", encoding="utf-8")
        script = tmp_path / "script.json"
        script.write_text(
            json.dumps({"parser": {"role": "parser", "strict": True, "responses": {}}}),
            encoding="utf-8",
        )
        result = RUNNER.invoke(
            main, ["parse", str(prompt), "--out", str(tmp_path / "g.json"), "--script", str(script)]
        )
        assert result.exit_code == 1


class TestOptimizeCommand:
    def test_convergence_fixture_reaches_ten_of_ten(self, tmp_path):
        archive = tmp_path / "arch"
        result = RUNNER.invoke(main, ["optimize", "--fixture", "convergence", "--archive", str(archive)])
        assert result.exit_code == 0, result.output
        assert "final success 10/10" in result.output
        assert (archive / "run_meta.json").exists()

    def test_max_iterations_one_yields_one_iter_dir(self, tmp_path):
        archive = tmp_path / "arch"
        result = RUNNER.invoke(
            main,
            ["optimize", "--fixture", "convergence", "--archive", str(archive), "--max-iterations", "1"],
        )
        assert result.exit_code == 0, result.output
        iter_dirs = sorted(p.name for p in archive.iterdir() if p.name.startswith("iter_"))
        assert iter_dirs == ["iter_1"]

    def test_missing_provider_endpoint_named_in_error(self, tmp_path, monkeypatch):
        monkeypatch.delenv("TPGO_API_BASE", raising=False)
        suite = tmp_path / "tasks.json"
        suite.write_text(json.dumps([{"task_id": "t1", "query": "q"}]), encoding="utf-8")
        config = tmp_path / "run.yaml"
        config.write_text(
            "suite: tasks.json\narchive: out\nprompts: {main: prompt.txt}\n", encoding="utf-8"
        )
        (tmp_path / "prompt.txt").write_text("Do things.", encoding="utf-8")
        result = RUNNER.invoke(main, ["optimize", "--config", str(config)])
        assert result.exit_code == 2
        assert "providers.api_base" in result.output

    def test_no_source_given_exits_2(self):
        result = RUNNER.invoke(main, ["optimize"])
        assert result.exit_code == 2

    def test_ablation_flag_passthrough(self, tmp_path):
        archive = tmp_path / "arch"
        result = RUNNER.invoke(
            main, ["optimize", "--fixture", "stability", "--archive", str(archive), "--no-grao"]
        )
        assert result.exit_code == 0, result.output
        meta = json.loads((archive / "run_meta.json").read_text())
        assert meta["ablations"]["no_grao"] is True
        assert meta["final_success"] < meta["task_count"]


class TestReplayCommand:
    def _run_fixture(self, tmp_path) -> Path:
        archive = tmp_path / "arch"
        result = RUNNER.invoke(main, ["optimize", "--fixture", "convergence", "--archive", str(archive)])
        assert result.exit_code == 0, result.output
        return archive

    def test_untouched_archive_replays_clean(self, tmp_path):
        archive = self._run_fixture(tmp_path)
        result = RUNNER.invoke(main, ["replay", str(archive)])
        assert result.exit_code == 0, result.output
        assert "replay ok" in result.output

    def test_tampered_proposal_detected_at_iteration(self, tmp_path):
        archive = self._run_fixture(tmp_path)
        proposals_path = archive / "iter_1" / "proposals.json"
        records = json.loads(proposals_path.read_text(encoding="utf-8"))
        records[0]["proposal"]["modifications"][0]["new_node"]["content"] = "tampered guidance"
        proposals_path.write_text(json.dumps(records, indent=2), encoding="utf-8")
        result = RUNNER.invoke(main, ["replay", str(archive)])
        assert result.exit_code == 1
        assert "iteration 1" in result.output

    def test_missing_archive_exits_2(self, tmp_path):
        result = RUNNER.invoke(main, ["replay", str(tmp_path / "empty")])
        assert result.exit_code == 2


class TestCostCommand:
    def test_cost_summary_over_fixture_archive(self, tmp_path):
        archive = tmp_path / "arch"
        RUNNER.invoke(main, ["optimize", "--fixture", "convergence", "--archive", str(archive)])
        result = RUNNER.invoke(main, ["cost", str(archive)])
        assert result.exit_code == 0, result.output
        assert "tokens / trajectory" in result.output
        reports = [
            json.loads((archive / d / "report.json").read_text())
            for d in sorted(p.name for p in archive.iterdir() if p.name.startswith("iter_"))
        ]
        total = sum(r["usage"]["prompt_tokens"] + r["usage"]["completion_tokens"] for r in reports)
        assert f"total tokens:          {total}" in result.output


class TestMemoryCommands:
    def _memory_store(self, tmp_path) -> Path:
        archive = tmp_path / "arch"
        RUNNER.invoke(main, ["optimize", "--fixture", "poisoned", "--archive", str(archive)])
        return archive / "memory.jsonl"

    def test_ls_lists_all_entries(self, tmp_path):
        store = self._memory_store(tmp_path)
        result = RUNNER.invoke(main, ["memory", "ls", "--store", str(store)])
        assert result.exit_code == 0, result.output
        assert "e0001" in result.output
        assert "False" in result.output  # the rolled-back attempt is retained

    def test_show_renders_full_entry(self, tmp_path):
        store = self._memory_store(tmp_path)
        result = RUNNER.invoke(main, ["memory", "show", "e0001", "--store", str(store)])
        assert result.exit_code == 0
        doc = json.loads(result.output)
        assert doc["entry_id"] == "e0001"
        assert "proposal" in doc

    def test_show_unknown_id_exits_1(self, tmp_path):
        store = self._memory_store(tmp_path)
        result = RUNNER.invoke(main, ["memory", "show", "e9999", "--store", str(store)])
        assert result.exit_code == 1

    def test_export_emits_one_document(self, tmp_path):
        store = self._memory_store(tmp_path)
        out = tmp_path / "export.json"
        result = RUNNER.invoke(main, ["memory", "export", "--store", str(store), "--out", str(out)])
        assert result.exit_code == 0
        doc = json.loads(out.read_text(encoding="utf-8"))
        assert len(doc["entries"]) >= 3


class TestGraphCommands:
    def test_show_and_diff(self, tmp_path):
        archive = tmp_path / "arch"
        RUNNER.invoke(main, ["optimize", "--fixture", "convergence", "--archive", str(archive)])
        before = archive / "iter_1" / "graph_before.json"
        after = archive / "iter_1" / "graph_after.json"
        show = RUNNER.invoke(main, ["graph", "show", str(before)])
        assert show.exit_code == 0
        assert "main-agent" in show.output
        diff_result = RUNNER.invoke(main, ["graph", "diff", str(before), str(after)])
        assert diff_result.exit_code == 0
        ops = [json.loads(line)["op"] for line in diff_result.output.splitlines() if line.startswith("{")]
        assert ops.count("ADD_NODE") == 3
