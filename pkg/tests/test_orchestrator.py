"""Loop mechanics: batching, validation, rollback, ablations, archive, cost."""

from __future__ import annotations

import json
import threading
from pathlib import Path

import pytest

from tpgo.errors import CostReportError, TransportError
from tpgo.gateway import UsageCounters, UsageLedger
from tpgo.gradients import Step, Trajectory
from tpgo.graph import deserialize, graph_hash, materialize_all, serialize
from tpgo.harness import (
    CONVERGENCE_FAMILIES,
    MarkerEvaluator,
    RuleBasedRunner,
    ScriptedChatProvider,
    SyntheticTask,
    build_convergence_suite,
    build_poisoned_suite,
    build_stability_suite,
    _add_node_proposal,
    _base_graph,
    _reflector_script,
)
from tpgo.memory import ExperienceMemory
from tpgo.orchestrator import (
    AblationFlags,
    IterationReport,
    OptimizationLoop,
    RunArchive,
    RunParams,
    RunState,
    cost_report,
    report_from_doc,
    run_batch,
)


def make_state(bundle, tmp_path: Path, *, params: RunParams | None = None, subdir="arch") -> RunState:
    archive = RunArchive(tmp_path / subdir)
    return RunState(
        graph=bundle.graph,
        tasks=list(bundle.tasks),
        runner=bundle.runner,
        evaluator=bundle.evaluator,
        reflector=bundle.reflector,
        optimizer=bundle.optimizer,
        embedder=bundle.embedder,
        params=params or RunParams(seed=0),
        archive=archive,
        memory=ExperienceMemory(archive.memory_path, bundle.embedder),
        ledger=UsageLedger(),
        clock=lambda: 0.0,
    )


class TestRunBatch:
    def test_one_trajectory_per_task_sorted(self, tmp_path):
        bundle = build_convergence_suite(0)
        trajectories = run_batch(bundle.graph, bundle.tasks, bundle.runner, bundle.evaluator, 8)
        assert len(trajectories) == 10
        assert [t.task_id for t in trajectories] == sorted(t.task_id for t in trajectories)

    def test_schedule_independence(self):
        bundle = build_convergence_suite(0)
        one = run_batch(bundle.graph, bundle.tasks, bundle.runner, bundle.evaluator, 1)
        eight = run_batch(bundle.graph, bundle.tasks, bundle.runner, bundle.evaluator, 8)
        assert one == eight

    def test_usage_totals_are_additive(self):
        bundle = build_convergence_suite(0)
        ledger = UsageLedger()
        trajectories = run_batch(bundle.graph, bundle.tasks, bundle.runner, bundle.evaluator, 4, ledger=ledger)
        total = ledger.total()
        expected = UsageCounters()
        for t in trajectories:
            expected = expected + t.usage
        assert total == expected

    def test_concurrency_bound_is_respected(self):
        bundle = build_convergence_suite(0)
        lock = threading.Lock()
        active = {"now": 0, "max": 0}
        inner = RuleBasedRunner()

        class CountingRunner:
            def run(self, config, task):
                with lock:
                    active["now"] += 1
                    active["max"] = max(active["max"], active["now"])
                try:
                    import time

                    time.sleep(0.01)
                    return inner.run(config, task)
                finally:
                    with lock:
                        active["now"] -= 1

        run_batch(bundle.graph, bundle.tasks, CountingRunner(), bundle.evaluator, 3)
        assert active["max"] <= 3

    def test_runner_transport_failure_flags_environment(self):
        bundle = build_convergence_suite(0)
        inner = RuleBasedRunner()

        class FlakyRunner:
            def run(self, config, task):
                if task.task_id == "t03":
                    raise TransportError("connection reset")
                return inner.run(config, task)

        trajectories = run_batch(bundle.graph, bundle.tasks, FlakyRunner(), bundle.evaluator, 4)
        flagged = [t for t in trajectories if t.environment_failure]
        assert [t.task_id for t in flagged] == ["t03"]
        assert flagged[0].outcome == "failure"


def partial_fix_bundle():
    """One 5-task failure family whose scripted fix repairs only 2 tasks."""
    m1 = "Handle the narrow gap case explicitly."
    m2 = "Handle the wide gap case explicitly."
    family = {
        "coverage-gap": {
            "marker": m1,
            "gradient": "Left a coverage gap on task {tid} while skipping the checklist.",
        }
    }
    tasks = [
        SyntheticTask(
            task_id=f"f{i:02d}",
            query=f"gap request {i}",
            domain_tag="general",
            required_markers=frozenset({m1 if i <= 2 else m2}),
            failure_family="coverage-gap",
        )
        for i in range(1, 6)
    ]
    optimizer = ScriptedChatProvider(
        "optimizer",
        {
            "Representative: Left a coverage gap": _add_node_proposal(
                context="Recurring coverage gaps.",
                parent="sec-rules",
                node_id="fix-gap",
                title="Gap Handling",
                content=m1,
                rationale="Covers the narrow case.",
            )
        },
    )
    from tpgo.harness import FixtureBundle, HashEmbeddingProvider

    return FixtureBundle(
        name="partial",
        tasks=tasks,
        graph=_base_graph(),
        reflector=_reflector_script(tasks, family),
        optimizer=optimizer,
        embedder=HashEmbeddingProvider(dimension=64, seed=0),
    )


class TestRunIteration:
    def test_full_fix_effectiveness_one_accepted(self, tmp_path):
        state = make_state(build_convergence_suite(0), tmp_path)
        loop = OptimizationLoop(state)
        loop.run_iteration()
        validations = state.archive.read_json(1, "validations.json")
        assert len(validations) == 3
        for v in validations:
            assert v["effectiveness"] == 1.0
            assert v["accepted"] is True
            assert v["subset_size"] == 2 and v["fixed_count"] == 2

    def test_zero_fix_rejected_with_exact_rollback(self, tmp_path):
        state = make_state(build_poisoned_suite(0), tmp_path)
        loop = OptimizationLoop(state)
        loop.run_iteration()
        records = state.archive.read_json(1, "proposals.json")
        rejected = [r for r in records if not r["accepted"]]
        assert len(rejected) == 1
        assert rejected[0]["effectiveness"] == 0.0
        assert rejected[0]["graph_hash_after"] == rejected[0]["graph_hash_before"]
        bad_entries = [e for e in state.memory.entries if not e.accepted]
        assert len(bad_entries) == 1
        assert bad_entries[0].effectiveness == 0.0

    def test_partial_fix_effectiveness_two_fifths(self, tmp_path):
        state = make_state(partial_fix_bundle(), tmp_path)
        loop = OptimizationLoop(state)
        loop.run_iteration()
        validations = state.archive.read_json(1, "validations.json")
        assert len(validations) == 1
        assert validations[0]["subset_size"] == 5
        assert validations[0]["fixed_count"] == 2
        assert validations[0]["effectiveness"] == pytest.approx(0.4)
        assert validations[0]["accepted"] is True

    def test_memory_entries_equal_attempts(self, tmp_path):
        state = make_state(build_poisoned_suite(0), tmp_path)
        loop = OptimizationLoop(state)
        report = loop.run_iteration()
        assert report.proposals_attempted == len(state.memory)
        assert report.proposals_accepted + report.proposals_rolled_back == report.proposals_attempted

    def test_cluster_count_and_noise_archived(self, tmp_path):
        state = make_state(build_convergence_suite(0), tmp_path)
        OptimizationLoop(state).run_iteration()
        doc = state.archive.read_json(1, "clusters.json")
        assert len(doc["clusters"]) == 3
        assert doc["noise"] == []
        assert all(len(c["members"]) == 2 for c in doc["clusters"])


class TestAblations:
    def test_no_clustering_yields_singletons(self, tmp_path):
        params = RunParams(seed=0, ablations=AblationFlags(no_clustering=True))
        state = make_state(build_convergence_suite(0), tmp_path, params=params)
        OptimizationLoop(state).run_iteration()
        doc = state.archive.read_json(1, "clusters.json")
        assert len(doc["clusters"]) == 6
        assert all(len(c["members"]) == 1 for c in doc["clusters"])

    def test_random_clustering_partitions_all_items(self, tmp_path):
        params = RunParams(seed=0, ablations=AblationFlags(random_clustering=True))
        state = make_state(build_convergence_suite(0), tmp_path, params=params)
        OptimizationLoop(state).run_iteration()
        doc = state.archive.read_json(1, "clusters.json")
        assert doc["noise"] == []
        member_total = sum(len(c["members"]) for c in doc["clusters"])
        assert member_total == 6
        assert len(doc["clusters"]) == 3  # matches the semantic cluster count

    def test_no_grao_keeps_exemplars_out_of_requests(self, tmp_path):
        params = RunParams(seed=0, ablations=AblationFlags(no_grao=True))
        bundle = build_convergence_suite(0)
        state = make_state(bundle, tmp_path, params=params)
        OptimizationLoop(state).optimize()
        assert bundle.optimizer.calls
        for call in bundle.optimizer.calls:
            assert "Past optimization attempts" not in call

    def test_full_arm_carries_exemplars_once_memory_fills(self, tmp_path):
        bundle = build_stability_suite(0)
        state = make_state(bundle, tmp_path)
        OptimizationLoop(state).optimize()
        assert any("Past optimization attempts" in call for call in bundle.optimizer.calls)

    def test_no_graph_flattens_snapshot(self, tmp_path):
        bundle = build_convergence_suite(0)
        flat_reply = json.dumps(
            {
                "problem_context": "whole prompt rewrite",
                "modifications": [
                    {
                        "operation": "REWRITE_NODE",
                        "target": {"node_id": "n1"},
                        "new_content": "rewritten "
                        + " ".join(s["marker"] for s in CONVERGENCE_FAMILIES.values())
                        + " Answer the user request accurately.",
                        "addresses_errors": [0],
                        "rationale": "rewrite everything",
                    }
                ],
            }
        )
        bundle.optimizer = ScriptedChatProvider("optimizer", {"Representative: ": flat_reply})
        params = RunParams(seed=0, ablations=AblationFlags(no_graph=True))
        state = make_state(bundle, tmp_path, params=params)
        loop = OptimizationLoop(state)
        assert all(loop.graph.nodes[r].is_leaf for r in loop.graph.roots)
        loop.run_iteration()
        snapshot = deserialize(state.archive.read_text(1, "graph_before.json"))
        assert all(snapshot.nodes[r].is_leaf for r in snapshot.roots)

    def test_no_structural_edits_rejects_add_node(self, tmp_path):
        params = RunParams(seed=0, ablations=AblationFlags(no_structural_edits=True))
        state = make_state(build_convergence_suite(0), tmp_path, params=params)
        loop = OptimizationLoop(state)
        report = loop.run_iteration()
        # Every scripted fix is an ADD_NODE, so nothing passes static checks.
        assert report.proposals_attempted == 0
        assert report.success_after == report.success_before


class TestOptimize:
    def test_convergence_reaches_ten_of_ten(self, tmp_path):
        state = make_state(build_convergence_suite(0), tmp_path)
        final_graph, reports = OptimizationLoop(state).optimize()
        meta = state.archive.read_run_meta()
        assert meta["final_success"] == 10
        assert meta["iterations_run"] <= 5
        assert reports[0].cluster_count == 3
        combined = "\n".join(materialize_all(final_graph).values())
        for spec in CONVERGENCE_FAMILIES.values():
            assert spec["marker"] in combined

    def test_early_stop_after_two_fruitless_iterations(self, tmp_path):
        state = make_state(build_convergence_suite(0), tmp_path)
        OptimizationLoop(state).optimize()
        meta = state.archive.read_run_meta()
        assert meta["iterations_run"] == 3  # fixpoint at 1, fruitless at 2 and 3

    def test_max_iterations_respected(self, tmp_path):
        params = RunParams(seed=0, max_iterations=1)
        state = make_state(build_convergence_suite(0), tmp_path, params=params)
        OptimizationLoop(state).optimize()
        assert state.archive.iterations() == [1]

    def test_stability_no_grao_ends_strictly_lower(self, tmp_path):
        full_state = make_state(build_stability_suite(0), tmp_path, subdir="full")
        OptimizationLoop(full_state).optimize()
        full_meta = full_state.archive.read_run_meta()

        params = RunParams(seed=0, ablations=AblationFlags(no_grao=True))
        ablated_state = make_state(build_stability_suite(0), tmp_path, params=params, subdir="ablated")
        OptimizationLoop(ablated_state).optimize()
        ablated_meta = ablated_state.archive.read_run_meta()

        assert ablated_meta["final_success"] < full_meta["final_success"]
        befores = [r.success_before for r in _reports_of(full_state.archive)]
        assert befores == sorted(befores)

    def test_rollback_keeps_other_families_fixed(self, tmp_path):
        state = make_state(build_poisoned_suite(0), tmp_path)
        final_graph, _ = OptimizationLoop(state).optimize()
        runner, evaluator = RuleBasedRunner(), MarkerEvaluator()
        trajectories = run_batch(final_graph, state.tasks, runner, evaluator, 4)
        by_family = {}
        for task, trajectory in zip(sorted(state.tasks, key=lambda t: t.task_id), trajectories):
            by_family.setdefault(task.failure_family, []).append(trajectory.outcome)
        assert set(by_family[""]) == {"success"}
        assert set(by_family["constraint-verification"]) == {"success"}
        assert set(by_family["source-citation"]) == {"success"}
        assert set(by_family["tool-schema"]) == {"failure"}


def _reports_of(archive: RunArchive) -> list[IterationReport]:
    return [report_from_doc(archive.read_json(i, "report.json")) for i in archive.iterations()]


class TestDeterminism:
    def _archive_bytes(self, root: Path) -> dict[str, bytes]:
        return {
            str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
        }

    def test_same_seed_twice_byte_identical(self, tmp_path):
        a = make_state(build_convergence_suite(0), tmp_path, subdir="a")
        OptimizationLoop(a).optimize()
        b = make_state(build_convergence_suite(0), tmp_path, subdir="b")
        OptimizationLoop(b).optimize()
        left = self._archive_bytes(a.archive.root)
        right = self._archive_bytes(b.archive.root)
        assert left == right

    def test_concurrency_does_not_change_archive(self, tmp_path):
        one = make_state(
            build_convergence_suite(0), tmp_path, params=RunParams(seed=0, concurrency=1), subdir="c1"
        )
        OptimizationLoop(one).optimize()
        eight = make_state(
            build_convergence_suite(0), tmp_path, params=RunParams(seed=0, concurrency=8), subdir="c8"
        )
        OptimizationLoop(eight).optimize()
        left = self._archive_bytes(one.archive.root)
        right = self._archive_bytes(eight.archive.root)
        # run_meta echoes the concurrency setting; everything else must match byte-wise.
        for side in (left, right):
            meta = json.loads(side["run_meta.json"])
            meta.pop("concurrency")
            side["run_meta.json"] = json.dumps(meta, sort_keys=True).encode()
        assert left == right


class TestArchiveReplay:
    def test_accepted_proposals_reproduce_final_graph(self, tmp_path):
        state = make_state(build_poisoned_suite(0), tmp_path)
        OptimizationLoop(state).optimize()
        archive = state.archive
        graph = deserialize(archive.read_text(1, "graph_before.json"))
        from tpgo.graph import apply_proposal, proposal_from_doc

        for iteration in archive.iterations():
            for record in archive.read_json(iteration, "proposals.json"):
                if record["accepted"]:
                    graph = apply_proposal(graph, proposal_from_doc(record["proposal"]))
            assert serialize(graph) == archive.read_text(iteration, "graph_after.json")
        assert graph_hash(graph) == archive.read_run_meta()["final_graph_hash"]


class TestCostReport:
    def _report(self, tokens: int, trajectories: int, wall=1.0) -> IterationReport:
        return IterationReport(
            iteration=1,
            success_before=0,
            success_after=0,
            task_count=1,
            proposals_attempted=0,
            proposals_accepted=0,
            proposals_rolled_back=0,
            cluster_count=0,
            noise_count=0,
            trajectory_count=trajectories,
            usage=UsageCounters(prompt_tokens=tokens, completion_tokens=0, wall_time=wall),
            wall_time=wall,
        )

    def test_simple_amortization(self):
        summary = cost_report([self._report(1000, 10)])
        assert summary.amortized_tokens == 100.0
        assert summary.trajectory_count == 10

    def test_zero_trajectories_is_an_error(self):
        with pytest.raises(CostReportError):
            cost_report([self._report(1000, 0)])

    def test_no_reports_is_an_error(self):
        with pytest.raises(CostReportError):
            cost_report([])

    def test_stub_metered_run_matches_ledger(self, tmp_path):
        state = make_state(build_convergence_suite(0), tmp_path)
        OptimizationLoop(state).optimize()
        reports = _reports_of(state.archive)
        summary = cost_report(reports)
        report_tokens = sum(r.usage.total_tokens for r in reports)
        assert summary.total_tokens == report_tokens
        assert summary.amortized_tokens == report_tokens / summary.trajectory_count
        # Iteration usage sums to the ledger total minus the final evaluation batch.
        ledger_total = state.ledger.total()
        meta = state.archive.read_run_meta()
        assert meta["usage"]["prompt_tokens"] == ledger_total.prompt_tokens
        assert meta["usage"]["completion_tokens"] == ledger_total.completion_tokens
        final_batch = [u for role, u in state.ledger.entries if role == "runner"]
        assert summary.trajectory_count == meta["trajectory_count"] - meta["task_count"]
