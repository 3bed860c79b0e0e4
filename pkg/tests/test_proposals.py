"""Proposal generation: schema validation, static checks, lowering."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from tpgo.clustering import EmbeddedGradient, make_cluster
from tpgo.errors import ProposalApplicationError, SchemaError
from tpgo.gateway import EmbeddingVector, HashEmbeddingProvider
from tpgo.graph import (
    AddNode,
    NodeSpec,
    apply_proposal,
    graph_from_specs,
    lower_proposal,
    materialize,
    proposal_from_doc,
    serialize,
)
from tpgo.harness import ScriptedChatProvider
from tpgo.memory import select_exemplars
from tpgo.proposals import ProposalRequest, propose, render_cluster, validate_proposal

from .test_memory import entry as memory_entry

FIXTURES = Path(__file__).parent / "fixtures"
EMBEDDER = HashEmbeddingProvider()


def agent_graph():
    return graph_from_specs(
        [
            NodeSpec(
                id="main",
                title="main-agent",
                kind="generic",
                children=(
                    NodeSpec(id="sec-role", title="Role", kind="role", content="You are a researcher."),
                    NodeSpec(
                        id="sec-rules",
                        title="Rules",
                        kind="logic",
                        children=(
                            NodeSpec(id="rule-1", title="Base", kind="logic", content="Be precise."),
                        ),
                    ),
                ),
            )
        ]
    )


def verification_cluster():
    texts = [
        "Concluded the task without systematically verifying all specified constraints.",
        "Focused verification on recent stats while neglecting equally critical historical data.",
    ]
    vectors = EMBEDDER.embed_raw(texts)
    members = [
        EmbeddedGradient(text=t, vector=v, sources=frozenset({f"t{i}"}))
        for i, (t, v) in enumerate(zip(texts, vectors))
    ]
    return make_cluster(members, cluster_id="c1")


def case_study_reply() -> str:
    return (FIXTURES / "case_study_proposal.json").read_text(encoding="utf-8")


class TestPropose:
    def test_case_study_stub_yields_add_node_proposal(self):
        provider = ScriptedChatProvider("optimizer", {"verifying all specified constraints": case_study_reply()})
        request = ProposalRequest(graph_snapshot=serialize(agent_graph()), cluster=verification_cluster())
        proposal = propose(request, provider)
        assert len(proposal.modifications) == 1
        mod = proposal.modifications[0]
        assert mod.operation == "ADD_NODE"
        assert mod.new_node.title == "Constraint Validation Protocol"

    def test_dangling_target_is_an_error_and_graph_untouched(self):
        bad = json.loads(case_study_reply())
        bad["modifications"][0]["target"]["parent_id"] = "no-such-section"
        provider = ScriptedChatProvider(
            "optimizer", {"verifying all specified constraints": json.dumps(bad, ensure_ascii=False)}
        )
        graph = agent_graph()
        before = serialize(graph)
        request = ProposalRequest(graph_snapshot=before, cluster=verification_cluster())
        with pytest.raises(ProposalApplicationError):
            propose(request, provider)
        assert serialize(graph) == before
        assert len(provider.calls) == 2  # repair retry happened

    def test_repair_retry_recovers_from_bad_first_reply(self):
        provider = ScriptedChatProvider(
            "optimizer",
            {"verifying all specified constraints": ["not a proposal", case_study_reply()]},
        )
        request = ProposalRequest(graph_snapshot=serialize(agent_graph()), cluster=verification_cluster())
        proposal = propose(request, provider)
        assert proposal.modifications[0].operation == "ADD_NODE"

    def test_exemplars_present_only_in_with_memory_request(self):
        reply = case_study_reply()
        cluster = verification_cluster()
        snapshot = serialize(agent_graph())
        ranked = [memory_entry("good", "verification gaps recur", 1.0)]
        block = select_exemplars(ranked, 1, 0)
        with_memory = ScriptedChatProvider("optimizer", {"constraints": reply})
        propose(ProposalRequest(snapshot, cluster, exemplars=block), with_memory)
        without_memory = ScriptedChatProvider("optimizer", {"constraints": reply})
        propose(ProposalRequest(snapshot, cluster, mode="without_memory"), without_memory)
        assert "Past optimization attempts" in with_memory.calls[0]
        assert "Past optimization attempts" not in without_memory.calls[0]

    def test_without_memory_mode_rejects_nonempty_block(self):
        ranked = [memory_entry("good", "verification gaps recur", 1.0)]
        block = select_exemplars(ranked, 1, 0)
        with pytest.raises(ValueError):
            ProposalRequest(serialize(agent_graph()), verification_cluster(), exemplars=block, mode="without_memory")

    def test_addresses_errors_out_of_range_rejected(self):
        bad = json.loads(case_study_reply())
        bad["modifications"][0]["addresses_errors"] = [0, 7]
        provider = ScriptedChatProvider(
            "optimizer", {"verifying all specified constraints": json.dumps(bad, ensure_ascii=False)}
        )
        request = ProposalRequest(graph_snapshot=serialize(agent_graph()), cluster=verification_cluster())
        with pytest.raises(SchemaError, match="out of range"):
            propose(request, provider)

    def test_allowed_operations_restriction(self):
        provider = ScriptedChatProvider("optimizer", {"constraints": case_study_reply()})
        request = ProposalRequest(graph_snapshot=serialize(agent_graph()), cluster=verification_cluster())
        with pytest.raises(SchemaError, match="not allowed"):
            propose(request, provider, allowed_operations=("REWRITE_NODE",))


class TestValidateProposal:
    def test_valid_proposal_applies_cleanly_afterwards(self):
        proposal = proposal_from_doc(json.loads(case_study_reply()))
        graph = agent_graph()
        edits = validate_proposal(proposal, graph, verification_cluster())
        assert len(edits) == 1
        result = apply_proposal(graph, proposal)
        assert result.version == graph.version + 1

    def test_static_validation_catches_rewrite_of_section(self):
        doc = {
            "problem_context": "broad rewrite",
            "modifications": [
                {
                    "operation": "REWRITE_NODE",
                    "target": {"node_id": "sec-rules"},
                    "new_content": "flattened",
                    "addresses_errors": [0],
                    "rationale": "",
                }
            ],
        }
        with pytest.raises(ProposalApplicationError):
            validate_proposal(proposal_from_doc(doc), agent_graph(), verification_cluster())


class TestLowering:
    def test_case_study_fixture_lowers_to_one_add_node(self):
        proposal = proposal_from_doc(json.loads(case_study_reply()))
        edits = lower_proposal(proposal)
        assert len(edits) == 1
        assert isinstance(edits[0], AddNode)
        assert edits[0].parent == "sec-rules"

    def test_merge_node_is_rejected(self):
        doc = {
            "problem_context": "merge two nodes",
            "modifications": [
                {"operation": "MERGE_NODE", "target": {"node_id": "rule-1"}, "rationale": ""}
            ],
        }
        with pytest.raises(ProposalApplicationError):
            lower_proposal(proposal_from_doc(doc))

    def test_deterministic(self):
        proposal = proposal_from_doc(json.loads(case_study_reply()))
        assert lower_proposal(proposal) == lower_proposal(proposal)


class TestCaseStudyApplication:
    def test_materialized_prompt_contains_checklist_protocol(self):
        proposal = proposal_from_doc(json.loads(case_study_reply()))
        graph = agent_graph()
        evolved = apply_proposal(graph, proposal)
        text = materialize(evolved, "main")
        assert "Create a validation checklist" in text
        assert "Mark each constraint" in text
        assert "✓ VERIFIED" in text and "✗ UNVERIFIED" in text
        assert "[✓]" in text and "[✗]" in text

    def test_new_node_lands_first_under_rules(self):
        proposal = proposal_from_doc(json.loads(case_study_reply()))
        evolved = apply_proposal(agent_graph(), proposal)
        assert evolved.nodes["sec-rules"].children[0] == "constraint-validation-protocol"


def test_render_cluster_numbers_members():
    text = render_cluster(verification_cluster())
    assert text.splitlines()[0].startswith("Representative: Concluded the task")
    assert "  0: Concluded the task" in text
    assert "  1: Focused verification" in text
