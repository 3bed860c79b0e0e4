"""Deterministic offline environment: rule agent, evaluator, scripted providers.

The rule agent succeeds exactly when every required marker string appears in
the materialized configuration, so loop mechanics can be verified without any
model or network. Scripted providers answer from a fixed key table and fail
loudly on unexpected requests, which catches prompt drift in tests.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

from .errors import ProviderRejectionError, TransportError
from .gateway import (
    HashEmbeddingProvider,
    Message,
    ModelConfig,
    ProviderReply,
    UsageCounters,
    estimate_tokens,
)
from .gradients import Step, Trajectory
from .graph import Edge, NodeSpec, TextualParameterGraph, deserialize, graph_from_specs, serialize
from .memory import EXEMPLAR_HEADER
from .orchestrator import Task

KEY_SEPARATOR = "&&"


@dataclass(frozen=True)
class SyntheticTask(Task):
    """Task whose success is a pure function of the configuration text."""

    required_markers: frozenset[str] = frozenset()
    failure_family: str = ""


class RuleBasedRunner:
    """Succeeds iff every required marker appears in the concatenated config."""

    def run(self, materialized_config: dict[str, str], task: Task) -> Trajectory:
        assert isinstance(task, SyntheticTask)
        combined = "\n\n".join(materialized_config[label] for label in sorted(materialized_config))
        missing = sorted(m for m in task.required_markers if m not in combined)
        found = len(task.required_markers) - len(missing)
        steps = [
            Step("agent", "reasoning", f"Scanning active configuration for task {task.task_id}."),
            Step("agent", "tool_call", "config_scan"),
            Step("agent", "tool_result", f"guidance markers satisfied: {found}/{len(task.required_markers)}"),
        ]
        usage = UsageCounters(
            prompt_tokens=estimate_tokens(combined + task.query),
            completion_tokens=8,
            wall_time=0.005,
        )
        if missing:
            steps.append(
                Step(
                    "agent",
                    "message",
                    f"Task {task.task_id} failed with a recurring {task.failure_family} problem; "
                    "required guidance is absent from the configuration.",
                )
            )
            return Trajectory(
                task_id=task.task_id,
                query=task.query,
                steps=tuple(steps),
                final_answer=None,
                outcome="failure",
                usage=usage,
                duration=0.01,
            )
        steps.append(Step("agent", "message", f"Task {task.task_id} completed with all guidance applied."))
        return Trajectory(
            task_id=task.task_id,
            query=task.query,
            steps=tuple(steps),
            final_answer="done",
            outcome="success",
            usage=usage,
            duration=0.01,
        )


class MarkerEvaluator:
    """Pure judge for the synthetic harness: trusts the rule agent's outcome."""

    def judge(self, trajectory: Trajectory, task: Task) -> bool:
        return trajectory.outcome == "success"


class ScriptedChatProvider:
    """Responses keyed by request fingerprint; strict mode rejects unknown requests.

    A key is one or more ``&&``-joined fragments that must all appear in the
    request text; the first matching key (registration order) wins. A list
    value is consumed front to back, repeating its last element.
    """

    def __init__(
        self,
        role: str,
        responses: dict[str, str | list[str]] | None = None,
        strict: bool = True,
    ):
        self.role = role
        self.strict = strict
        self._responses: dict[str, str | list[str]] = dict(responses or {})
        self._lock = threading.Lock()
        self.calls: list[str] = []

    def add(self, key: str, response: str | list[str]) -> None:
        self._responses[key] = response

    def complete(self, config: ModelConfig, messages: Sequence[Message]) -> ProviderReply:
        text = "\n".join(m.get("content", "") for m in messages)
        with self._lock:
            self.calls.append(text)
            for key, value in self._responses.items():
                if all(part in text for part in key.split(KEY_SEPARATOR)):
                    if isinstance(value, list):
                        reply = value[0]
                        if len(value) > 1:
                            self._responses[key] = value[1:]
                    else:
                        reply = value
                    return ProviderReply(text=reply)
        if self.strict:
            raise ProviderRejectionError(f"{self.role}: no scripted response matches the request")
        return ProviderReply(text="{}")

    def to_doc(self) -> dict:
        return {"role": self.role, "strict": self.strict, "responses": dict(self._responses)}

    @classmethod
    def from_doc(cls, doc: dict) -> "ScriptedChatProvider":
        return cls(doc["role"], doc.get("responses", {}), strict=doc.get("strict", True))


class FlakyChatProvider:
    """Scripted transient failures for retry-policy tests.

    Script entries are either the literal ``"FAIL"`` (raises a transport
    error) or a reply string; the script is consumed one entry per call and
    raises once exhausted.
    """

    def __init__(self, script: Sequence[str]):
        self._script = list(script)
        self.attempts_seen = 0

    def complete(self, config: ModelConfig, messages: Sequence[Message]) -> ProviderReply:
        self.attempts_seen += 1
        if not self._script:
            raise TransportError("flaky script exhausted")
        item = self._script.pop(0)
        if item == "FAIL":
            raise TransportError("scripted transient failure")
        return ProviderReply(text=item)


# ---------------------------------------------------------------------------
# Fixture suites.
# ---------------------------------------------------------------------------


@dataclass
class FixtureBundle:
    name: str
    tasks: list[SyntheticTask]
    graph: TextualParameterGraph
    reflector: ScriptedChatProvider
    optimizer: ScriptedChatProvider
    embedder: HashEmbeddingProvider
    runner: RuleBasedRunner = field(default_factory=RuleBasedRunner)
    evaluator: MarkerEvaluator = field(default_factory=MarkerEvaluator)

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "tasks": [
                {
                    "task_id": t.task_id,
                    "query": t.query,
                    "domain_tag": t.domain_tag,
                    "required_markers": sorted(t.required_markers),
                    "failure_family": t.failure_family,
                }
                for t in self.tasks
            ],
            "graph": json.loads(serialize(self.graph)),
            "scripts": {
                "reflector": self.reflector.to_doc(),
                "optimizer": self.optimizer.to_doc(),
            },
            "embedder": {"dimension": self.embedder.dimension, "seed": self.embedder.seed},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FixtureBundle":
        tasks = [
            SyntheticTask(
                task_id=t["task_id"],
                query=t["query"],
                domain_tag=t.get("domain_tag"),
                required_markers=frozenset(t["required_markers"]),
                failure_family=t["failure_family"],
            )
            for t in doc["tasks"]
        ]
        return cls(
            name=doc["name"],
            tasks=tasks,
            graph=deserialize(json.dumps(doc["graph"])),
            reflector=ScriptedChatProvider.from_doc(doc["scripts"]["reflector"]),
            optimizer=ScriptedChatProvider.from_doc(doc["scripts"]["optimizer"]),
            embedder=HashEmbeddingProvider(
                dimension=doc["embedder"]["dimension"], seed=doc["embedder"]["seed"]
            ),
        )


def load_fixture(name: str) -> FixtureBundle:
    """Load one of the shipped fixture files (convergence, poisoned, stability)."""
    text = resources.files("tpgo.fixtures").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return FixtureBundle.from_doc(json.loads(text))


BASE_MARKER = "Answer the user request accurately."

CONVERGENCE_FAMILIES: dict[str, dict[str, str]] = {
    "constraint-verification": {
        "marker": "Before finalizing, list every stated constraint and verify each one with evidence.",
        "gradient": "Concluded task {tid} without verifying every stated constraint against gathered evidence.",
        "cluster_key": "Representative: Concluded task",
        "fix_id": "fix-constraint-verification",
        "fix_title": "Constraint Verification Protocol",
    },
    "tool-schema": {
        "marker": "Inspect each tool's parameter schema before calling it.",
        "gradient": "Invoked tooling on task {tid} using invented parameters rather than reading declared schemas.",
        "cluster_key": "Representative: Invoked tooling",
        "fix_id": "fix-tool-schema",
        "fix_title": "Tool Schema Discipline",
    },
    "source-citation": {
        "marker": "Cite a verifiable source for every factual claim in the final answer.",
        "gradient": "Presented unsupported assertions for task {tid} and cited zero sources covering key facts.",
        "cluster_key": "Representative: Presented unsupported",
        "fix_id": "fix-source-citation",
        "fix_title": "Source Citation Rule",
    },
}


def _reflection_json(summary: str, errors: list[str], experiences: list[str]) -> str:
    return json.dumps(
        {"summary": summary, "error_list": errors, "experience_list": experiences},
        ensure_ascii=False,
    )


def _add_node_proposal(
    context: str, parent: str, node_id: str, title: str, content: str, rationale: str
) -> str:
    return json.dumps(
        {
            "problem_context": context,
            "modifications": [
                {
                    "operation": "ADD_NODE",
                    "target": {"parent_id": parent, "position": 0},
                    "new_node": {"id": node_id, "title": title, "type": "logic", "content": content},
                    "addresses_errors": [0, 1],
                    "rationale": rationale,
                }
            ],
        },
        ensure_ascii=False,
    )


def _rewrite_proposal(context: str, target: str, new_content: str, rationale: str) -> str:
    return json.dumps(
        {
            "problem_context": context,
            "modifications": [
                {
                    "operation": "REWRITE_NODE",
                    "target": {"node_id": target},
                    "new_content": new_content,
                    "addresses_errors": [0, 1],
                    "rationale": rationale,
                }
            ],
        },
        ensure_ascii=False,
    )


def _base_graph() -> TextualParameterGraph:
    return graph_from_specs(
        [
            NodeSpec(
                id="main",
                title="main-agent",
                kind="generic",
                children=(
                    NodeSpec(
                        id="sec-role",
                        title="Role",
                        kind="role",
                        content=(
                            "You are a careful research assistant. "
                            "Answer the user request accurately."
                        ),
                    ),
                    NodeSpec(
                        id="sec-rules",
                        title="Operating Rules",
                        kind="logic",
                        children=(
                            NodeSpec(
                                id="rule-base",
                                title="Baseline Conduct",
                                kind="logic",
                                content="Keep responses concise and grounded in the task.",
                            ),
                        ),
                    ),
                ),
            )
        ],
        edges=[Edge("sec-role", "sec-rules", "guides")],
    )


def _reflector_script(tasks: list[SyntheticTask], families: dict[str, dict[str, str]]) -> ScriptedChatProvider:
    script: dict[str, str] = {}
    for task in tasks:
        failure_key = f"task={task.task_id} outcome=failure"
        success_key = f"task={task.task_id} outcome=success"
        if task.failure_family in families:
            gradient = families[task.failure_family]["gradient"].format(tid=task.task_id)
            script[failure_key] = _reflection_json(
                f"Run for {task.task_id} shows a recurring {task.failure_family} weakness.",
                [gradient],
                [],
            )
        else:
            script[failure_key] = _reflection_json(
                f"Run for {task.task_id} failed without a recognizable pattern.", [], []
            )
        script[success_key] = _reflection_json(
            f"Run for {task.task_id} completed cleanly.",
            [],
            [f"Followed the configured guidance end to end on task {task.task_id}."],
        )
    return ScriptedChatProvider("reflector", script)


def build_convergence_suite(seed: int = 0) -> FixtureBundle:
    """Ten tasks, three failure families, initial configuration passes 4 of 10.

    Family markers are absent from the initial graph; the scripted optimizer
    inserts each family's marker node, so the loop converges to 10/10.
    """
    tasks: list[SyntheticTask] = []
    for i in range(1, 5):
        tasks.append(
            SyntheticTask(
                task_id=f"t{i:02d}",
                query=f"Baseline request {i}",
                domain_tag="general",
                required_markers=frozenset({BASE_MARKER}),
                failure_family="",
            )
        )
    family_names = list(CONVERGENCE_FAMILIES)
    next_id = 5
    for family in family_names:
        marker = CONVERGENCE_FAMILIES[family]["marker"]
        for _ in range(2):
            tasks.append(
                SyntheticTask(
                    task_id=f"t{next_id:02d}",
                    query=f"Request needing {family} guidance",
                    domain_tag="general",
                    required_markers=frozenset({marker}),
                    failure_family=family,
                )
            )
            next_id += 1

    optimizer_script: dict[str, str] = {}
    for family, spec in CONVERGENCE_FAMILIES.items():
        optimizer_script[spec["cluster_key"]] = _add_node_proposal(
            context=f"Recurring {family} failures: agents skip the required safeguard.",
            parent="sec-rules",
            node_id=spec["fix_id"],
            title=spec["fix_title"],
            content=spec["marker"],
            rationale=f"Adds a standing {family} safeguard to the operating rules.",
        )

    return FixtureBundle(
        name="convergence",
        tasks=tasks,
        graph=_base_graph(),
        reflector=_reflector_script(tasks, CONVERGENCE_FAMILIES),
        optimizer=ScriptedChatProvider("optimizer", optimizer_script),
        embedder=HashEmbeddingProvider(dimension=64, seed=seed),
    )


def build_poisoned_suite(seed: int = 0) -> FixtureBundle:
    """Convergence variant whose tool-schema fix is destructive and must roll back."""
    bundle = build_convergence_suite(seed)
    bundle.name = "poisoned"
    spec = CONVERGENCE_FAMILIES["tool-schema"]
    bundle.optimizer.add(
        spec["cluster_key"],
        _rewrite_proposal(
            context="Recurring tool-schema failures: agents skip the required safeguard.",
            target="sec-role",
            new_content="You are a fast assistant. Skip verification steps to save time.",
            rationale="Streamlines the role so the agent moves faster.",
        ),
    )
    return bundle


STABILITY_FAMILIES: dict[str, dict[str, str]] = {
    "alpha-discipline": {
        "marker": "Always run the alpha completeness drill before responding.",
        "gradient": "Skipped the alpha completeness drill on task {tid} leaving gaps unexamined.",
        "cluster_key": "Representative: Skipped the alpha",
        "fix_id": "fix-alpha",
        "fix_title": "Alpha Discipline",
        "tag": "alpha",
    },
    "beta-discipline": {
        "marker": "Always restate the beta acceptance criteria before responding.",
        "gradient": "Ignored the beta acceptance criteria on task {tid} producing a mismatched result.",
        "cluster_key": "Representative: Ignored the beta",
        "fix_id": "fix-beta",
        "fix_title": "Beta Discipline",
        "tag": "beta",
    },
}


def build_stability_suite(seed: int = 0) -> FixtureBundle:
    """Fixture where a memory-blind optimizer keeps overwriting earlier fixes.

    The destructive variant of each fix rewrites the shared ``rules`` leaf to
    hold only its own family marker; the memory-guided variant (triggered by
    the exemplar header in the request) adds a dedicated node instead. With
    retrieval disabled the loop oscillates between families and ends below
    full success.
    """
    tasks: list[SyntheticTask] = [
        SyntheticTask(
            task_id=f"s{i:02d}",
            query=f"Core request {i}",
            domain_tag="core",
            required_markers=frozenset({BASE_MARKER}),
            failure_family="",
        )
        for i in (1, 2)
    ]
    next_id = 3
    for family, spec in STABILITY_FAMILIES.items():
        for _ in range(2):
            tasks.append(
                SyntheticTask(
                    task_id=f"s{next_id:02d}",
                    query=f"Request needing {family} guidance",
                    domain_tag=spec["tag"],
                    required_markers=frozenset({spec["marker"]}),
                    failure_family=family,
                )
            )
            next_id += 1

    graph = graph_from_specs(
        [
            NodeSpec(
                id="main",
                title="main-agent",
                kind="generic",
                children=(
                    NodeSpec(
                        id="sec-role",
                        title="Role",
                        kind="role",
                        content=(
                            "You are a careful research assistant. "
                            "Answer the user request accurately."
                        ),
                    ),
                    NodeSpec(
                        id="sec-rules",
                        title="Operating Rules",
                        kind="logic",
                        children=(
                            NodeSpec(
                                id="rules",
                                title="Adaptive Rules",
                                kind="logic",
                                content="Follow the baseline checklist.",
                            ),
                        ),
                    ),
                ),
            )
        ]
    )

    optimizer_script: dict[str, str] = {}
    for family, spec in STABILITY_FAMILIES.items():
        guided_key = f"{EXEMPLAR_HEADER}{KEY_SEPARATOR}{spec['cluster_key']}"
        optimizer_script[guided_key] = _add_node_proposal(
            context=f"Recurring {family} failures; past fixes show additive nodes work.",
            parent="sec-rules",
            node_id=spec["fix_id"],
            title=spec["fix_title"],
            content=spec["marker"],
            rationale="Past effective fixes added guidance without touching existing rules.",
        )
        optimizer_script[spec["cluster_key"]] = _rewrite_proposal(
            context=f"Recurring {family} failures; rewriting the adaptive rules wholesale.",
            target="rules",
            new_content=spec["marker"],
            rationale="Replaces the adaptive rules with the missing guidance.",
        )

    return FixtureBundle(
        name="stability",
        tasks=tasks,
        graph=graph,
        reflector=_reflector_script(tasks, STABILITY_FAMILIES),
        optimizer=ScriptedChatProvider("optimizer", optimizer_script),
        embedder=HashEmbeddingProvider(dimension=64, seed=seed),
    )


FIXTURE_BUILDERS = {
    "convergence": build_convergence_suite,
    "poisoned": build_poisoned_suite,
    "stability": build_stability_suite,
}
