"""The closed optimization loop: execute, reflect, cluster, propose, validate.

Task execution and reflection fan out across a thread pool; everything that
mutates state (graph swaps, memory appends, archive writes) runs on the
control thread. Results are sorted by task id before downstream use so the
whole transcript is independent of scheduling.
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

from . import clustering
from .clustering import ClusteringParams, EmbeddedGradient, ErrorCluster, GradientStore
from .errors import (
    CostReportError,
    ProposalApplicationError,
    SchemaError,
    StorageError,
    TransportError,
)
from .gateway import (
    ChatProvider,
    EmbeddingProvider,
    ModelConfig,
    UsageCounters,
    UsageLedger,
    embed,
)
from .gradients import (
    Step,
    TextualGradient,
    Trajectory,
    gradient_to_doc,
    reflect,
)
from .graph import (
    OptimizationProposal,
    TextualParameterGraph,
    apply_proposal,
    collapse_to_flat,
    graph_hash,
    proposal_from_doc,
    proposal_to_doc,
    serialize,
)
from .memory import (
    EMPTY_EXEMPLARS,
    ExemplarBlock,
    ExperienceEntry,
    ExperienceMemory,
    GraoParams,
    rank_group,
    select_exemplars,
)
from .proposals import ProposalRequest, propose

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "tpgo-archive/1"


@dataclass(frozen=True)
class Task:
    task_id: str
    query: str
    reference_answer: str | None = None
    domain_tag: str | None = None


class AgentRunner(Protocol):
    def run(self, materialized_config: dict[str, str], task: Task) -> Trajectory: ...


class Evaluator(Protocol):
    def judge(self, trajectory: Trajectory, task: Task) -> bool: ...


@dataclass(frozen=True)
class AblationFlags:
    no_graph: bool = False
    no_structural_edits: bool = False
    no_clustering: bool = False
    random_clustering: bool = False
    no_grao: bool = False


@dataclass(frozen=True)
class RunParams:
    mode: str = "exploratory"
    concurrency: int = 8
    max_iterations: int = 5
    seed: int = 0
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    grao: GraoParams = field(default_factory=GraoParams)
    regression_check: bool = True
    regression_sample: int = 3
    validation_scope: str = "subset"
    ablations: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.mode not in ("exploratory", "imitative"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.validation_scope not in ("subset", "full"):
            raise ValueError(f"unknown validation_scope {self.validation_scope!r}")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


@dataclass(frozen=True)
class ValidationReport:
    cluster_id: str
    subset_task_ids: tuple[str, ...]
    fixed_count: int
    subset_size: int
    effectiveness: float
    regressions: int
    accepted: bool

    def to_doc(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "subset_task_ids": list(self.subset_task_ids),
            "fixed_count": self.fixed_count,
            "subset_size": self.subset_size,
            "effectiveness": self.effectiveness,
            "regressions": self.regressions,
            "accepted": self.accepted,
        }


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    success_before: int
    success_after: int
    task_count: int
    proposals_attempted: int
    proposals_accepted: int
    proposals_rolled_back: int
    cluster_count: int
    noise_count: int
    trajectory_count: int
    usage: UsageCounters
    wall_time: float

    def to_doc(self) -> dict:
        return {
            "iteration": self.iteration,
            "success_before": self.success_before,
            "success_after": self.success_after,
            "task_count": self.task_count,
            "proposals_attempted": self.proposals_attempted,
            "proposals_accepted": self.proposals_accepted,
            "proposals_rolled_back": self.proposals_rolled_back,
            "cluster_count": self.cluster_count,
            "noise_count": self.noise_count,
            "trajectory_count": self.trajectory_count,
            "usage": {
                "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens,
                "wall_time": self.usage.wall_time,
            },
            "wall_time": self.wall_time,
        }


def report_from_doc(doc: dict) -> IterationReport:
    usage = doc.get("usage", {})
    return IterationReport(
        iteration=doc["iteration"],
        success_before=doc["success_before"],
        success_after=doc["success_after"],
        task_count=doc["task_count"],
        proposals_attempted=doc["proposals_attempted"],
        proposals_accepted=doc["proposals_accepted"],
        proposals_rolled_back=doc["proposals_rolled_back"],
        cluster_count=doc["cluster_count"],
        noise_count=doc["noise_count"],
        trajectory_count=doc["trajectory_count"],
        usage=UsageCounters(
            usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0), usage.get("wall_time", 0.0)
        ),
        wall_time=doc["wall_time"],
    )


# ---------------------------------------------------------------------------
# Batch execution.
# ---------------------------------------------------------------------------


def run_batch(
    graph: TextualParameterGraph,
    tasks: Sequence[Task],
    runner: AgentRunner,
    evaluator: Evaluator,
    concurrency: int,
    *,
    ledger: UsageLedger | None = None,
) -> list[Trajectory]:
    """Execute every task (bounded concurrency) and judge outcomes.

    Runner transport failures become environment-failure trajectories rather
    than batch errors. Results come back sorted by task id.
    """
    if not tasks:
        raise ValueError("tasks must be non-empty")
    from .graph import materialize_all

    config = materialize_all(graph)

    def run_one(task: Task) -> Trajectory:
        try:
            trajectory = runner.run(config, task)
        except TransportError as exc:
            logger.warning("task %s hit an environment failure: %s", task.task_id, exc)
            return Trajectory(
                task_id=task.task_id,
                query=task.query,
                steps=(Step("environment", "message", f"environment failure: {exc}"),),
                final_answer=None,
                outcome="failure",
                usage=UsageCounters(),
                duration=0.0,
                environment_failure=True,
            )
        if ledger is not None:
            ledger.record("runner", trajectory.usage)
        if trajectory.environment_failure:
            return trajectory
        verdict = evaluator.judge(trajectory, task)
        return replace(trajectory, outcome="success" if verdict else "failure")

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(run_one, tasks))
    results.sort(key=lambda t: t.task_id)
    return results


# ---------------------------------------------------------------------------
# Run archive.
# ---------------------------------------------------------------------------


class RunArchive:
    """Directory of per-iteration artifacts plus run metadata."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create archive at {self.root}: {exc}") from exc

    def iter_dir(self, iteration: int, create: bool = False) -> Path:
        path = self.root / f"iter_{iteration}"
        if create:
            try:
                path.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StorageError(f"cannot create {path}: {exc}") from exc
        return path

    def iterations(self) -> list[int]:
        out = []
        for child in self.root.iterdir():
            if child.is_dir() and child.name.startswith("iter_"):
                try:
                    out.append(int(child.name.split("_", 1)[1]))
                except ValueError:
                    continue
        return sorted(out)

    def write_text(self, iteration: int, name: str, text: str) -> None:
        path = self.iter_dir(iteration, create=True) / name
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc

    def write_json(self, iteration: int, name: str, doc) -> None:
        self.write_text(iteration, name, json.dumps(doc, indent=2, ensure_ascii=False) + "\n")

    def write_jsonl(self, iteration: int, name: str, docs: Sequence[dict]) -> None:
        self.write_text(
            iteration, name, "".join(json.dumps(d, ensure_ascii=False) + "\n" for d in docs)
        )

    def read_text(self, iteration: int, name: str) -> str:
        path = self.iter_dir(iteration) / name
        try:
            return path.read_text(encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc

    def read_json(self, iteration: int, name: str):
        return json.loads(self.read_text(iteration, name))

    def write_run_meta(self, doc: dict) -> None:
        path = self.root / "run_meta.json"
        try:
            path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc

    def read_run_meta(self) -> dict:
        path = self.root / "run_meta.json"
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc

    @property
    def memory_path(self) -> Path:
        return self.root / "memory.jsonl"

    @property
    def gradient_store_path(self) -> Path:
        return self.root / "gradient_store.jsonl"


# ---------------------------------------------------------------------------
# The loop.
# ---------------------------------------------------------------------------


@dataclass
class RunState:
    graph: TextualParameterGraph
    tasks: list[Task]
    runner: AgentRunner
    evaluator: Evaluator
    reflector: ChatProvider
    optimizer: ChatProvider
    embedder: EmbeddingProvider
    params: RunParams
    archive: RunArchive
    memory: ExperienceMemory
    reflector_config: ModelConfig = field(default_factory=ModelConfig)
    optimizer_config: ModelConfig = field(default_factory=ModelConfig)
    ledger: UsageLedger = field(default_factory=UsageLedger)
    clock: Callable[[], float] = time.perf_counter


class OptimizationLoop:
    def __init__(self, state: RunState):
        self.state = state
        self.graph = state.graph
        if state.params.ablations.no_graph:
            self.graph = collapse_to_flat(self.graph)
        self.rng = random.Random(state.params.seed)
        self.iteration = 0
        self.reports: list[IterationReport] = []
        self.status: dict[str, bool] = {}
        self._store = GradientStore(state.archive.gradient_store_path)
        self._trajectories_run = 0

    # -- helpers ----------------------------------------------------------

    def _tasks_by_id(self) -> dict[str, Task]:
        return {t.task_id: t for t in self.state.tasks}

    def _run(self, graph: TextualParameterGraph, tasks: Sequence[Task]) -> list[Trajectory]:
        trajectories = run_batch(
            graph,
            tasks,
            self.state.runner,
            self.state.evaluator,
            self.state.params.concurrency,
            ledger=self.state.ledger,
        )
        self._trajectories_run += len(trajectories)
        return trajectories

    def _reflect_all(self, trajectories: list[Trajectory]) -> list[TextualGradient]:
        state = self.state
        references: dict[str, str] = {}
        if state.params.mode == "imitative":
            references = {
                t.task_id: t.reference_answer for t in state.tasks if t.reference_answer is not None
            }

        def one(trajectory: Trajectory) -> TextualGradient | None:
            return reflect(
                trajectory,
                state.reflector,
                reference_answer=references.get(trajectory.task_id),
                config=state.reflector_config,
                ledger=state.ledger,
                clock=state.clock,
            )

        with ThreadPoolExecutor(max_workers=state.params.concurrency) as pool:
            results = list(pool.map(one, trajectories))
        gradients = [g for g in results if g is not None]
        gradients.sort(key=lambda g: g.source_task)
        return gradients

    def _embed_negatives(self, gradients: list[TextualGradient]) -> list[EmbeddedGradient]:
        texts: list[str] = []
        sources: list[str] = []
        for gradient in gradients:
            for entry in gradient.negative:
                texts.append(entry)
                sources.append(gradient.source_task)
        if not texts:
            return []
        vectors = embed(self.state.embedder, texts, ledger=self.state.ledger)
        return [
            EmbeddedGradient(text=text, vector=vector, sources=frozenset({source}))
            for text, vector, source in zip(texts, vectors, sources)
        ]

    def _cluster(self, deduped: list[EmbeddedGradient]) -> tuple[list[ErrorCluster], list[EmbeddedGradient]]:
        params = self.state.params
        if not deduped:
            return [], []
        if params.ablations.no_clustering:
            return clustering.singleton_clusters(deduped), []
        if params.ablations.random_clustering:
            reference, _ = clustering.dbscan(deduped, params.clustering)
            k = len(reference) if reference else max(1, math.isqrt(len(deduped)))
            k = min(k, len(deduped))
            return clustering.random_clusters(deduped, k, self.rng.randrange(2**31)), []
        return clustering.dbscan(deduped, params.clustering)

    def _exemplars(self, context: str) -> ExemplarBlock:
        params = self.state.params
        if params.ablations.no_grao:
            return EMPTY_EXEMPLARS
        retrieved = self.state.memory.retrieve(context, params.grao.retrieve_k)
        ranked = rank_group(retrieved)
        return select_exemplars(
            ranked,
            params.grao.n_pos,
            params.grao.n_neg,
            pos_floor=params.grao.pos_floor,
            neg_ceiling=params.grao.neg_ceiling,
        )

    def _regression_pool(self, subset: list[Task]) -> list[Task]:
        tags = {t.domain_tag for t in subset}
        subset_ids = {t.task_id for t in subset}
        pool = [
            t
            for t in self.state.tasks
            if self.status.get(t.task_id)
            and t.task_id not in subset_ids
            and t.domain_tag in tags
        ]
        return sorted(pool, key=lambda t: t.task_id)

    # -- pipeline ---------------------------------------------------------

    def run_iteration(self) -> IterationReport:
        state = self.state
        params = state.params
        self.iteration += 1
        iteration = self.iteration
        started = state.clock()
        usage_before = state.ledger.total()
        trajectories_before = self._trajectories_run
        tasks_by_id = self._tasks_by_id()

        graph_before = self.graph
        state.archive.write_text(iteration, "graph_before.json", serialize(graph_before))

        # 1. Execute and evaluate.
        trajectories = self._run(self.graph, state.tasks)
        self.status = {
            t.task_id: (t.outcome == "success" and not t.environment_failure) for t in trajectories
        }
        success_before = sum(self.status.values())

        # 2. Reflect.
        informative = [t for t in trajectories if not t.environment_failure]
        gradients = self._reflect_all(informative)
        state.archive.write_jsonl(iteration, "gradients.jsonl", [gradient_to_doc(g) for g in gradients])

        # 3. Embed, dedupe, cluster.
        embedded = self._embed_negatives(gradients)
        self._store.append(embedded, iteration)
        deduped = clustering.dedupe(embedded, params.clustering.dedupe_threshold)
        clusters, noise = self._cluster(deduped)
        order = sorted(
            range(len(clusters)),
            key=lambda i: (-len(clusters[i].members), clusters[i].member_tasks),
        )
        clusters = [
            replace(clusters[index], cluster_id=f"it{iteration}-c{rank + 1}")
            for rank, index in enumerate(order)
        ]
        state.archive.write_json(
            iteration,
            "clusters.json",
            {
                "clusters": [
                    {
                        "cluster_id": c.cluster_id,
                        "representative": c.representative,
                        "members": [
                            {"text": m.text, "sources": m.sorted_sources()} for m in c.members
                        ],
                        "member_tasks": list(c.member_tasks),
                    }
                    for c in clusters
                ],
                "noise": [{"text": m.text, "sources": m.sorted_sources()} for m in noise],
            },
        )

        # 4. Propose, validate, accept or roll back.
        validations: list[ValidationReport] = []
        proposal_records: list[dict] = []
        attempted = accepted = 0
        allowed_operations = ("REWRITE_NODE",) if params.ablations.no_structural_edits else None
        for cluster in clusters:
            subset = [
                tasks_by_id[tid]
                for tid in cluster.member_tasks
                if tid in tasks_by_id and not self.status.get(tid, False)
            ]
            if not subset:
                logger.info("cluster %s has no failing member tasks; skipping", cluster.cluster_id)
                continue
            exemplars = self._exemplars(cluster.representative)
            request = ProposalRequest(
                graph_snapshot=serialize(self.graph),
                cluster=cluster,
                exemplars=exemplars,
                mode="without_memory" if params.ablations.no_grao else "with_memory",
            )
            try:
                proposal = propose(
                    request,
                    state.optimizer,
                    config=state.optimizer_config,
                    ledger=state.ledger,
                    clock=state.clock,
                    allowed_operations=allowed_operations,
                )
            except (SchemaError, ProposalApplicationError, TransportError) as exc:
                logger.warning("cluster %s: proposal generation failed: %s", cluster.cluster_id, exc)
                continue
            attempted += 1
            pre_hash = graph_hash(self.graph)
            candidate = apply_proposal(self.graph, proposal)

            validation_trajectories = self._run(candidate, subset)
            fixed = sum(
                1 for t in validation_trajectories if t.outcome == "success" and not t.environment_failure
            )
            effectiveness = fixed / len(subset)

            regressions = 0
            if params.regression_check:
                pool = self._regression_pool(subset)
                sample_size = min(params.regression_sample, len(pool))
                sampled = self.rng.sample(pool, sample_size) if sample_size else []
                if sampled:
                    sampled = sorted(sampled, key=lambda t: t.task_id)
                    spot = self._run(candidate, sampled)
                    regressions = sum(1 for t in spot if t.outcome != "success")

            full_ok = True
            if params.validation_scope == "full":
                full_trajectories = self._run(candidate, state.tasks)
                full_success = sum(
                    1 for t in full_trajectories if t.outcome == "success" and not t.environment_failure
                )
                full_ok = full_success >= sum(self.status.values())

            accept = effectiveness > 0 and regressions == 0 and full_ok
            if accept:
                self.graph = candidate
                accepted += 1
                for trajectory in validation_trajectories:
                    if trajectory.outcome == "success":
                        self.status[trajectory.task_id] = True
            # else: the candidate is discarded; self.graph was never replaced,
            # so the post-rejection graph serializes byte-identically.

            entry = ExperienceEntry(
                entry_id=state.memory.next_entry_id(),
                problem_context=cluster.representative,
                context_vector=_representative_vector(cluster),
                proposal=proposal,
                effectiveness=effectiveness,
                accepted=accept,
                iteration=iteration,
                created_at=state.clock(),
            )
            state.memory.record(entry)

            validations.append(
                ValidationReport(
                    cluster_id=cluster.cluster_id,
                    subset_task_ids=tuple(t.task_id for t in subset),
                    fixed_count=fixed,
                    subset_size=len(subset),
                    effectiveness=effectiveness,
                    regressions=regressions,
                    accepted=accept,
                )
            )
            proposal_records.append(
                {
                    "cluster_id": cluster.cluster_id,
                    "proposal": proposal_to_doc(proposal),
                    "effectiveness": effectiveness,
                    "accepted": accept,
                    "graph_hash_before": pre_hash,
                    "graph_hash_after": graph_hash(self.graph),
                }
            )

        # 5/6. Report and archive.
        success_after = sum(self.status.values())
        state.archive.write_json(iteration, "proposals.json", proposal_records)
        state.archive.write_json(iteration, "validations.json", [v.to_doc() for v in validations])
        state.archive.write_text(iteration, "graph_after.json", serialize(self.graph))
        report = IterationReport(
            iteration=iteration,
            success_before=success_before,
            success_after=success_after,
            task_count=len(state.tasks),
            proposals_attempted=attempted,
            proposals_accepted=accepted,
            proposals_rolled_back=attempted - accepted,
            cluster_count=len(clusters),
            noise_count=len(noise),
            trajectory_count=self._trajectories_run - trajectories_before,
            usage=_usage_delta(usage_before, state.ledger.total()),
            wall_time=max(0.0, state.clock() - started),
        )
        state.archive.write_json(iteration, "report.json", report.to_doc())
        self.reports.append(report)
        return report

    def optimize(self) -> tuple[TextualParameterGraph, list[IterationReport]]:
        """Run iterations until the budget or two consecutive fruitless ones."""
        state = self.state
        started = state.clock()
        initial_hash = graph_hash(self.graph)
        fruitless_streak = 0
        for _ in range(state.params.max_iterations):
            report = self.run_iteration()
            fruitless = report.cluster_count == 0 or report.proposals_accepted == 0
            fruitless_streak = fruitless_streak + 1 if fruitless else 0
            if fruitless_streak >= 2:
                logger.info("early stop after %d iterations", report.iteration)
                break
        final_trajectories = self._run(self.graph, state.tasks)
        final_success = sum(
            1 for t in final_trajectories if t.outcome == "success" and not t.environment_failure
        )
        total = state.ledger.total()
        state.archive.write_run_meta(
            {
                "format": ARCHIVE_FORMAT,
                "mode": state.params.mode,
                "seed": state.params.seed,
                "concurrency": state.params.concurrency,
                "max_iterations": state.params.max_iterations,
                "ablations": {
                    "no_graph": state.params.ablations.no_graph,
                    "no_structural_edits": state.params.ablations.no_structural_edits,
                    "no_clustering": state.params.ablations.no_clustering,
                    "random_clustering": state.params.ablations.random_clustering,
                    "no_grao": state.params.ablations.no_grao,
                },
                "iterations_run": self.iteration,
                "task_count": len(state.tasks),
                "final_success": final_success,
                "initial_graph_hash": initial_hash,
                "final_graph_hash": graph_hash(self.graph),
                "trajectory_count": self._trajectories_run,
                "usage": {
                    "prompt_tokens": total.prompt_tokens,
                    "completion_tokens": total.completion_tokens,
                    "wall_time": total.wall_time,
                },
                "wall_time": max(0.0, state.clock() - started),
            }
        )
        return self.graph, list(self.reports)


def _representative_vector(cluster: ErrorCluster):
    for member in cluster.members:
        if member.text == cluster.representative:
            return member.vector
    return cluster.members[0].vector


def _usage_delta(before: UsageCounters, after: UsageCounters) -> UsageCounters:
    return UsageCounters(
        after.prompt_tokens - before.prompt_tokens,
        after.completion_tokens - before.completion_tokens,
        max(0.0, after.wall_time - before.wall_time),
    )


def optimize(state: RunState) -> tuple[TextualParameterGraph, list[IterationReport]]:
    """Convenience wrapper: run the whole loop for a prepared state."""
    return OptimizationLoop(state).optimize()


# ---------------------------------------------------------------------------
# Cost summary.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostSummary:
    total_prompt_tokens: int
    total_completion_tokens: int
    total_tokens: int
    total_wall_time: float
    trajectory_count: int
    amortized_tokens: float
    amortized_time: float

    def to_doc(self) -> dict:
        return {
            "total_prompt_tokens": self.total_prompt_tokens,
            "total_completion_tokens": self.total_completion_tokens,
            "total_tokens": self.total_tokens,
            "total_wall_time": self.total_wall_time,
            "trajectory_count": self.trajectory_count,
            "amortized_tokens": self.amortized_tokens,
            "amortized_time": self.amortized_time,
        }


def cost_report(reports: Sequence[IterationReport]) -> CostSummary:
    """Totals plus per-trajectory amortization across iteration reports."""
    if not reports:
        raise CostReportError("no iteration reports")
    prompt = sum(r.usage.prompt_tokens for r in reports)
    completion = sum(r.usage.completion_tokens for r in reports)
    wall = sum(r.wall_time for r in reports)
    trajectories = sum(r.trajectory_count for r in reports)
    if trajectories == 0:
        raise CostReportError("amortization undefined: zero trajectories")
    total_tokens = prompt + completion
    return CostSummary(
        total_prompt_tokens=prompt,
        total_completion_tokens=completion,
        total_tokens=total_tokens,
        total_wall_time=wall,
        trajectory_count=trajectories,
        amortized_tokens=total_tokens / trajectories,
        amortized_time=wall / trajectories,
    )
