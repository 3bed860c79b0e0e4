"""Command-line surface: parse, optimize, replay, cost, memory and graph tools.

Exit codes: 0 success, 1 operational failure (provider error, replay
mismatch), 2 configuration error, 3 storage error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import load_config
from .errors import (
    ConfigError,
    GraphDiffError,
    ProviderRejectionError,
    SchemaError,
    StorageError,
    TpgoError,
    TransportError,
)
from .gateway import HashEmbeddingProvider, OpenAICompatibleChat, ModelConfig, UsageLedger
from .graph import (
    apply_proposal,
    deserialize,
    diff as graph_diff,
    edit_to_doc,
    graph_hash,
    materialize,
    proposal_from_doc,
    serialize,
)
from .harness import FIXTURE_BUILDERS, ScriptedChatProvider
from .memory import ExperienceMemory, entry_to_doc
from .orchestrator import (
    IterationReport,
    OptimizationLoop,
    RunArchive,
    RunState,
    cost_report,
    report_from_doc,
)
from .prompt_parser import parse_prompt, parse_prompts


@click.group()
def main():
    """Optimize the textual configuration of LLM multi-agent systems."""


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_scripted(script_file: str, role: str) -> ScriptedChatProvider:
    doc = json.loads(Path(script_file).read_text(encoding="utf-8"))
    if role in doc:
        doc = doc[role]
    return ScriptedChatProvider.from_doc(doc)


@main.command()
@click.argument("prompt_file", type=click.Path())
@click.option("--label", default="main", help="Agent label for the parsed root.")
@click.option("--out", "out_file", required=True, type=click.Path(), help="Graph document output path.")
@click.option("--script", "script_file", default=None, type=click.Path(), help="Scripted parser fixture file.")
@click.option("--model", default="stub", help="Parser model name (live mode).")
def parse(prompt_file: str, label: str, out_file: str, script_file: str | None, model: str):
    """Decompose a raw prompt file into a graph document."""
    try:
        prompt_text = Path(prompt_file).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(2, f"cannot read prompt file: {exc}")
    try:
        if script_file:
            provider = _load_scripted(script_file, "parser")
        else:
            provider = OpenAICompatibleChat()
    except (OSError, json.JSONDecodeError, ProviderRejectionError) as exc:
        _fail(2, f"parser provider unavailable: {exc}")
    try:
        outcome = parse_prompt(prompt_text, label, provider, config=ModelConfig(model_name=model))
    except (TransportError, ProviderRejectionError) as exc:
        _fail(1, f"parser provider failed: {exc}")
    try:
        Path(out_file).write_text(serialize(outcome.graph), encoding="utf-8")
    except OSError as exc:
        _fail(3, f"cannot write graph document: {exc}")
    graph = outcome.graph
    flag = " (fallback: single generic leaf)" if outcome.fallback else ""
    click.echo(f"parsed {label!r}: {len(graph.nodes)} nodes, {len(graph.edges)} edges{flag}")


def _print_report_table(reports: list[IterationReport]):
    click.echo(f"{'iter':>4}  {'before':>8}  {'after':>8}  {'accepted':>8}  {'rolled':>6}  {'tokens':>10}")
    for r in reports:
        click.echo(
            f"{r.iteration:>4}  {r.success_before:>3}/{r.task_count:<4}  {r.success_after:>3}/{r.task_count:<4}"
            f"  {r.proposals_accepted:>8}  {r.proposals_rolled_back:>6}  {r.usage.total_tokens:>10}"
        )


@main.command()
@click.option("--config", "config_file", type=click.Path(), default=None, help="Run config file.")
@click.option("--fixture", type=click.Choice(sorted(FIXTURE_BUILDERS)), default=None, help="Offline fixture suite.")
@click.option("--archive", "archive_dir", type=click.Path(), default=None, help="Archive directory.")
@click.option("--max-iterations", type=int, default=None)
@click.option("--concurrency", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--no-graph", is_flag=True, default=False)
@click.option("--no-structural-edits", is_flag=True, default=False)
@click.option("--no-clustering", is_flag=True, default=False)
@click.option("--random-clustering", is_flag=True, default=False)
@click.option("--no-grao", is_flag=True, default=False)
def optimize(
    config_file: str | None,
    fixture: str | None,
    archive_dir: str | None,
    max_iterations: int | None,
    concurrency: int | None,
    seed: int | None,
    no_graph: bool,
    no_structural_edits: bool,
    no_clustering: bool,
    random_clustering: bool,
    no_grao: bool,
):
    """Run the closed optimization loop and archive every artifact."""
    from dataclasses import replace

    from .orchestrator import AblationFlags

    overrides = {}
    if max_iterations is not None:
        overrides["max_iterations"] = max_iterations
    if concurrency is not None:
        overrides["concurrency"] = concurrency
    if seed is not None:
        overrides["seed"] = seed
    flag_overrides = {
        "no_graph": no_graph,
        "no_structural_edits": no_structural_edits,
        "no_clustering": no_clustering,
        "random_clustering": random_clustering,
        "no_grao": no_grao,
    }

    try:
        if fixture is not None:
            state = _fixture_state(fixture, archive_dir, overrides, flag_overrides)
        elif config_file is not None:
            state = _config_state(config_file, archive_dir, overrides, flag_overrides)
        else:
            raise ConfigError("either --config or --fixture is required")
    except ConfigError as exc:
        _fail(2, str(exc))
    except StorageError as exc:
        _fail(3, str(exc))

    try:
        loop = OptimizationLoop(state)
        final_graph, reports = loop.optimize()
    except StorageError as exc:
        _fail(3, str(exc))
    except (TransportError, ProviderRejectionError) as exc:
        _fail(1, f"provider failure: {exc}")

    _print_report_table(reports)
    meta = state.archive.read_run_meta()
    click.echo(f"final success {meta['final_success']}/{meta['task_count']}")
    click.echo(f"archive: {state.archive.root}")


def _apply_param_overrides(params, overrides: dict, flag_overrides: dict):
    from dataclasses import replace

    from .orchestrator import AblationFlags

    if overrides:
        params = replace(params, **overrides)
    if any(flag_overrides.values()):
        merged = {
            key: (getattr(params.ablations, key) or value) for key, value in flag_overrides.items()
        }
        params = replace(params, ablations=AblationFlags(**merged))
    return params


def _fixture_state(fixture: str, archive_dir: str | None, overrides: dict, flag_overrides: dict) -> RunState:
    from .orchestrator import RunParams

    seed = overrides.get("seed", 0)
    bundle = FIXTURE_BUILDERS[fixture](seed)
    params = _apply_param_overrides(RunParams(seed=seed), overrides, flag_overrides)
    archive = RunArchive(archive_dir or f"runs/{fixture}")
    memory = ExperienceMemory(archive.memory_path, bundle.embedder)
    return RunState(
        graph=bundle.graph,
        tasks=list(bundle.tasks),
        runner=bundle.runner,
        evaluator=bundle.evaluator,
        reflector=bundle.reflector,
        optimizer=bundle.optimizer,
        embedder=bundle.embedder,
        params=params,
        archive=archive,
        memory=memory,
        ledger=UsageLedger(),
        clock=lambda: 0.0,
    )


def _config_state(config_file: str, archive_dir: str | None, overrides: dict, flag_overrides: dict) -> RunState:
    config = load_config(config_file)
    params = _apply_param_overrides(config.params, overrides, flag_overrides)
    graph = config.graph
    ledger = UsageLedger()
    if graph is None:
        graph, fallbacks = parse_prompts(
            config.prompts,
            config.chat_providers["parser"],
            config=config.model_configs["parser"],
            ledger=ledger,
        )
        for label, fell_back in fallbacks.items():
            if fell_back:
                click.echo(f"warning: prompt {label!r} parsed as a single generic leaf", err=True)
    archive = RunArchive(archive_dir or config.archive_dir)
    memory = ExperienceMemory(config.memory_path or archive.memory_path, config.embedder)

    class _NoRunner:
        def run(self, materialized_config, task):
            raise TransportError(
                "no agent runner configured: live benchmark adapters are not part of this package; "
                "wire an AgentRunner via the Python API or use --fixture"
            )

    class _NoEvaluator:
        def judge(self, trajectory, task):
            return trajectory.outcome == "success"

    return RunState(
        graph=graph,
        tasks=config.tasks,
        runner=_NoRunner(),
        evaluator=_NoEvaluator(),
        reflector=config.chat_providers["reflector"],
        optimizer=config.chat_providers["optimizer"],
        embedder=config.embedder,
        params=params,
        archive=archive,
        memory=memory,
        reflector_config=config.model_configs["reflector"],
        optimizer_config=config.model_configs["optimizer"],
        ledger=ledger,
    )


@main.command()
@click.argument("archive_dir", type=click.Path())
def replay(archive_dir: str):
    """Recompute the final graph from archived proposals; verify hashes."""
    try:
        archive = RunArchive(archive_dir)
        iterations = archive.iterations()
        if not iterations:
            _fail(2, f"no iterations found under {archive_dir}")
        graph = deserialize(archive.read_text(iterations[0], "graph_before.json"))
        for iteration in iterations:
            for record in archive.read_json(iteration, "proposals.json"):
                if not record["accepted"]:
                    continue
                graph = apply_proposal(graph, proposal_from_doc(record["proposal"]))
            expected = archive.read_text(iteration, "graph_after.json")
            if serialize(graph) != expected:
                click.echo(f"replay diverges at iteration {iteration}")
                sys.exit(1)
        meta = archive.read_run_meta()
        if graph_hash(graph) != meta["final_graph_hash"]:
            click.echo("replay diverges at final graph hash")
            sys.exit(1)
    except (StorageError, OSError) as exc:
        _fail(3, str(exc))
    except (SchemaError, TpgoError) as exc:
        _fail(1, f"replay failed: {exc}")
    click.echo(f"replay ok: {graph_hash(graph)}")


@main.command()
@click.argument("archive_dir", type=click.Path())
def cost(archive_dir: str):
    """Summarize token and time cost with per-trajectory amortization."""
    try:
        archive = RunArchive(archive_dir)
        reports = [report_from_doc(archive.read_json(i, "report.json")) for i in archive.iterations()]
        summary = cost_report(reports)
    except (StorageError, OSError) as exc:
        _fail(3, str(exc))
    except TpgoError as exc:
        _fail(1, str(exc))
    click.echo(f"total tokens:          {summary.total_tokens}")
    click.echo(f"total wall time:       {summary.total_wall_time:.3f}s")
    click.echo(f"trajectories:          {summary.trajectory_count}")
    click.echo(f"tokens / trajectory:   {summary.amortized_tokens:.3f}")
    click.echo(f"time / trajectory:     {summary.amortized_time:.6f}s")


@main.group()
def memory():
    """Inspect an experience memory store."""


def _open_memory(store: str) -> ExperienceMemory:
    return ExperienceMemory(store, HashEmbeddingProvider())


@memory.command("ls")
@click.option("--store", required=True, type=click.Path())
def memory_ls(store: str):
    try:
        mem = _open_memory(store)
    except StorageError as exc:
        _fail(3, str(exc))
    click.echo(f"{'id':>6}  {'iter':>4}  {'E':>5}  {'accepted':>8}  context")
    for entry in mem.entries:
        context = entry.problem_context
        if len(context) > 60:
            context = context[:57] + "..."
        click.echo(
            f"{entry.entry_id:>6}  {entry.iteration:>4}  {entry.effectiveness:>5.2f}"
            f"  {str(entry.accepted):>8}  {context}"
        )


@memory.command("show")
@click.argument("entry_id")
@click.option("--store", required=True, type=click.Path())
def memory_show(entry_id: str, store: str):
    try:
        mem = _open_memory(store)
    except StorageError as exc:
        _fail(3, str(exc))
    entry = mem.get(entry_id)
    if entry is None:
        _fail(1, f"no entry {entry_id!r} in {store}")
    click.echo(json.dumps(entry_to_doc(entry), indent=2, ensure_ascii=False))


@memory.command("export")
@click.option("--store", required=True, type=click.Path())
@click.option("--out", "out_file", default=None, type=click.Path())
def memory_export(store: str, out_file: str | None):
    try:
        mem = _open_memory(store)
    except StorageError as exc:
        _fail(3, str(exc))
    doc = {"entries": [entry_to_doc(e) for e in mem.entries]}
    text = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    if out_file:
        Path(out_file).write_text(text, encoding="utf-8")
        click.echo(f"exported {len(mem.entries)} entries to {out_file}")
    else:
        click.echo(text, nl=False)


@main.group()
def graph():
    """Inspect and compare graph documents."""


def _load_graph(path: str):
    try:
        return deserialize(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        _fail(2, f"cannot read graph {path}: {exc}")
    except SchemaError as exc:
        _fail(1, f"invalid graph document: {exc}")


@graph.command("show")
@click.argument("graph_file", type=click.Path())
def graph_show(graph_file: str):
    g = _load_graph(graph_file)

    def walk(node_id: str, depth: int):
        node = g.node(node_id)
        shape = "leaf" if node.is_leaf else "section"
        click.echo(f"{'  ' * depth}{node.id} [{node.kind}/{shape}] {node.title}")
        for child in node.children:
            walk(child, depth + 1)

    for root in g.roots:
        walk(root, 0)
    for edge in sorted(g.edges, key=lambda e: (e.src, e.dst)):
        label = f" ({edge.label})" if edge.label else ""
        click.echo(f"edge: {edge.src} -> {edge.dst}{label}")
    click.echo(f"version {g.version}; {len(g.nodes)} nodes, {len(g.edges)} edges; hash {graph_hash(g)}")


@graph.command("materialize")
@click.argument("graph_file", type=click.Path())
@click.option("--root", "root_id", default=None, help="Materialize one root only.")
def graph_materialize(graph_file: str, root_id: str | None):
    g = _load_graph(graph_file)
    roots = [root_id] if root_id else list(g.roots)
    for root in roots:
        try:
            text = materialize(g, root)
        except TpgoError as exc:
            _fail(1, str(exc))
        click.echo(text)


@graph.command("diff")
@click.argument("before_file", type=click.Path())
@click.argument("after_file", type=click.Path())
def graph_diff_cmd(before_file: str, after_file: str):
    before = _load_graph(before_file)
    after = _load_graph(after_file)
    try:
        edits = graph_diff(before, after)
    except GraphDiffError as exc:
        _fail(1, str(exc))
    for edit in edits:
        click.echo(json.dumps(edit_to_doc(edit), ensure_ascii=False))
    click.echo(f"{len(edits)} edits", err=True)


if __name__ == "__main__":
    main()
