"""Run configuration file loading and provider wiring.

The config file is YAML (JSON works too). Keys:

    suite: tasks.json                 # list of {task_id, query, reference_answer?, domain_tag?}
    graph: graph.json                 # initial graph document, or:
    prompts: {label: prompt.txt}      # raw prompts parsed at startup
    mode: exploratory | imitative
    archive: runs/out
    memory_path: shared/memory.jsonl  # optional; defaults into the archive
    providers:
      api_base: https://...           # or env TPGO_API_BASE
      parser:    {model: m, temperature: 0.7, top_p: 0.95}
      reflector: {model: m}
      optimizer: {model: m}
      embedder:  {model: m}           # or {stub: hash, dimension: 64, seed: 0}
    clustering: {eps: 0.3, min_samples: 2, dedupe_threshold: 0.95}
    grao: {retrieve_k: 8, n_pos: 2, n_neg: 1, pos_floor: 0.5, neg_ceiling: 0.25}
    concurrency: 8
    max_iterations: 5
    seed: 0
    regression_check: true
    validation_scope: subset | full
    ablations: {no_graph: false, no_structural_edits: false,
                no_clustering: false, random_clustering: false, no_grao: false}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .clustering import ClusteringParams
from .errors import ConfigError
from .gateway import (
    ENV_API_BASE,
    ChatProvider,
    EmbeddingProvider,
    HashEmbeddingProvider,
    ModelConfig,
    OpenAICompatibleChat,
    OpenAICompatibleEmbeddings,
)
from .graph import TextualParameterGraph, deserialize
from .memory import GraoParams
from .orchestrator import AblationFlags, RunParams, Task

ABLATION_KEYS = ("no_graph", "no_structural_edits", "no_clustering", "random_clustering", "no_grao")


@dataclass
class RunConfig:
    tasks: list[Task]
    graph: TextualParameterGraph | None
    prompts: list[tuple[str, str]]
    params: RunParams
    archive_dir: Path
    memory_path: Path | None
    chat_providers: dict[str, ChatProvider]
    model_configs: dict[str, ModelConfig]
    embedder: EmbeddingProvider


def _require(doc: dict, key: str):
    if key not in doc:
        raise ConfigError(f"missing required config key: {key}")
    return doc[key]


def load_tasks(path: Path) -> list[Task]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read task suite {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"task suite {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise ConfigError("task suite must be a non-empty JSON array")
    tasks = []
    for i, doc in enumerate(raw):
        if not isinstance(doc, dict) or "task_id" not in doc or "query" not in doc:
            raise ConfigError(f"task {i} needs task_id and query")
        tasks.append(
            Task(
                task_id=doc["task_id"],
                query=doc["query"],
                reference_answer=doc.get("reference_answer"),
                domain_tag=doc.get("domain_tag"),
            )
        )
    return tasks


def _model_config(doc: dict | None, role: str) -> ModelConfig:
    doc = doc or {}
    model = doc.get("model")
    if not model:
        raise ConfigError(f"missing required config key: providers.{role}.model")
    return ModelConfig(
        model_name=model,
        temperature=doc.get("temperature", 0.7),
        top_p=doc.get("top_p", 0.95),
        max_retries=doc.get("max_retries", 3),
        backoff_base=doc.get("backoff_base", 1.0),
    )


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    base = path.parent

    tasks = load_tasks(base / _require(doc, "suite"))

    mode = doc.get("mode", "exploratory")
    if mode == "imitative":
        missing = [t.task_id for t in tasks if t.reference_answer is None]
        if missing:
            raise ConfigError(f"imitative mode requires reference_answer on every task; missing: {missing[:3]}")

    graph = None
    prompts: list[tuple[str, str]] = []
    if "graph" in doc:
        graph_path = base / doc["graph"]
        try:
            graph = deserialize(graph_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read graph {graph_path}: {exc}") from exc
    elif "prompts" in doc:
        if not isinstance(doc["prompts"], dict) or not doc["prompts"]:
            raise ConfigError("prompts must be a non-empty mapping of label to file")
        for label, rel in doc["prompts"].items():
            prompt_path = base / rel
            try:
                prompts.append((label, prompt_path.read_text(encoding="utf-8")))
            except OSError as exc:
                raise ConfigError(f"cannot read prompt {prompt_path}: {exc}") from exc
    else:
        raise ConfigError("missing required config key: graph (or prompts)")

    clustering_doc = doc.get("clustering", {})
    grao_doc = doc.get("grao", {})
    ablations_doc = doc.get("ablations", {})
    for key in ablations_doc:
        if key not in ABLATION_KEYS:
            raise ConfigError(f"unknown ablation flag: {key}")
    try:
        params = RunParams(
            mode=mode,
            concurrency=doc.get("concurrency", 8),
            max_iterations=doc.get("max_iterations", 5),
            seed=doc.get("seed", 0),
            clustering=ClusteringParams(
                eps=clustering_doc.get("eps", 0.3),
                min_samples=clustering_doc.get("min_samples", 2),
                dedupe_threshold=clustering_doc.get("dedupe_threshold", 0.95),
            ),
            grao=GraoParams(
                retrieve_k=grao_doc.get("retrieve_k", 8),
                n_pos=grao_doc.get("n_pos", 2),
                n_neg=grao_doc.get("n_neg", 1),
                pos_floor=grao_doc.get("pos_floor", 0.5),
                neg_ceiling=grao_doc.get("neg_ceiling", 0.25),
            ),
            regression_check=doc.get("regression_check", True),
            regression_sample=doc.get("regression_sample", 3),
            validation_scope=doc.get("validation_scope", "subset"),
            ablations=AblationFlags(**{k: bool(ablations_doc.get(k, False)) for k in ABLATION_KEYS}),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    providers_doc = doc.get("providers", {})
    api_base = providers_doc.get("api_base") or os.environ.get(ENV_API_BASE)
    if not api_base:
        raise ConfigError(f"missing required config key: providers.api_base (or env {ENV_API_BASE})")

    chat_providers: dict[str, ChatProvider] = {}
    model_configs: dict[str, ModelConfig] = {}
    for role in ("parser", "reflector", "optimizer"):
        model_configs[role] = _model_config(providers_doc.get(role), role)
        chat_providers[role] = OpenAICompatibleChat(base_url=api_base)

    embedder_doc = providers_doc.get("embedder") or {}
    if embedder_doc.get("stub") == "hash" or "model" not in embedder_doc:
        embedder: EmbeddingProvider = HashEmbeddingProvider(
            dimension=embedder_doc.get("dimension", 64), seed=embedder_doc.get("seed", 0)
        )
    else:
        embedder = OpenAICompatibleEmbeddings(embedder_doc["model"], base_url=api_base)

    archive_dir = base / _require(doc, "archive")
    memory_path = (base / doc["memory_path"]) if doc.get("memory_path") else None

    return RunConfig(
        tasks=tasks,
        graph=graph,
        prompts=prompts,
        params=params,
        archive_dir=archive_dir,
        memory_path=memory_path,
        chat_providers=chat_providers,
        model_configs=model_configs,
        embedder=embedder,
    )
