"""Decompose raw agent prompts into prompt graphs via the parser role."""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Sequence

from .errors import SchemaError
from .gateway import ChatProvider, ModelConfig, UsageLedger, chat
from .graph import (
    NODE_KINDS,
    NodeSpec,
    TextualParameterGraph,
    graph_from_specs,
    subtree_spec,
)

logger = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9]*\s*|\s*```$")


def load_template(name: str) -> str:
    return resources.files("tpgo.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_template(template: str, values: dict[str, str]) -> str:
    """Literal placeholder substitution; template bodies may contain braces."""
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


def extract_json(raw: str):
    """Parse a JSON object out of a model reply, tolerating code fences."""
    text = raw.strip()
    text = _FENCE_RE.sub("", text).strip()
    if not text.startswith("{"):
        start = text.find("{")
        end = text.rfind("}")
        if start < 0 or end <= start:
            raise SchemaError("reply contains no JSON object")
        text = text[start : end + 1]
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"reply is not valid JSON: {exc}") from exc


def _spec_from_parser_obj(obj, path: str) -> NodeSpec:
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: node must be an object")
    title = obj.get("title")
    if not isinstance(title, str) or not title:
        raise SchemaError(f"{path}: missing non-empty 'title'")
    kind = obj.get("type")
    if kind not in NODE_KINDS:
        raise SchemaError(f"{path}: type must be one of {'|'.join(NODE_KINDS)}")
    has_content = obj.get("content") is not None
    has_children = bool(obj.get("children"))
    if has_content and has_children:
        raise SchemaError(f"{path}: node must have either children or content, not both")
    if not has_content and not has_children:
        raise SchemaError(f"{path}: node must have either children or content")
    if has_content and (not isinstance(obj["content"], str) or not obj["content"]):
        raise SchemaError(f"{path}: content must be a non-empty string")
    children = tuple(
        _spec_from_parser_obj(c, f"{path}.children[{i}]") for i, c in enumerate(obj.get("children") or [])
    )
    return NodeSpec(title=title, kind=kind, content=obj.get("content") if has_content else None, children=children)


@dataclass(frozen=True)
class ParseOutcome:
    """Parsed graph plus the fallback flag; fallback graphs are single generic leaves."""

    graph: TextualParameterGraph
    fallback: bool
    attempts: int


def parse_prompt(
    prompt_text: str,
    prompt_label: str,
    parser: ChatProvider,
    *,
    config: ModelConfig | None = None,
    max_parse_attempts: int = 3,
    ledger: UsageLedger | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> ParseOutcome:
    """Ask the parser role to decompose one prompt into a graph.

    Transport failures propagate (after the gateway's own retries). Output
    that stays schema-invalid across ``max_parse_attempts`` calls degrades to
    a single generic leaf holding the whole prompt, flagged as a fallback.
    """
    if not prompt_text:
        raise ValueError("prompt_text must be non-empty")
    config = config or ModelConfig()
    system = load_template("parser")
    messages = [
        {"role": "system", "content": system},
        {"role": "user", "content": f"Prompt label: {prompt_label}\n\nPrompt text:\n{prompt_text}"},
    ]
    attempts = 0
    for attempt in range(1, max_parse_attempts + 1):
        attempts = attempt
        request = list(messages)
        if attempt > 1:
            request.append(
                {
                    "role": "user",
                    "content": "Your previous reply did not match the required JSON schema. "
                    "Reply with exactly one JSON object following the schema.",
                }
            )
        exchange = chat(parser, config, request, ledger=ledger, role="parser", clock=clock)
        try:
            obj = extract_json(exchange.response)
            spec = _spec_from_parser_obj(obj, "root")
            graph = graph_from_specs([spec])
        except SchemaError as exc:
            logger.warning("parser output invalid on attempt %d: %s", attempt, exc)
            continue
        return ParseOutcome(graph=graph, fallback=False, attempts=attempts)
    logger.warning("parser failed %d attempts for %r; falling back to a single leaf", attempts, prompt_label)
    fallback = graph_from_specs([NodeSpec(title=prompt_label, kind="generic", content=prompt_text)])
    return ParseOutcome(graph=fallback, fallback=True, attempts=attempts)


def parse_prompts(
    prompts: Sequence[tuple[str, str]],
    parser: ChatProvider,
    *,
    config: ModelConfig | None = None,
    max_parse_attempts: int = 3,
    ledger: UsageLedger | None = None,
) -> tuple[TextualParameterGraph, dict[str, bool]]:
    """Parse several (label, text) prompts into one multi-root graph.

    Returns the combined graph and a per-label fallback map. Node ids are
    allocated across the whole graph so proposals can target any agent.
    """
    specs: list[NodeSpec] = []
    fallbacks: dict[str, bool] = {}
    for label, text in prompts:
        outcome = parse_prompt(
            text, label, parser, config=config, max_parse_attempts=max_parse_attempts, ledger=ledger
        )
        root = outcome.graph.roots[0]
        spec = subtree_spec(outcome.graph, root)
        specs.append(_strip_ids(spec))
        fallbacks[label] = outcome.fallback
    return graph_from_specs(specs), fallbacks


def _strip_ids(spec: NodeSpec) -> NodeSpec:
    return NodeSpec(
        title=spec.title,
        kind=spec.kind,
        content=spec.content,
        children=tuple(_strip_ids(c) for c in spec.children),
    )
