"""Turn execution trajectories into structured textual feedback."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .errors import SchemaError, TransportError
from .gateway import ChatProvider, ModelConfig, UsageCounters, UsageLedger, chat
from .prompt_parser import extract_json, load_template, render_template

logger = logging.getLogger(__name__)

STEP_KINDS = ("reasoning", "tool_call", "tool_result", "message")
OUTCOMES = ("success", "failure", "unknown")


@dataclass(frozen=True)
class Step:
    actor: str
    kind: str
    payload: str


@dataclass(frozen=True)
class Trajectory:
    """One task execution record.

    ``environment_failure`` marks runs that died in transport or tool
    infrastructure rather than agent behavior; those are never reflected on.
    """

    task_id: str
    query: str
    steps: tuple[Step, ...]
    final_answer: str | None
    outcome: str
    usage: UsageCounters
    duration: float
    environment_failure: bool = False


@dataclass(frozen=True)
class TextualGradient:
    """Reflection output: negative entries name failure patterns, positive
    entries distill behavior worth keeping. ``low_information`` flags results
    that carry no usable signal (e.g. a failed run with no negative entry)."""

    source_task: str
    summary: str
    negative: tuple[str, ...]
    positive: tuple[str, ...]
    low_information: bool = False


def parse_reflection(raw: str) -> TextualGradient:
    """Parse a reflector reply; strict field names, extra fields ignored."""
    obj = extract_json(raw)
    if not isinstance(obj, dict):
        raise SchemaError("reflection must be a JSON object")
    for field_name in ("summary", "error_list", "experience_list"):
        if field_name not in obj:
            raise SchemaError(f"missing required field '{field_name}'")
    summary = obj["summary"]
    if not isinstance(summary, str):
        raise SchemaError("'summary' must be a string")
    negative = _string_list(obj["error_list"], "error_list")
    positive = _string_list(obj["experience_list"], "experience_list")
    return TextualGradient(source_task="", summary=summary, negative=negative, positive=positive)


def _string_list(value, field_name: str) -> tuple[str, ...]:
    if not isinstance(value, list):
        raise SchemaError(f"'{field_name}' must be an array of strings")
    out = []
    for item in value:
        if not isinstance(item, str) or not item:
            raise SchemaError(f"'{field_name}' must be an array of non-empty strings")
        out.append(item)
    return tuple(out)


def render_trajectory(trajectory: Trajectory) -> str:
    lines = [f"task={trajectory.task_id} outcome={trajectory.outcome}"]
    for step in trajectory.steps:
        lines.append(f"[{step.actor}/{step.kind}] {step.payload}")
    if trajectory.final_answer is not None:
        lines.append(f"final answer: {trajectory.final_answer}")
    return "\n".join(lines)


def reflect(
    trajectory: Trajectory,
    reflector: ChatProvider,
    *,
    reference_answer: str | None = None,
    config: ModelConfig | None = None,
    ledger: UsageLedger | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> TextualGradient | None:
    """Reflect on one trajectory; returns None when the trajectory is skipped.

    Environment failures are skipped outright. A schema-invalid reply gets one
    repair retry, then the trajectory is skipped (the batch continues). In
    imitative mode the reference answer goes to the provider for diagnosis
    only; any entry that leaks it verbatim is dropped.
    """
    if trajectory.environment_failure:
        logger.info("skipping reflection for %s: environment failure", trajectory.task_id)
        return None
    config = config or ModelConfig()
    reference_block = ""
    if reference_answer is not None:
        reference_block = f"\nReference answer (diagnosis only, never restate it):\n{reference_answer}"
    system = render_template(
        load_template("reflector"),
        {
            "task": trajectory.query,
            "trajectory": render_trajectory(trajectory),
            "reference_answer": reference_block,
        },
    )
    messages = [{"role": "system", "content": system}, {"role": "user", "content": "Analyze the trajectory."}]
    gradient: TextualGradient | None = None
    for attempt in (1, 2):
        request = list(messages)
        if attempt == 2:
            request.append(
                {
                    "role": "user",
                    "content": "Your previous reply did not match the required JSON schema. "
                    "Reply with exactly one JSON object with summary, error_list, experience_list.",
                }
            )
        exchange = chat(reflector, config, request, ledger=ledger, role="reflector", clock=clock)
        try:
            gradient = parse_reflection(exchange.response)
            break
        except SchemaError as exc:
            logger.warning("reflection for %s invalid on attempt %d: %s", trajectory.task_id, attempt, exc)
            gradient = None
    if gradient is None:
        logger.warning("skipping trajectory %s: reflection stayed schema-invalid", trajectory.task_id)
        return None
    gradient = replace(gradient, source_task=trajectory.task_id)
    if reference_answer and len(reference_answer) >= 4:
        gradient = _guard_leakage(gradient, reference_answer)
    if trajectory.outcome == "failure" and not gradient.negative:
        gradient = replace(gradient, low_information=True)
    return gradient


def _guard_leakage(gradient: TextualGradient, reference_answer: str) -> TextualGradient:
    def clean(entries: tuple[str, ...], kind: str) -> tuple[str, ...]:
        kept = []
        for entry in entries:
            if reference_answer in entry:
                logger.warning(
                    "dropping %s gradient entry for %s: restates the reference answer",
                    kind,
                    gradient.source_task,
                )
                continue
            kept.append(entry)
        return tuple(kept)

    return replace(
        gradient,
        negative=clean(gradient.negative, "negative"),
        positive=clean(gradient.positive, "positive"),
    )


def reflect_batch(
    trajectories: Sequence[Trajectory],
    reflector: ChatProvider,
    *,
    references: dict[str, str] | None = None,
    config: ModelConfig | None = None,
    ledger: UsageLedger | None = None,
    clock: Callable[[], float] = time.perf_counter,
    executor=None,
) -> list[TextualGradient]:
    """Reflect a batch (optionally concurrently) and return results sorted by task id."""
    references = references or {}

    def one(trajectory: Trajectory) -> TextualGradient | None:
        return reflect(
            trajectory,
            reflector,
            reference_answer=references.get(trajectory.task_id),
            config=config,
            ledger=ledger,
            clock=clock,
        )

    results: list[TextualGradient | None]
    if executor is None:
        results = [one(t) for t in trajectories]
    else:
        results = list(executor.map(one, trajectories))
    gradients = [g for g in results if g is not None]
    gradients.sort(key=lambda g: g.source_task)
    return gradients


def gradient_to_doc(gradient: TextualGradient) -> dict:
    return {
        "source_task": gradient.source_task,
        "summary": gradient.summary,
        "negative": list(gradient.negative),
        "positive": list(gradient.positive),
        "low_information": gradient.low_information,
    }


def gradient_from_doc(doc: dict) -> TextualGradient:
    return TextualGradient(
        source_task=doc["source_task"],
        summary=doc["summary"],
        negative=tuple(doc["negative"]),
        positive=tuple(doc["positive"]),
        low_information=doc.get("low_information", False),
    )


def trajectory_to_doc(trajectory: Trajectory) -> dict:
    return {
        "task_id": trajectory.task_id,
        "query": trajectory.query,
        "steps": [{"actor": s.actor, "kind": s.kind, "payload": s.payload} for s in trajectory.steps],
        "final_answer": trajectory.final_answer,
        "outcome": trajectory.outcome,
        "usage": {
            "prompt_tokens": trajectory.usage.prompt_tokens,
            "completion_tokens": trajectory.usage.completion_tokens,
            "wall_time": trajectory.usage.wall_time,
        },
        "duration": trajectory.duration,
        "environment_failure": trajectory.environment_failure,
    }
