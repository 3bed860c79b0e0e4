"""Generate graph-edit proposals for error clusters via the optimizer role."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

from .clustering import ErrorCluster
from .errors import ProposalApplicationError, SchemaError
from .gateway import ChatProvider, ModelConfig, UsageLedger, chat
from .graph import (
    GraphEdit,
    OptimizationProposal,
    TextualParameterGraph,
    apply_proposal,
    deserialize,
    lower_proposal,
    proposal_from_doc,
)
from .memory import EMPTY_EXEMPLARS, ExemplarBlock
from .prompt_parser import extract_json, load_template, render_template

logger = logging.getLogger(__name__)

lower = lower_proposal


@dataclass(frozen=True)
class ProposalRequest:
    """Everything the optimizer role sees for one cluster."""

    graph_snapshot: str
    cluster: ErrorCluster
    exemplars: ExemplarBlock = EMPTY_EXEMPLARS
    mode: str = "with_memory"

    def __post_init__(self):
        if self.mode not in ("with_memory", "without_memory"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "without_memory" and not self.exemplars.empty:
            raise ValueError("without_memory requests must carry an empty exemplar block")


def render_cluster(cluster: ErrorCluster) -> str:
    lines = [f"Representative: {cluster.representative}", "Member errors:"]
    for index, member in enumerate(cluster.members):
        lines.append(f"  {index}: {member.text}")
    lines.append(f"Affected tasks: {', '.join(cluster.member_tasks)}")
    return "\n".join(lines)


def validate_proposal(
    proposal: OptimizationProposal,
    snapshot: TextualParameterGraph,
    cluster: ErrorCluster,
    *,
    allowed_operations: tuple[str, ...] | None = None,
) -> list[GraphEdit]:
    """Static checks: targets resolve, error indices in range, edits apply cleanly.

    A dry run against the snapshot guarantees the proposal will apply without
    surprises on the same graph version.
    """
    member_count = len(cluster.members)
    for index, mod in enumerate(proposal.modifications):
        if allowed_operations is not None and mod.operation not in allowed_operations:
            raise SchemaError(
                f"modification {index}: operation {mod.operation!r} not allowed in this arm"
            )
        for error_index in mod.addresses_errors:
            if not (0 <= error_index < member_count):
                raise SchemaError(
                    f"modification {index}: addresses_errors index {error_index} out of range"
                )
    edits = lower_proposal(proposal)
    apply_proposal(snapshot, proposal)  # dry run; discards the result
    return edits


def propose(
    request: ProposalRequest,
    optimizer: ChatProvider,
    *,
    config: ModelConfig | None = None,
    ledger: UsageLedger | None = None,
    clock: Callable[[], float] = time.perf_counter,
    allowed_operations: tuple[str, ...] | None = None,
) -> OptimizationProposal:
    """Ask the optimizer role for one proposal; invalid output gets one repair retry.

    Raises SchemaError or ProposalApplicationError when the reply stays
    invalid after the repair attempt; transport errors propagate.
    """
    if not request.cluster.members:
        raise ValueError("cluster must be non-empty")
    snapshot = deserialize(request.graph_snapshot)
    config = config or ModelConfig()
    body = render_template(
        load_template("optimizer"),
        {
            "graph": request.graph_snapshot,
            "error_cluster": render_cluster(request.cluster),
            "experiences": request.exemplars.rendered,
        },
    )
    messages = [
        {"role": "system", "content": body},
        {"role": "user", "content": "Produce the optimization proposal."},
    ]
    last_error: Exception | None = None
    for attempt in (1, 2):
        request_messages = list(messages)
        if attempt == 2:
            request_messages.append(
                {
                    "role": "user",
                    "content": f"Your previous proposal was invalid: {last_error}. "
                    "Reply with exactly one JSON object following the proposal schema.",
                }
            )
        exchange = chat(optimizer, config, request_messages, ledger=ledger, role="optimizer", clock=clock)
        try:
            proposal = proposal_from_doc(extract_json(exchange.response))
            validate_proposal(
                proposal, snapshot, request.cluster, allowed_operations=allowed_operations
            )
            return proposal
        except (SchemaError, ProposalApplicationError) as exc:
            logger.warning("proposal invalid on attempt %d: %s", attempt, exc)
            last_error = exc
    assert last_error is not None
    raise last_error
