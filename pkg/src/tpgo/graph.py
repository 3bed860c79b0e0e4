"""Typed prompt graph: the editable representation of an agent system's text.

A graph holds one containment tree per agent prompt (ordered roots) plus a
separate set of directed dependency edges. Materialization walks containment
only; dependency edges exist as optimizer context. Graph values are treated
as immutable: every edit application produces a new graph with a bumped
version, which is what makes rollback a byte-exact no-op.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Union

from .errors import (
    EditApplicationError,
    GraphDiffError,
    GraphValidationError,
    NodeNotFoundError,
    ProposalApplicationError,
    SchemaError,
)

GRAPH_FORMAT = "tpg-graph/1"
NODE_KINDS = ("role", "logic", "tool", "generic")
HEADING_MARKER = "#"

_ID_PATTERN = re.compile(r"^n(\d+)$")


@dataclass(frozen=True)
class PromptNode:
    """One semantic unit: either a leaf with content or a section with children."""

    id: str
    title: str
    kind: str
    content: str | None = None
    children: tuple[str, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return self.content is not None


@dataclass(frozen=True)
class Edge:
    """Directed dependency: the source informs, constrains, or contextualizes the target."""

    src: str
    dst: str
    label: str | None = None


@dataclass(frozen=True)
class TextualParameterGraph:
    roots: tuple[str, ...]
    nodes: dict[str, PromptNode]
    edges: frozenset[Edge]
    version: int = 1

    def node(self, node_id: str) -> PromptNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NodeNotFoundError(f"node {node_id!r} not in graph") from None

    def edge_pairs(self) -> set[tuple[str, str]]:
        return {(e.src, e.dst) for e in self.edges}


# ---------------------------------------------------------------------------
# Node specs: id-optional nested node descriptions, used by AddNode edits and
# by the proposal wire format.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeSpec:
    title: str
    kind: str
    content: str | None = None
    children: tuple["NodeSpec", ...] = ()
    id: str | None = None


def subtree_spec(graph: TextualParameterGraph, node_id: str) -> NodeSpec:
    """Extract a node and its descendants as a NodeSpec (ids preserved)."""
    node = graph.node(node_id)
    return NodeSpec(
        title=node.title,
        kind=node.kind,
        content=node.content,
        children=tuple(subtree_spec(graph, c) for c in node.children),
        id=node.id,
    )


# ---------------------------------------------------------------------------
# Graph edits.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewriteNode:
    target: str
    new_content: str


@dataclass(frozen=True)
class AddNode:
    parent: str
    position: int | None
    subtree: NodeSpec


@dataclass(frozen=True)
class DeleteNode:
    target: str


@dataclass(frozen=True)
class AddEdge:
    src: str
    dst: str
    label: str | None = None


@dataclass(frozen=True)
class PruneEdge:
    src: str
    dst: str


GraphEdit = Union[RewriteNode, AddNode, DeleteNode, AddEdge, PruneEdge]

OPERATION_NAMES = {
    "REWRITE_NODE": RewriteNode,
    "ADD_NODE": AddNode,
    "DELETE_NODE": DeleteNode,
    "ADD_EDGE": AddEdge,
    "PRUNE_EDGE": PruneEdge,
}


# ---------------------------------------------------------------------------
# Optimization proposals: the machine-readable edit plan produced per error
# cluster, kept in wire-document shape so it archives and replays losslessly.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Modification:
    operation: str
    target_node: str | None = None
    target_edge: tuple[str, str] | None = None
    position: int | None = None
    new_node: NodeSpec | None = None
    new_content: str | None = None
    addresses_errors: tuple[int, ...] = ()
    rationale: str = ""
    edge_label: str | None = None


@dataclass(frozen=True)
class OptimizationProposal:
    problem_context: str
    modifications: tuple[Modification, ...]


# ---------------------------------------------------------------------------
# Validation.
# ---------------------------------------------------------------------------


def validate_graph(graph: TextualParameterGraph) -> None:
    """Raise GraphValidationError naming the first violated invariant."""
    if not isinstance(graph.version, int) or graph.version < 0:
        raise GraphValidationError("version must be a non-negative integer")
    if not graph.roots:
        raise GraphValidationError("graph must have at least one root")
    for root in graph.roots:
        if root not in graph.nodes:
            raise GraphValidationError(f"root {root!r} missing from node table")
    if len(set(graph.roots)) != len(graph.roots):
        raise GraphValidationError("duplicate root id")
    parents: dict[str, str] = {}
    for node_id, node in graph.nodes.items():
        if not node_id:
            raise GraphValidationError("empty node id")
        if node.id != node_id:
            raise GraphValidationError(f"node table key {node_id!r} does not match node id {node.id!r}")
        if not node.title:
            raise GraphValidationError(f"node {node_id!r} has an empty title")
        if node.kind not in NODE_KINDS:
            raise GraphValidationError(f"node {node_id!r} has unknown kind {node.kind!r}")
        has_content = node.content is not None and node.content != ""
        has_children = len(node.children) > 0
        if node.content == "":
            raise GraphValidationError(f"node {node_id!r} has empty content")
        if has_content == has_children:
            raise GraphValidationError(
                f"node {node_id!r} must have exactly one of content or children"
            )
        for child in node.children:
            if child not in graph.nodes:
                raise GraphValidationError(f"node {node_id!r} references missing child {child!r}")
            if child in parents:
                raise GraphValidationError(f"node {child!r} has more than one parent")
            parents[child] = node_id
    for root in graph.roots:
        if root in parents:
            raise GraphValidationError(f"root {root!r} is also a child")
    # Reachability doubles as the cycle check: a containment cycle would leave
    # its nodes unreachable from any root (roots cannot be children).
    seen: set[str] = set()
    stack = list(graph.roots)
    while stack:
        node_id = stack.pop()
        if node_id in seen:
            raise GraphValidationError(f"node {node_id!r} reached twice (containment is not a forest)")
        seen.add(node_id)
        stack.extend(graph.nodes[node_id].children)
    unreachable = set(graph.nodes) - seen
    if unreachable:
        raise GraphValidationError(f"node {sorted(unreachable)[0]!r} unreachable from any root")
    pairs: set[tuple[str, str]] = set()
    for edge in graph.edges:
        if edge.src not in graph.nodes:
            raise GraphValidationError(f"edge source {edge.src!r} missing from node table")
        if edge.dst not in graph.nodes:
            raise GraphValidationError(f"edge target {edge.dst!r} missing from node table")
        if edge.src == edge.dst:
            raise GraphValidationError(f"self-loop edge on {edge.src!r}")
        pair = (edge.src, edge.dst)
        if pair in pairs:
            raise GraphValidationError(f"duplicate edge {pair!r}")
        pairs.add(pair)


def parent_map(graph: TextualParameterGraph) -> dict[str, str]:
    out: dict[str, str] = {}
    for node_id, node in graph.nodes.items():
        for child in node.children:
            out[child] = node_id
    return out


def subtree_ids(nodes: dict[str, PromptNode], node_id: str) -> list[str]:
    out = [node_id]
    for child in nodes[node_id].children:
        out.extend(subtree_ids(nodes, child))
    return out


# ---------------------------------------------------------------------------
# Materialization.
# ---------------------------------------------------------------------------


def materialize(graph: TextualParameterGraph, root: str) -> str:
    """Render one agent prompt: depth-first, child order, headings for sections.

    Internal nodes contribute a heading line of depth-many markers; leaves
    contribute their content verbatim. Blocks join with blank lines, so equal
    graphs produce byte-equal output.
    """
    if root not in graph.roots:
        raise NodeNotFoundError(f"{root!r} is not a root of this graph")
    blocks: list[str] = []

    def walk(node_id: str, depth: int) -> None:
        node = graph.node(node_id)
        if node.is_leaf:
            blocks.append(node.content or "")
            return
        blocks.append(f"{HEADING_MARKER * depth} {node.title}")
        for child in node.children:
            walk(child, depth + 1)

    walk(root, 1)
    return "\n\n".join(blocks)


def materialize_all(graph: TextualParameterGraph) -> dict[str, str]:
    """Materialize every root, keyed by the root node's title (the agent label)."""
    return {graph.node(r).title: materialize(graph, r) for r in graph.roots}


# ---------------------------------------------------------------------------
# Edit application.
# ---------------------------------------------------------------------------


class _IdAllocator:
    def __init__(self, existing: Iterable[str]):
        self._taken = set(existing)
        top = 0
        for node_id in self._taken:
            match = _ID_PATTERN.match(node_id)
            if match:
                top = max(top, int(match.group(1)))
        self._next = top + 1

    def claim(self, node_id: str | None) -> str:
        if node_id is not None:
            if node_id in self._taken:
                raise ValueError(f"node id {node_id!r} already in use")
            self._taken.add(node_id)
            return node_id
        while f"n{self._next}" in self._taken:
            self._next += 1
        fresh = f"n{self._next}"
        self._taken.add(fresh)
        self._next += 1
        return fresh


def _instantiate_spec(spec: NodeSpec, nodes: dict[str, PromptNode], alloc: _IdAllocator) -> str:
    if spec.kind not in NODE_KINDS:
        raise ValueError(f"unknown node kind {spec.kind!r}")
    has_content = spec.content is not None and spec.content != ""
    if has_content == bool(spec.children):
        raise ValueError(f"new node {spec.title!r} must have exactly one of content or children")
    node_id = alloc.claim(spec.id)
    child_ids = tuple(_instantiate_spec(child, nodes, alloc) for child in spec.children)
    nodes[node_id] = PromptNode(
        id=node_id,
        title=spec.title,
        kind=spec.kind,
        content=spec.content if has_content else None,
        children=child_ids,
    )
    return node_id


def apply_edits(graph: TextualParameterGraph, edits: Iterable[GraphEdit]) -> TextualParameterGraph:
    """Apply edits in order to a copy; all-or-nothing.

    Each edit is checked locally (missing targets, rewrite of a section, edge
    duplicates/self-loops, insertion under a leaf) and the failure carries its
    edit index; the finished graph is then revalidated as a whole. The input
    graph is never touched.
    """
    nodes = dict(graph.nodes)
    roots = list(graph.roots)
    edges: dict[tuple[str, str], Edge] = {(e.src, e.dst): e for e in graph.edges}
    alloc = _IdAllocator(nodes.keys())

    for index, edit in enumerate(edits):
        try:
            if isinstance(edit, RewriteNode):
                if edit.target not in nodes:
                    raise ValueError(f"missing target node {edit.target!r}")
                node = nodes[edit.target]
                if not node.is_leaf:
                    raise ValueError(f"cannot rewrite section node {edit.target!r}; rewrite targets leaves")
                if not edit.new_content:
                    raise ValueError("rewrite content must be non-empty")
                nodes[edit.target] = replace(node, content=edit.new_content)
            elif isinstance(edit, AddNode):
                if edit.parent not in nodes:
                    raise ValueError(f"missing parent node {edit.parent!r}")
                parent = nodes[edit.parent]
                if parent.is_leaf:
                    raise ValueError(f"cannot add a child under leaf {edit.parent!r}")
                children = list(parent.children)
                position = len(children) if edit.position is None else edit.position
                if not (0 <= position <= len(children)):
                    raise ValueError(f"position {position} out of range for parent {edit.parent!r}")
                new_id = _instantiate_spec(edit.subtree, nodes, alloc)
                children.insert(position, new_id)
                nodes[edit.parent] = replace(parent, children=tuple(children))
            elif isinstance(edit, DeleteNode):
                if edit.target not in nodes:
                    raise ValueError(f"missing target node {edit.target!r}")
                if edit.target in roots:
                    raise ValueError(f"cannot delete root node {edit.target!r}")
                doomed = set(subtree_ids(nodes, edit.target))
                for node_id, node in list(nodes.items()):
                    if node_id in doomed:
                        del nodes[node_id]
                    elif edit.target in node.children:
                        nodes[node_id] = replace(
                            node, children=tuple(c for c in node.children if c != edit.target)
                        )
                for pair in list(edges):
                    if pair[0] in doomed or pair[1] in doomed:
                        del edges[pair]
                alloc = _IdAllocator(nodes.keys())
            elif isinstance(edit, AddEdge):
                if edit.src not in nodes:
                    raise ValueError(f"missing edge source {edit.src!r}")
                if edit.dst not in nodes:
                    raise ValueError(f"missing edge target {edit.dst!r}")
                if edit.src == edit.dst:
                    raise ValueError(f"self-loop edge on {edit.src!r}")
                if (edit.src, edit.dst) in edges:
                    raise ValueError(f"duplicate edge ({edit.src!r}, {edit.dst!r})")
                edges[(edit.src, edit.dst)] = Edge(edit.src, edit.dst, edit.label)
            elif isinstance(edit, PruneEdge):
                if (edit.src, edit.dst) not in edges:
                    raise ValueError(f"missing edge ({edit.src!r}, {edit.dst!r})")
                del edges[(edit.src, edit.dst)]
            else:
                raise ValueError(f"unknown edit type {type(edit).__name__}")
        except ValueError as exc:
            raise EditApplicationError(f"edit {index} invalid: {exc}", index=index) from exc

    result = TextualParameterGraph(
        roots=tuple(roots),
        nodes=nodes,
        edges=frozenset(edges.values()),
        version=graph.version + 1,
    )
    try:
        validate_graph(result)
    except GraphValidationError as exc:
        raise EditApplicationError(f"edits leave graph invalid: {exc}", index=None) from exc
    return result


def lower_modification(mod: Modification) -> GraphEdit:
    """Map one proposal modification to its graph edit."""
    op = mod.operation
    if op not in OPERATION_NAMES:
        raise SchemaError(f"unknown operation {op!r}")
    if mod.new_node is not None and mod.new_content is not None:
        raise SchemaError("modification carries both new_node and new_content")
    if op == "REWRITE_NODE":
        if mod.target_node is None:
            raise SchemaError("REWRITE_NODE requires a node target")
        if mod.new_content is None:
            raise SchemaError("REWRITE_NODE requires new_content")
        return RewriteNode(mod.target_node, mod.new_content)
    if op == "ADD_NODE":
        if mod.target_node is None:
            raise SchemaError("ADD_NODE requires a parent node target")
        if mod.new_node is None:
            raise SchemaError("ADD_NODE requires new_node")
        return AddNode(mod.target_node, mod.position, mod.new_node)
    if op == "DELETE_NODE":
        if mod.target_node is None:
            raise SchemaError("DELETE_NODE requires a node target")
        return DeleteNode(mod.target_node)
    if mod.target_edge is None:
        raise SchemaError(f"{op} requires an edge target")
    src, dst = mod.target_edge
    if op == "ADD_EDGE":
        return AddEdge(src, dst, mod.edge_label)
    return PruneEdge(src, dst)


def lower_proposal(proposal: OptimizationProposal) -> list[GraphEdit]:
    """One edit per modification, order preserved."""
    edits = []
    for index, mod in enumerate(proposal.modifications):
        try:
            edits.append(lower_modification(mod))
        except SchemaError as exc:
            raise ProposalApplicationError(f"modification {index}: {exc}", modification_index=index) from exc
    return edits


def apply_proposal(graph: TextualParameterGraph, proposal: OptimizationProposal) -> TextualParameterGraph:
    """Apply a whole proposal atomically; returns the new graph (version + 1)."""
    if not proposal.modifications:
        raise ProposalApplicationError("proposal has no modifications", modification_index=None)
    edits = lower_proposal(proposal)
    try:
        return apply_edits(graph, edits)
    except EditApplicationError as exc:
        raise ProposalApplicationError(str(exc), modification_index=exc.index) from exc


def graph_hash(graph: TextualParameterGraph) -> str:
    return hashlib.sha256(serialize(graph).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Serialization: the versioned graph document (see schema/graph_document.schema.json).
# ---------------------------------------------------------------------------


def _node_to_obj(graph: TextualParameterGraph, node_id: str) -> dict:
    node = graph.node(node_id)
    obj: dict = {"id": node.id, "title": node.title, "type": node.kind}
    if node.is_leaf:
        obj["content"] = node.content
    else:
        obj["children"] = [_node_to_obj(graph, c) for c in node.children]
    return obj


def serialize(graph: TextualParameterGraph) -> str:
    """Deterministic JSON text; serializing twice yields identical bytes."""
    doc = {
        "format": GRAPH_FORMAT,
        "version": graph.version,
        "agents": [_node_to_obj(graph, r) for r in graph.roots],
        "edges": [
            {"from": e.src, "to": e.dst, "label": e.label}
            for e in sorted(graph.edges, key=lambda e: (e.src, e.dst))
        ],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def _node_from_obj(obj, nodes: dict[str, PromptNode], path: str) -> str:
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: node must be an object")
    for key in ("id", "title", "type"):
        if key not in obj:
            raise SchemaError(f"{path}: missing required field {key!r}")
    node_id = obj["id"]
    if not isinstance(node_id, str) or not node_id:
        raise SchemaError(f"{path}: id must be a non-empty string")
    if node_id in nodes:
        raise SchemaError(f"{path}: duplicate node id {node_id!r}")
    title = obj["title"]
    if not isinstance(title, str) or not title:
        raise SchemaError(f"{path}: title must be a non-empty string")
    kind = obj["type"]
    if kind not in NODE_KINDS:
        raise SchemaError(f"{path}: type must be one of {'|'.join(NODE_KINDS)}")
    has_content = "content" in obj
    has_children = "children" in obj
    if has_content and has_children:
        raise SchemaError(f"{path}: node must have either children or content, not both")
    if not has_content and not has_children:
        raise SchemaError(f"{path}: node must have either children or content")
    nodes[node_id] = PromptNode(id=node_id, title=title, kind=kind)  # placeholder, replaced below
    if has_content:
        content = obj["content"]
        if not isinstance(content, str) or not content:
            raise SchemaError(f"{path}: content must be a non-empty string")
        nodes[node_id] = PromptNode(id=node_id, title=title, kind=kind, content=content)
    else:
        children = obj["children"]
        if not isinstance(children, list) or not children:
            raise SchemaError(f"{path}: children must be a non-empty array")
        child_ids = tuple(
            _node_from_obj(child, nodes, f"{path}.children[{i}]") for i, child in enumerate(children)
        )
        nodes[node_id] = PromptNode(id=node_id, title=title, kind=kind, children=child_ids)
    return node_id


def deserialize(text: str) -> TextualParameterGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed graph document: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("graph document must be a JSON object")
    if doc.get("format") != GRAPH_FORMAT:
        raise SchemaError(f"format must be {GRAPH_FORMAT!r}")
    version = doc.get("version")
    if not isinstance(version, int) or version < 0:
        raise SchemaError("version must be a non-negative integer")
    agents = doc.get("agents")
    if not isinstance(agents, list) or not agents:
        raise SchemaError("agents must be a non-empty array")
    nodes: dict[str, PromptNode] = {}
    roots = tuple(_node_from_obj(agent, nodes, f"agents[{i}]") for i, agent in enumerate(agents))
    raw_edges = doc.get("edges", [])
    if not isinstance(raw_edges, list):
        raise SchemaError("edges must be an array")
    edges = set()
    for i, raw in enumerate(raw_edges):
        if not isinstance(raw, dict) or "from" not in raw or "to" not in raw:
            raise SchemaError(f"edges[{i}]: edge needs 'from' and 'to'")
        label = raw.get("label")
        if label is not None and not isinstance(label, str):
            raise SchemaError(f"edges[{i}]: label must be a string or null")
        edges.add(Edge(raw["from"], raw["to"], label))
    graph = TextualParameterGraph(roots=roots, nodes=nodes, edges=frozenset(edges), version=version)
    try:
        validate_graph(graph)
    except GraphValidationError as exc:
        raise SchemaError(str(exc)) from exc
    return graph


# ---------------------------------------------------------------------------
# Proposal and edit wire documents.
# ---------------------------------------------------------------------------


def _spec_to_doc(spec: NodeSpec) -> dict:
    doc: dict = {"title": spec.title, "type": spec.kind}
    if spec.id is not None:
        doc["id"] = spec.id
    if spec.children:
        doc["children"] = [_spec_to_doc(c) for c in spec.children]
    else:
        doc["content"] = spec.content
    return doc


def _spec_from_doc(doc, path: str) -> NodeSpec:
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: new_node must be an object")
    title = doc.get("title")
    if not isinstance(title, str) or not title:
        raise SchemaError(f"{path}: title must be a non-empty string")
    kind = doc.get("type", "generic")
    if kind not in NODE_KINDS:
        raise SchemaError(f"{path}: type must be one of {'|'.join(NODE_KINDS)}")
    node_id = doc.get("id")
    if node_id is not None and (not isinstance(node_id, str) or not node_id):
        raise SchemaError(f"{path}: id must be a non-empty string when present")
    has_content = "content" in doc and doc["content"] is not None
    has_children = bool(doc.get("children"))
    if has_content and has_children:
        raise SchemaError(f"{path}: node must have either children or content, not both")
    if not has_content and not has_children:
        raise SchemaError(f"{path}: node must have either children or content")
    if has_content and not isinstance(doc["content"], str):
        raise SchemaError(f"{path}: content must be a string")
    children = tuple(
        _spec_from_doc(c, f"{path}.children[{i}]") for i, c in enumerate(doc.get("children") or [])
    )
    return NodeSpec(
        title=title,
        kind=kind,
        content=doc.get("content") if has_content else None,
        children=children,
        id=node_id,
    )


def modification_to_doc(mod: Modification) -> dict:
    target: dict = {}
    if mod.target_edge is not None:
        target = {"from": mod.target_edge[0], "to": mod.target_edge[1]}
    elif mod.operation == "ADD_NODE":
        target = {"parent_id": mod.target_node}
        if mod.position is not None:
            target["position"] = mod.position
    elif mod.target_node is not None:
        target = {"node_id": mod.target_node}
    doc: dict = {
        "operation": mod.operation,
        "target": target,
        "addresses_errors": list(mod.addresses_errors),
        "rationale": mod.rationale,
    }
    if mod.new_node is not None:
        doc["new_node"] = _spec_to_doc(mod.new_node)
    if mod.new_content is not None:
        doc["new_content"] = mod.new_content
    if mod.edge_label is not None:
        doc["edge_label"] = mod.edge_label
    return doc


def modification_from_doc(doc, path: str) -> Modification:
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: modification must be an object")
    operation = doc.get("operation")
    if not isinstance(operation, str) or not operation:
        raise SchemaError(f"{path}: missing required field 'operation'")
    target = doc.get("target")
    if not isinstance(target, dict):
        raise SchemaError(f"{path}: missing required field 'target'")
    new_node_doc = doc.get("new_node")
    new_content = doc.get("new_content")
    if new_node_doc is not None and new_content is not None:
        raise SchemaError(f"{path}: modification carries both new_node and new_content")
    if new_content is not None and not isinstance(new_content, str):
        raise SchemaError(f"{path}: new_content must be a string")
    addresses = doc.get("addresses_errors", [])
    if not isinstance(addresses, list) or any(not isinstance(a, int) for a in addresses):
        raise SchemaError(f"{path}: addresses_errors must be an array of integers")
    rationale = doc.get("rationale", "")
    if not isinstance(rationale, str):
        raise SchemaError(f"{path}: rationale must be a string")
    target_node = None
    target_edge = None
    position = None
    if "from" in target or "to" in target:
        if not isinstance(target.get("from"), str) or not isinstance(target.get("to"), str):
            raise SchemaError(f"{path}: edge target needs string 'from' and 'to'")
        target_edge = (target["from"], target["to"])
    elif "parent_id" in target:
        if not isinstance(target["parent_id"], str):
            raise SchemaError(f"{path}: parent_id must be a string")
        target_node = target["parent_id"]
        position = target.get("position")
        if position is not None and not isinstance(position, int):
            raise SchemaError(f"{path}: position must be an integer")
    elif "node_id" in target:
        if not isinstance(target["node_id"], str):
            raise SchemaError(f"{path}: node_id must be a string")
        target_node = target["node_id"]
    elif operation in OPERATION_NAMES:
        raise SchemaError(f"{path}: target must name a node_id, parent_id, or edge pair")
    new_node = _spec_from_doc(new_node_doc, f"{path}.new_node") if new_node_doc is not None else None
    edge_label = doc.get("edge_label")
    if edge_label is not None and not isinstance(edge_label, str):
        raise SchemaError(f"{path}: edge_label must be a string")
    return Modification(
        operation=operation,
        target_node=target_node,
        target_edge=target_edge,
        position=position,
        new_node=new_node,
        new_content=new_content,
        addresses_errors=tuple(addresses),
        rationale=rationale,
        edge_label=edge_label,
    )


def proposal_to_doc(proposal: OptimizationProposal) -> dict:
    return {
        "problem_context": proposal.problem_context,
        "modifications": [modification_to_doc(m) for m in proposal.modifications],
    }


def proposal_from_doc(doc) -> OptimizationProposal:
    if not isinstance(doc, dict):
        raise SchemaError("proposal must be an object")
    context = doc.get("problem_context")
    if not isinstance(context, str) or not context:
        raise SchemaError("missing required field 'problem_context'")
    mods = doc.get("modifications")
    if not isinstance(mods, list) or not mods:
        raise SchemaError("modifications must be a non-empty array")
    return OptimizationProposal(
        problem_context=context,
        modifications=tuple(
            modification_from_doc(m, f"modifications[{i}]") for i, m in enumerate(mods)
        ),
    )


def edit_to_doc(edit: GraphEdit) -> dict:
    if isinstance(edit, RewriteNode):
        return {"op": "REWRITE_NODE", "target": edit.target, "new_content": edit.new_content}
    if isinstance(edit, AddNode):
        return {
            "op": "ADD_NODE",
            "parent": edit.parent,
            "position": edit.position,
            "subtree": _spec_to_doc(edit.subtree),
        }
    if isinstance(edit, DeleteNode):
        return {"op": "DELETE_NODE", "target": edit.target}
    if isinstance(edit, AddEdge):
        return {"op": "ADD_EDGE", "from": edit.src, "to": edit.dst, "label": edit.label}
    return {"op": "PRUNE_EDGE", "from": edit.src, "to": edit.dst}


def edit_from_doc(doc) -> GraphEdit:
    op = doc.get("op")
    if op == "REWRITE_NODE":
        return RewriteNode(doc["target"], doc["new_content"])
    if op == "ADD_NODE":
        return AddNode(doc["parent"], doc.get("position"), _spec_from_doc(doc["subtree"], "subtree"))
    if op == "DELETE_NODE":
        return DeleteNode(doc["target"])
    if op == "ADD_EDGE":
        return AddEdge(doc["from"], doc["to"], doc.get("label"))
    if op == "PRUNE_EDGE":
        return PruneEdge(doc["from"], doc["to"])
    raise SchemaError(f"unknown edit op {op!r}")


# ---------------------------------------------------------------------------
# Structural diff.
# ---------------------------------------------------------------------------


def diff(before: TextualParameterGraph, after: TextualParameterGraph) -> list[GraphEdit]:
    """Edit list turning ``before`` into a graph materializing like ``after``.

    Matching is by node id within the same parent; matched sections must keep
    their titles (section titles render as headings and have no rewrite op).
    Anything unmatched is deleted and re-added from ``after`` with ids kept.
    All deletions precede all additions so freed ids can be reused, and a
    parent whose surviving children changed relative order is rebuilt
    wholesale. The returned list is a pure plan; apply it with
    :func:`apply_edits`.
    """
    validate_graph(before)
    validate_graph(after)
    if set(before.roots) != set(after.roots):
        raise GraphDiffError("graphs have different root sets; edits cannot add or remove roots")
    for root in before.roots:
        b, a = before.node(root), after.node(root)
        if b.is_leaf != a.is_leaf:
            raise GraphDiffError(f"root {root!r} changed between leaf and section; not expressible")
        if not b.is_leaf and b.title != a.title:
            raise GraphDiffError(f"root {root!r} changed its title; not expressible")

    def compatible(b_node: PromptNode, a_node: PromptNode) -> bool:
        if b_node.is_leaf != a_node.is_leaf:
            return False
        return b_node.is_leaf or b_node.title == a_node.title

    # Pass 1: plan deletions against the original trees, recording each
    # matched parent's surviving-children list for the addition pass.
    delete_edits: list[GraphEdit] = []
    surviving: dict[str, list[str]] = {}

    def plan_deletions(node_id: str) -> None:
        b_node = before.node(node_id)
        if b_node.is_leaf:
            return
        a_node = after.node(node_id)
        a_children = set(a_node.children)
        matched: list[str] = []
        for child in b_node.children:
            if child in a_children and compatible(before.node(child), after.node(child)):
                matched.append(child)
            else:
                delete_edits.append(DeleteNode(child))
        a_order = [c for c in a_node.children if c in matched]
        if a_order != matched:
            # Relative order of kept children changed: rebuild this parent.
            for child in matched:
                delete_edits.append(DeleteNode(child))
            surviving[node_id] = []
            return
        surviving[node_id] = matched
        for child in matched:
            plan_deletions(child)

    for root in before.roots:
        plan_deletions(root)

    # Pass 2: plan additions and leaf rewrites over the post-deletion shape.
    patch_edits: list[GraphEdit] = []

    def plan_additions(node_id: str) -> None:
        a_node = after.node(node_id)
        if a_node.is_leaf:
            if before.node(node_id).content != a_node.content:
                patch_edits.append(RewriteNode(node_id, a_node.content or ""))
            return
        kept = set(surviving.get(node_id, ()))
        for position, child in enumerate(a_node.children):
            if child not in kept:
                patch_edits.append(AddNode(node_id, position, subtree_spec(after, child)))
        for child in a_node.children:
            if child in kept:
                plan_additions(child)

    for root in after.roots:
        plan_additions(root)

    # Pass 3: dependency edges. Deletions drop incident edges; additions bring
    # back every after-side node id, so the edge plan works off the survivor set.
    deleted_ids: set[str] = set()
    for edit in delete_edits:
        deleted_ids.update(subtree_ids(before.nodes, edit.target))
    survived_pairs = {
        (e.src, e.dst): e
        for e in before.edges
        if e.src not in deleted_ids and e.dst not in deleted_ids
    }
    after_pairs = {(e.src, e.dst): e for e in after.edges}
    edge_edits: list[GraphEdit] = []
    for pair in sorted(survived_pairs.keys() - after_pairs.keys()):
        edge_edits.append(PruneEdge(pair[0], pair[1]))
    for pair, edge in sorted(after_pairs.items()):
        current = survived_pairs.get(pair)
        if current is None:
            edge_edits.append(AddEdge(edge.src, edge.dst, edge.label))
        elif current.label != edge.label:
            edge_edits.append(PruneEdge(pair[0], pair[1]))
            edge_edits.append(AddEdge(edge.src, edge.dst, edge.label))

    return delete_edits + patch_edits + edge_edits


# ---------------------------------------------------------------------------
# Convenience constructors.
# ---------------------------------------------------------------------------


def graph_from_specs(specs: Iterable[NodeSpec], edges: Iterable[Edge] = (), version: int = 1) -> TextualParameterGraph:
    """Build a validated graph from root NodeSpecs (missing ids are allocated)."""
    nodes: dict[str, PromptNode] = {}
    alloc = _IdAllocator(())
    roots = tuple(_instantiate_spec(spec, nodes, alloc) for spec in specs)
    graph = TextualParameterGraph(roots=roots, nodes=nodes, edges=frozenset(edges), version=version)
    validate_graph(graph)
    return graph


def single_leaf_graph(label: str, text: str, kind: str = "generic") -> TextualParameterGraph:
    """One root, one leaf: the parser fallback shape."""
    return graph_from_specs([NodeSpec(title=label, kind=kind, content=text, id="n1")])


def collapse_to_flat(graph: TextualParameterGraph) -> TextualParameterGraph:
    """Flatten every agent to a single generic leaf holding its materialized text."""
    specs = []
    for index, root in enumerate(graph.roots):
        node = graph.node(root)
        specs.append(
            NodeSpec(title=node.title, kind="generic", content=materialize(graph, root), id=f"n{index + 1}")
        )
    return graph_from_specs(specs, version=graph.version)
