"""Group negative feedback into recurring failure patterns.

Duplicate filtering and clustering share one metric: distance is
1 - cosine similarity over unit vectors. Both scans are deterministic in
input order so test runs reproduce exactly; the inner loops live in
:mod:`tpgo.kernels`.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import StorageError
from .gateway import EmbeddingVector, vectors_matrix


@dataclass(frozen=True)
class EmbeddedGradient:
    text: str
    vector: EmbeddingVector
    sources: frozenset[str]

    def sorted_sources(self) -> list[str]:
        return sorted(self.sources)


@dataclass(frozen=True)
class ClusteringParams:
    eps: float = 0.3
    min_samples: int = 2
    dedupe_threshold: float = 0.95

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if not (0 < self.dedupe_threshold <= 1):
            raise ValueError("dedupe_threshold must be in (0, 1]")


@dataclass(frozen=True)
class ErrorCluster:
    """A recurring failure pattern; the representative is the medoid text."""

    members: tuple[EmbeddedGradient, ...]
    representative: str
    member_tasks: tuple[str, ...]
    cluster_id: str = ""


def medoid(members: tuple[EmbeddedGradient, ...] | list[EmbeddedGradient]) -> int:
    """Index of the member maximizing summed cosine similarity to all members."""
    if not members:
        raise ValueError("medoid of empty member list")
    sim = kernels.pairwise_cosine(vectors_matrix([m.vector for m in members]))
    return kernels.medoid_index(sim)


def make_cluster(members: list[EmbeddedGradient], cluster_id: str = "") -> ErrorCluster:
    representative = members[medoid(members)].text
    tasks = sorted(set().union(*(m.sources for m in members)))
    return ErrorCluster(
        members=tuple(members),
        representative=representative,
        member_tasks=tuple(tasks),
        cluster_id=cluster_id,
    )


def dedupe(items: list[EmbeddedGradient], threshold: float) -> list[EmbeddedGradient]:
    """Drop near-duplicates by greedy scan in input order.

    An item merges into the first kept item with cosine similarity at or above
    the threshold; its sources transfer to the survivor. Output preserves the
    surviving input order.
    """
    if not items:
        return []
    sim = kernels.pairwise_cosine(vectors_matrix([m.vector for m in items]))
    merge_into = kernels.greedy_dedupe(sim, threshold)
    merged_sources: dict[int, set[str]] = {}
    for i, item in enumerate(items):
        target = int(merge_into[i])
        key = i if target < 0 else target
        merged_sources.setdefault(key, set()).update(item.sources)
    out = []
    for i, item in enumerate(items):
        if int(merge_into[i]) < 0:
            out.append(replace(item, sources=frozenset(merged_sources[i])))
    return out


def dbscan(
    items: list[EmbeddedGradient], params: ClusteringParams
) -> tuple[list[ErrorCluster], list[EmbeddedGradient]]:
    """Density clustering over embeddings; returns (clusters, noise).

    A point is core iff its eps-neighborhood (itself included) has at least
    ``min_samples`` points; clusters are eps-connected components of core
    points plus border points, a border point joining the lowest-index core
    point that covers it. Every item lands in exactly one cluster or in noise.
    """
    if not items:
        return [], []
    sim = kernels.pairwise_cosine(vectors_matrix([m.vector for m in items]))
    labels, _ = kernels.dbscan_labels(sim, params.eps, params.min_samples)
    by_label: dict[int, list[EmbeddedGradient]] = {}
    for item, label in zip(items, labels):
        by_label.setdefault(int(label), []).append(item)
    noise = by_label.pop(-1, [])
    clusters = [make_cluster(by_label[label]) for label in sorted(by_label)]
    return clusters, noise


def singleton_clusters(items: list[EmbeddedGradient]) -> list[ErrorCluster]:
    """One cluster per item; the no-clustering ablation arm."""
    return [make_cluster([item]) for item in items]


def random_clusters(items: list[EmbeddedGradient], k: int, seed: int) -> list[ErrorCluster]:
    """Seeded uniform partition into k non-empty groups; the random-grouping ablation arm."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(items):
        raise ValueError(f"cannot split {len(items)} items into {k} groups")
    indices = list(range(len(items)))
    random.Random(seed).shuffle(indices)
    groups: list[list[int]] = [[] for _ in range(k)]
    for position, index in enumerate(indices):
        groups[position % k].append(index)
    # Members keep input order inside each group regardless of the shuffle.
    return [make_cluster([items[i] for i in sorted(group)]) for group in groups]


def representative(cluster: ErrorCluster) -> str:
    """Medoid member's text; ties break toward the earliest member."""
    if not cluster.members:
        raise ValueError("cluster has no members")
    return cluster.members[medoid(cluster.members)].text


# ---------------------------------------------------------------------------
# Append-only gradient store (one JSON record per embedded gradient).
# ---------------------------------------------------------------------------


class GradientStore:
    """Append-only record file for embedded gradients across iterations."""

    def __init__(self, path: Path | str):
        self.path = Path(path)

    def append(self, items: list[EmbeddedGradient], iteration: int) -> None:
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                for item in items:
                    record = {
                        "text": item.text,
                        "vector": item.vector.tolist(),
                        "sources": item.sorted_sources(),
                        "iteration": iteration,
                    }
                    fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot append to gradient store {self.path}: {exc}") from exc

    def load(self) -> list[tuple[EmbeddedGradient, int]]:
        if not self.path.exists():
            return []
        out = []
        try:
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    item = EmbeddedGradient(
                        text=record["text"],
                        vector=EmbeddingVector.from_unit(np.asarray(record["vector"])),
                        sources=frozenset(record["sources"]),
                    )
                    out.append((item, int(record["iteration"])))
        except OSError as exc:
            raise StorageError(f"cannot read gradient store {self.path}: {exc}") from exc
        return out
