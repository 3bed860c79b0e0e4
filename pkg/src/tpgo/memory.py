"""Persistent optimization-experience memory with similarity retrieval.

Every optimization attempt lands here as a problem/proposal/outcome record,
including rejected ones. Retrieval pulls the most similar past problems, the
group is ranked by measured effectiveness, and the best and worst become
few-shot exemplars for the next proposal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StorageError
from .gateway import EmbeddingProvider, EmbeddingVector, cosine_similarity
from .graph import OptimizationProposal, proposal_from_doc, proposal_to_doc


@dataclass(frozen=True)
class ExperienceEntry:
    entry_id: str
    problem_context: str
    context_vector: EmbeddingVector
    proposal: OptimizationProposal
    effectiveness: float
    accepted: bool
    iteration: int
    created_at: float

    def __post_init__(self):
        if not (0.0 <= self.effectiveness <= 1.0):
            raise ValueError("effectiveness must be in [0, 1]")


@dataclass(frozen=True)
class GraoParams:
    retrieve_k: int = 8
    n_pos: int = 2
    n_neg: int = 1
    pos_floor: float = 0.5
    neg_ceiling: float = 0.25


@dataclass(frozen=True)
class ExemplarBlock:
    positives: tuple[ExperienceEntry, ...]
    negatives: tuple[ExperienceEntry, ...]
    rendered: str

    @property
    def empty(self) -> bool:
        return not self.positives and not self.negatives


EMPTY_EXEMPLARS = ExemplarBlock(positives=(), negatives=(), rendered="")

EXEMPLAR_HEADER = "Past optimization attempts for similar failures:"


def entry_to_doc(entry: ExperienceEntry) -> dict:
    return {
        "entry_id": entry.entry_id,
        "problem_context": entry.problem_context,
        "context_vector": entry.context_vector.tolist(),
        "proposal": proposal_to_doc(entry.proposal),
        "effectiveness": entry.effectiveness,
        "accepted": entry.accepted,
        "iteration": entry.iteration,
        "created_at": entry.created_at,
    }


def entry_from_doc(doc: dict) -> ExperienceEntry:
    return ExperienceEntry(
        entry_id=doc["entry_id"],
        problem_context=doc["problem_context"],
        context_vector=EmbeddingVector.from_unit(np.asarray(doc["context_vector"])),
        proposal=proposal_from_doc(doc["proposal"]),
        effectiveness=float(doc["effectiveness"]),
        accepted=bool(doc["accepted"]),
        iteration=int(doc["iteration"]),
        created_at=float(doc["created_at"]),
    )


class ExperienceMemory:
    """Append-only line-delimited store; entries are never mutated or removed."""

    def __init__(self, path: Path | str, embedder: EmbeddingProvider):
        self.path = Path(path)
        self._embedder = embedder
        self._entries: list[ExperienceEntry] = []
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        try:
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._entries.append(entry_from_doc(json.loads(line)))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"cannot read memory store {self.path}: {exc}") from exc

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list[ExperienceEntry]:
        return list(self._entries)

    def next_entry_id(self) -> str:
        return f"e{len(self._entries) + 1:04d}"

    def record(self, entry: ExperienceEntry) -> str:
        """Append one entry durably and make it retrievable."""
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry_to_doc(entry), ensure_ascii=False) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot append to memory store {self.path}: {exc}") from exc
        self._entries.append(entry)
        return entry.entry_id

    def get(self, entry_id: str) -> ExperienceEntry | None:
        for entry in self._entries:
            if entry.entry_id == entry_id:
                return entry
        return None

    def retrieve(self, context: str, k: int) -> list[ExperienceEntry]:
        """Top-k entries by context similarity, newest first among exact ties."""
        if k <= 0 or not self._entries:
            return []
        query = self._embedder.embed_raw([context])[0]
        scored = []
        for position, entry in enumerate(self._entries):
            sim = cosine_similarity(query, entry.context_vector)
            scored.append((-sim, -entry.created_at, -position, entry))
        scored.sort(key=lambda t: t[:3])
        return [entry for *_, entry in scored[:k]]


def rank_group(entries: Sequence[ExperienceEntry]) -> list[ExperienceEntry]:
    """Stable sort by effectiveness, best first; ties keep retrieval order."""
    return sorted(entries, key=lambda e: -e.effectiveness)


def select_exemplars(
    ranked: Sequence[ExperienceEntry],
    n_pos: int,
    n_neg: int,
    *,
    pos_floor: float = 0.5,
    neg_ceiling: float = 0.25,
) -> ExemplarBlock:
    """Pick up to n_pos strong and n_neg weak exemplars; an entry appears once."""
    taken: set[str] = set()
    positives = []
    for entry in ranked:
        if len(positives) >= n_pos:
            break
        if entry.effectiveness >= pos_floor and entry.entry_id not in taken:
            positives.append(entry)
            taken.add(entry.entry_id)
    negatives = []
    for entry in reversed(ranked):
        if len(negatives) >= n_neg:
            break
        if entry.effectiveness <= neg_ceiling and entry.entry_id not in taken:
            negatives.append(entry)
            taken.add(entry.entry_id)
    negatives.sort(key=lambda e: e.effectiveness)
    return ExemplarBlock(
        positives=tuple(positives),
        negatives=tuple(negatives),
        rendered=render_exemplars(positives, negatives),
    )


def render_exemplars(
    positives: Sequence[ExperienceEntry], negatives: Sequence[ExperienceEntry]
) -> str:
    if not positives and not negatives:
        return ""
    blocks = [EXEMPLAR_HEADER]
    for entry in positives:
        blocks.append(_render_entry(entry, f"Effective fix (score {entry.effectiveness:.2f})"))
    for entry in negatives:
        blocks.append(_render_entry(entry, f"Ineffective attempt (score {entry.effectiveness:.2f})"))
    return "\n\n".join(blocks)


def _render_entry(entry: ExperienceEntry, label: str) -> str:
    edits = json.dumps(proposal_to_doc(entry.proposal)["modifications"], ensure_ascii=False)
    return f"## {label}\nProblem: {entry.problem_context}\nEdits: {edits}"
