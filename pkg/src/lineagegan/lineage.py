"""Corpus-level lineage graph: manifest ingestion, family eligibility, adjacency.

A manifest is a JSON array of node records (see `ingest_manifest`). Ancestry
edges run parent -> child. Training consumes fixed 7-slot family templates
(child, two parents, four grandparents); the adjacency over those slots is
symmetrized, self-looped and degree-normalized.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

FAMILY_SLOTS = (
    "child",
    "parent1",
    "parent2",
    "grandparent11",
    "grandparent12",
    "grandparent21",
    "grandparent22",
)
FAMILY_SIZE = len(FAMILY_SLOTS)


class ManifestError(ValueError):
    """Raised when a lineage manifest fails parsing or validation."""


@dataclass(frozen=True)
class LineageNode:
    """One corpus image plus its ancestry metadata."""

    id: str
    image_path: Path
    parent_ids: tuple[str, ...]
    creator: str | None = None
    created_at: str | None = None


@dataclass(frozen=True)
class LineageGraph:
    """Validated ancestry graph; nodes keyed by id, edges parent -> child.

    Treat as immutable after construction: all operations are pure reads.
    """

    nodes: dict[str, LineageNode]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(p, node.id) for node in self.nodes.values() for p in node.parent_ids]

    def parents_of(self, node_id: str) -> tuple[str, ...]:
        return self.nodes[node_id].parent_ids

    def ancestors_of(self, node_id: str) -> set[str]:
        seen: set[str] = set()
        queue = deque(self.nodes[node_id].parent_ids)
        while queue:
            current = queue.popleft()
            if current in seen:
                continue
            seen.add(current)
            queue.extend(self.nodes[current].parent_ids)
        return seen

    @classmethod
    def from_nodes(cls, nodes: Iterable[LineageNode]) -> "LineageGraph":
        """Build and validate a graph from node objects (same checks as ingest)."""
        by_id: dict[str, LineageNode] = {}
        for i, node in enumerate(nodes):
            if node.id in by_id:
                raise ManifestError(f"duplicate id '{node.id}' (node {i})")
            by_id[node.id] = node
        _validate(by_id)
        return cls(nodes=by_id)


def _validate(nodes: dict[str, LineageNode]) -> None:
    for node in nodes.values():
        if len(set(node.parent_ids)) != len(node.parent_ids):
            raise ManifestError(f"node '{node.id}': duplicate parent ids")
        if node.id in node.parent_ids:
            raise ManifestError(f"node '{node.id}': self-parent")
        for pid in node.parent_ids:
            if pid not in nodes:
                raise ManifestError(f"node '{node.id}': dangling parent id '{pid}'")
    _check_acyclic(nodes)


def _check_acyclic(nodes: dict[str, LineageNode]) -> None:
    # Kahn's algorithm over parent -> child edges; leftovers sit on a cycle.
    children: dict[str, list[str]] = {nid: [] for nid in nodes}
    pending = {nid: len(node.parent_ids) for nid, node in nodes.items()}
    for node in nodes.values():
        for pid in node.parent_ids:
            children[pid].append(node.id)
    queue = deque(nid for nid, deg in pending.items() if deg == 0)
    resolved = 0
    while queue:
        nid = queue.popleft()
        resolved += 1
        for child in children[nid]:
            pending[child] -= 1
            if pending[child] == 0:
                queue.append(child)
    if resolved != len(nodes):
        stuck = sorted(nid for nid, deg in pending.items() if deg > 0)
        raise ManifestError(f"cycle detected involving node '{stuck[0]}'")


def ingest_manifest(path: str | Path) -> LineageGraph:
    """Parse and validate a manifest file.

    The manifest is a UTF-8 JSON array of objects with keys ``id``, ``image``,
    ``parents`` and optional ``creator`` / ``created_at``. Image paths are
    resolved relative to the manifest's directory. Raises `ManifestError` on
    malformed JSON, missing fields, duplicate or dangling ids, self-parents
    and ancestry cycles.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise ManifestError("manifest must be a JSON array of node records")

    base = path.parent
    nodes: dict[str, LineageNode] = {}
    for i, record in enumerate(data):
        context = f"record {i}"
        if not isinstance(record, dict):
            raise ManifestError(f"{context}: expected an object")
        node_id = record.get("id")
        image = record.get("image")
        parents = record.get("parents")
        if not isinstance(node_id, str) or not node_id:
            raise ManifestError(f"{context}: missing or invalid 'id'")
        if not isinstance(image, str) or not image:
            raise ManifestError(f"{context} (id '{node_id}'): missing or invalid 'image'")
        if not isinstance(parents, list) or not all(isinstance(p, str) for p in parents):
            raise ManifestError(f"{context} (id '{node_id}'): 'parents' must be a list of ids")
        creator = record.get("creator")
        created_at = record.get("created_at")
        if creator is not None and not isinstance(creator, str):
            raise ManifestError(f"{context} (id '{node_id}'): 'creator' must be a string or null")
        if created_at is not None and not isinstance(created_at, str):
            raise ManifestError(f"{context} (id '{node_id}'): 'created_at' must be a string or null")
        if node_id in nodes:
            raise ManifestError(f"{context}: duplicate id '{node_id}'")
        if node_id in parents:
            raise ManifestError(f"{context} (id '{node_id}'): self-parent")
        nodes[node_id] = LineageNode(
            id=node_id,
            image_path=(base / image).resolve(),
            parent_ids=tuple(parents),
            creator=creator,
            created_at=created_at,
        )
    _validate(nodes)
    return LineageGraph(nodes=nodes)


def write_manifest(graph: LineageGraph, path: str | Path) -> Path:
    """Write a graph back to manifest JSON; inverse of `ingest_manifest`.

    Image paths are stored relative to the manifest directory when possible.
    """
    path = Path(path)
    base = path.parent.resolve()
    records = []
    for node in graph.nodes.values():
        image = node.image_path
        try:
            image_str = os.path.relpath(image, base)
        except ValueError:  # different drive on windows
            image_str = str(image)
        if image_str.startswith(".."):
            image_str = str(image)
        records.append(
            {
                "id": node.id,
                "image": image_str,
                "parents": list(node.parent_ids),
                "creator": node.creator,
                "created_at": node.created_at,
            }
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class FamilyTemplate:
    """Fixed 7-slot training unit: [child, parent1, parent2, gp11, gp12, gp21, gp22].

    Slots repeat a node id when a parent has a single grandparent to offer.
    Each slot carries its source node's parent ids and image path, so the
    template is self-contained for adjacency construction and sample assembly.
    """

    slot_source_ids: tuple[str, ...]
    slot_parent_ids: tuple[tuple[str, ...], ...]
    slot_image_paths: tuple[Path, ...]

    def __post_init__(self) -> None:
        n = len(self.slot_source_ids)
        if n < 1:
            raise ValueError("template needs at least one slot")
        if len(self.slot_parent_ids) != n or len(self.slot_image_paths) != n:
            raise ValueError("slot field lengths disagree")
        for sid, parents in zip(self.slot_source_ids, self.slot_parent_ids):
            if sid in parents:
                raise ValueError(f"slot '{sid}' lists itself as a parent")

    @property
    def node_count(self) -> int:
        return len(self.slot_source_ids)

    @property
    def child_id(self) -> str:
        return self.slot_source_ids[0]


def _grandparent_pair(parent_parents: tuple[str, ...]) -> tuple[str, str]:
    # Two slots per parent: first two grandparents, or the single one repeated.
    if len(parent_parents) >= 2:
        return parent_parents[0], parent_parents[1]
    return parent_parents[0], parent_parents[0]


def eligible_families(graph: LineageGraph) -> list[FamilyTemplate]:
    """One template per child with >= 2 parents, each contributing a grandparent.

    Parents are the first two entries of the child's parent list; grandparents
    are each parent's first (up to) two parents. Output is sorted by child id,
    so it is independent of manifest record order.
    """
    templates = []
    for child_id in sorted(graph.nodes):
        parent_ids = graph.parents_of(child_id)
        if len(parent_ids) < 2:
            continue
        p1, p2 = parent_ids[0], parent_ids[1]
        gp1 = graph.parents_of(p1)
        gp2 = graph.parents_of(p2)
        if not gp1 or not gp2:
            continue
        slot_ids = (child_id, p1, p2, *_grandparent_pair(gp1), *_grandparent_pair(gp2))
        templates.append(
            FamilyTemplate(
                slot_source_ids=slot_ids,
                slot_parent_ids=tuple(graph.parents_of(sid) for sid in slot_ids),
                slot_image_paths=tuple(graph.nodes[sid].image_path for sid in slot_ids),
            )
        )
    return templates


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Self-looped slot adjacency and its symmetric degree normalization.

    `a_tilde` is binary with ones on the diagonal, `degrees` holds its row
    sums (the diagonal of the degree matrix) and `a_hat` is
    diag(degrees)^-1/2 @ a_tilde @ diag(degrees)^-1/2. Arrays are read-only.
    """

    a_tilde: np.ndarray
    degrees: np.ndarray
    a_hat: np.ndarray

    @property
    def size(self) -> int:
        return self.a_tilde.shape[0]


def normalize_adjacency(a_tilde: np.ndarray) -> NormalizedAdjacency:
    """Symmetric degree normalization of a binary self-looped adjacency."""
    a = np.asarray(a_tilde)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if not np.all(np.diag(a) == 1):
        raise ValueError("adjacency must carry self-loops on the diagonal")
    a = a.astype(np.int64)
    degrees = a.sum(axis=1).astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    a_hat = a.astype(np.float64) * np.outer(inv_sqrt, inv_sqrt)
    for arr in (a, degrees, a_hat):
        arr.setflags(write=False)
    return NormalizedAdjacency(a_tilde=a, degrees=degrees, a_hat=a_hat)


def build_adjacency(template: FamilyTemplate) -> NormalizedAdjacency:
    """Slot adjacency of a family: direct parent/child pairs, symmetrized, self-looped."""
    n = template.node_count
    ids = template.slot_source_ids
    parents = template.slot_parent_ids
    a = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            if ids[i] in parents[j] or ids[j] in parents[i]:
                a[i, j] = a[j, i] = 1
    np.fill_diagonal(a, 1)
    return normalize_adjacency(a)
