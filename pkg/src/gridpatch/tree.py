"""Hierarchical multi-scale indexation of the grid.

Two constructions are available: a deterministic quad tree that subdivides a
vertex into four near-equal quadrants, and a data-driven binary tree that
tries every admissible row or column split of a vertex and keeps the one
whose children score best. Both stop splitting once a child would fall below
the size constraints, and both drop children whose coordinate set is empty
(holes in the field plan can swallow whole quadrants).

Splitting is unconditional wherever it is admissible: deciding which of the
nested partitions actually represents the data is identification's job, not
the tree's.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterable

from .errors import InsufficientDataError, InvalidVertexError, NumericalError
from .grf import FitCache, GrfFamily, ScoreKind
from .grid import GridShape, PlotCoord, TrialGrid, coords_to_runs


class TreeKind(enum.Enum):
    QUAD = "quad"
    BINARY = "binary"


@dataclass(frozen=True)
class SplitConstraints:
    """Admissibility bounds for tree children."""

    min_rows_cols: int = 1
    min_plots: int = 6

    def __post_init__(self):
        # min_plots=1 recovers the plot-level tree (useful without fitted models)
        if self.min_plots < 1:
            raise ValueError("min_plots must be at least 1")
        if self.min_rows_cols < 1:
            raise ValueError("min_rows_cols must be at least 1")

    def admits(self, coords: frozenset[PlotCoord]) -> bool:
        if len(coords) < self.min_plots:
            return False
        rows = {i for i, _ in coords}
        cols = {j for _, j in coords}
        return len(rows) >= self.min_rows_cols and len(cols) >= self.min_rows_cols


@dataclass(frozen=True)
class TreeVertex:
    id: int
    coords: frozenset[PlotCoord]
    children: tuple[int, ...] = ()
    parent: int | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


class IndexTree:
    """Nested partition of the present plots, rooted at the whole grid."""

    def __init__(self, kind: TreeKind, vertices: dict[int, TreeVertex], root: int, shape: GridShape):
        self.kind = kind
        self.vertices = dict(vertices)
        self.root = root
        self.shape = shape

    def vertex(self, vid: int) -> TreeVertex:
        try:
            return self.vertices[vid]
        except KeyError:
            raise InvalidVertexError(f"unknown vertex {vid}") from None

    def leaves(self, vid: int | None = None) -> list[int]:
        """Leaf ids under ``vid`` (default: the whole tree), in index order."""
        start = self.root if vid is None else self.vertex(vid).id
        out: list[int] = []
        stack = [start]
        while stack:
            v = self.vertices[stack.pop()]
            if v.is_leaf:
                out.append(v.id)
            else:
                stack.extend(reversed(v.children))
        return out

    def descendants(self, vid: int) -> set[int]:
        out: set[int] = set()
        stack = list(self.vertex(vid).children)
        while stack:
            v = self.vertex(stack.pop())
            out.add(v.id)
            stack.extend(v.children)
        return out

    def siblings(self, vid: int) -> set[int]:
        v = self.vertex(vid)
        if v.parent is None:
            return set()
        return {c for c in self.vertices[v.parent].children if c != vid}

    def to_json(self) -> str:
        doc = {
            "kind": self.kind.value,
            "root": self.root,
            "rows": self.shape.n_rows,
            "cols": self.shape.n_cols,
            "vertices": [
                {
                    "id": v.id,
                    "parent": v.parent,
                    "children": list(v.children),
                    "coords": coords_to_runs(v.coords),
                }
                for v in sorted(self.vertices.values(), key=lambda v: v.id)
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def build_quad_tree(shape: GridShape, constraints: SplitConstraints = SplitConstraints()) -> IndexTree:
    """Deterministic quad tree: recursive near-equal quadrant subdivision."""
    vertices: dict[int, TreeVertex] = {}
    counter = 0

    def new_vertex(coords, parent):
        nonlocal counter
        vid = counter
        counter += 1
        vertices[vid] = TreeVertex(vid, coords, (), parent)
        return vid

    root = new_vertex(frozenset(shape.present), None)
    queue = [root]
    while queue:
        vid = queue.pop(0)
        coords = vertices[vid].coords
        if len(coords) == 1:
            continue
        rows = {i for i, _ in coords}
        cols = {j for _, j in coords}
        pr = math.ceil((max(rows) - min(rows)) / 2.0 + min(rows))
        pc = math.ceil((max(cols) - min(cols)) / 2.0 + min(cols))
        quadrants = [
            frozenset(c for c in coords if c[0] < pr and c[1] < pc),
            frozenset(c for c in coords if c[0] < pr and c[1] >= pc),
            frozenset(c for c in coords if c[0] >= pr and c[1] < pc),
            frozenset(c for c in coords if c[0] >= pr and c[1] >= pc),
        ]
        quadrants = [q for q in quadrants if q]
        if len(quadrants) < 2 or not all(constraints.admits(q) for q in quadrants):
            continue
        child_ids = tuple(new_vertex(q, vid) for q in quadrants)
        vertices[vid] = TreeVertex(vid, coords, child_ids, vertices[vid].parent)
        queue.extend(child_ids)
    return IndexTree(TreeKind.QUAD, vertices, root, shape)


def _binary_splits(coords: frozenset[PlotCoord]) -> list[tuple[str, int, frozenset, frozenset]]:
    """Every row/column split producing two nonempty children, rows first."""
    rows = sorted({i for i, _ in coords})
    cols = sorted({j for _, j in coords})
    out = []
    for r in rows[1:]:
        first = frozenset(c for c in coords if c[0] < r)
        out.append(("row", r, first, coords - first))
    for c in cols[1:]:
        first = frozenset(co for co in coords if co[1] < c)
        out.append(("col", c, first, coords - first))
    return out


def build_binary_tree(
    trial: TrialGrid,
    score: ScoreKind,
    candidates: Iterable[GrfFamily],
    constraints: SplitConstraints = SplitConstraints(),
    cache: FitCache | None = None,
) -> IndexTree:
    """Data-driven binary tree: at each vertex, of all admissible row and
    column splits keep the one minimising the summed children score.

    Ties prefer row splits, then the smaller pivot. A failed child fit makes
    that split inadmissible; a vertex with no admissible split is a leaf.
    """
    cache = cache or FitCache(trial)
    candidates = tuple(candidates)
    vertices: dict[int, TreeVertex] = {}
    counter = 0

    def new_vertex(coords, parent):
        nonlocal counter
        vid = counter
        counter += 1
        vertices[vid] = TreeVertex(vid, coords, (), parent)
        return vid

    def best_split(coords):
        best = None
        for axis, pivot, first, second in _binary_splits(coords):
            if not (constraints.admits(first) and constraints.admits(second)):
                continue
            try:
                total = (
                    cache.select_scored(first, candidates, score)[1]
                    + cache.select_scored(second, candidates, score)[1]
                )
            except (InsufficientDataError, NumericalError):
                continue
            if best is None or total < best[0]:
                best = (total, first, second)
        return best

    root = new_vertex(frozenset(trial.shape.present), None)
    queue = [root]
    while queue:
        vid = queue.pop(0)
        split = best_split(vertices[vid].coords)
        if split is None:
            continue
        _, first, second = split
        child_ids = (new_vertex(first, vid), new_vertex(second, vid))
        vertices[vid] = TreeVertex(vid, vertices[vid].coords, child_ids, vertices[vid].parent)
        queue.extend(child_ids)
    return IndexTree(TreeKind.BINARY, vertices, root, trial.shape)
