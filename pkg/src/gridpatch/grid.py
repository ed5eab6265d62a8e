"""Grid data model: coordinates, masks, patches, partitions, adjacency.

Plots live on a regular row/column grid with 0-based integer coordinates.
A trial carries one real value per present plot; plots can be missing
(holes in the field plan). Patches are labelled coordinate sets and a
partition is a disjoint cover of all present plots.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DuplicatePlotError,
    EmptyTrialError,
    InvalidCoordError,
    ParseError,
    ShapeMismatchError,
)

PlotCoord = tuple[int, int]


class Adjacency(enum.Enum):
    ROOK = "rook"
    QUEEN = "queen"


class TrialFormat(enum.Enum):
    CSV = "csv"


_ROOK_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_QUEEN_STEPS = _ROOK_STEPS + ((-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass(frozen=True)
class GridShape:
    """Grid dimensions plus the set of plots that actually carry data."""

    n_rows: int
    n_cols: int
    present: frozenset[PlotCoord]

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.present:
            raise ValueError("present set must be nonempty")
        for (i, j) in self.present:
            if not (0 <= i < self.n_rows and 0 <= j < self.n_cols):
                raise ValueError(f"plot {(i, j)} outside {self.n_rows}x{self.n_cols} grid")

    @classmethod
    def full(cls, n_rows: int, n_cols: int) -> "GridShape":
        present = frozenset((i, j) for i in range(n_rows) for j in range(n_cols))
        return cls(n_rows, n_cols, present)

    def __contains__(self, coord: PlotCoord) -> bool:
        return coord in self.present


class TrialGrid:
    """Immutable grid of real values over a shape's present plots."""

    def __init__(self, shape: GridShape, values: Mapping[PlotCoord, float]):
        if set(values) != set(shape.present):
            raise ValueError("value domain must equal the present set")
        for c, v in values.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite value at {c}")
        self.shape = shape
        self._values = {c: float(v) for c, v in values.items()}
        self._order = tuple(sorted(self._values))
        self._index = {c: k for k, c in enumerate(self._order)}
        self._vector = np.array([self._values[c] for c in self._order], dtype=float)

    @property
    def values(self) -> dict[PlotCoord, float]:
        return dict(self._values)

    @property
    def coords(self) -> tuple[PlotCoord, ...]:
        """All present plots in row-major order."""
        return self._order

    def __getitem__(self, coord: PlotCoord) -> float:
        try:
            return self._values[coord]
        except KeyError:
            raise InvalidCoordError(f"plot {coord} not present") from None

    def value_vector(self, coords: Iterable[PlotCoord]) -> np.ndarray:
        """Values at the given plots, in the given order."""
        try:
            return self._vector[[self._index[c] for c in coords]]
        except KeyError as exc:
            raise InvalidCoordError(f"plot {exc.args[0]} not present") from None

    @classmethod
    def from_array(cls, arr) -> "TrialGrid":
        """Build from a 2-D array; NaN cells are treated as missing plots."""
        a = np.asarray(arr, dtype=float)
        if a.ndim != 2:
            raise ValueError("expected a 2-D array")
        values = {
            (i, j): a[i, j]
            for i in range(a.shape[0])
            for j in range(a.shape[1])
            if np.isfinite(a[i, j])
        }
        if not values:
            raise EmptyTrialError("array holds no finite values")
        shape = GridShape(a.shape[0], a.shape[1], frozenset(values))
        return cls(shape, values)

    def to_array(self) -> np.ndarray:
        """2-D value array with NaN at missing plots."""
        a = np.full((self.shape.n_rows, self.shape.n_cols), np.nan)
        for (i, j), v in self._values.items():
            a[i, j] = v
        return a

    def with_values(self, values: Mapping[PlotCoord, float]) -> "TrialGrid":
        """New grid with the same shape and replaced values."""
        return TrialGrid(self.shape, values)


@dataclass(frozen=True)
class Patch:
    """A labelled, nonempty set of plots."""

    id: int
    coords: frozenset[PlotCoord]

    def __post_init__(self):
        if not self.coords:
            raise ValueError("patch must be nonempty")

    def __len__(self):
        return len(self.coords)


class Partition:
    """Disjoint patches covering a shape's present set exactly."""

    def __init__(self, patches: Iterable[Patch], shape: GridShape):
        patches = sorted(patches, key=lambda p: p.id)
        ids = [p.id for p in patches]
        if len(set(ids)) != len(ids):
            raise ValueError("patch ids must be unique")
        seen: set[PlotCoord] = set()
        for p in patches:
            if seen & p.coords:
                raise ValueError("patches must be disjoint")
            seen |= p.coords
        if seen != set(shape.present):
            raise ValueError("patches must cover the present set exactly")
        self.patches = tuple(patches)
        self.shape = shape
        self._owner = {c: p.id for p in patches for c in p.coords}

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def patch_of(self, coord: PlotCoord) -> int:
        try:
            return self._owner[coord]
        except KeyError:
            raise InvalidCoordError(f"plot {coord} not present") from None

    def patch(self, patch_id: int) -> Patch:
        for p in self.patches:
            if p.id == patch_id:
                return p
        raise KeyError(patch_id)

    def labels(self, order: Iterable[PlotCoord] | None = None) -> list[int]:
        """Patch label per plot, default in row-major present order."""
        if order is None:
            order = sorted(self.shape.present)
        return [self._owner[c] for c in order]

    def coord_key(self) -> frozenset[frozenset[PlotCoord]]:
        """Identity of the partition as a set of coordinate sets (ids ignored)."""
        return frozenset(p.coords for p in self.patches)

    @classmethod
    def single(cls, shape: GridShape, patch_id: int = 0) -> "Partition":
        return cls([Patch(patch_id, frozenset(shape.present))], shape)

    @classmethod
    def from_labels(cls, owner: Mapping[PlotCoord, int], shape: GridShape) -> "Partition":
        groups: dict[int, set[PlotCoord]] = {}
        for c, pid in owner.items():
            groups.setdefault(pid, set()).add(c)
        return cls([Patch(pid, frozenset(cs)) for pid, cs in groups.items()], shape)


def neighbors(coord: PlotCoord, shape: GridShape, adjacency: Adjacency = Adjacency.ROOK) -> set[PlotCoord]:
    """Present plots one step away from ``coord`` (rook: 4, queen: 8)."""
    if coord not in shape.present:
        raise InvalidCoordError(f"plot {coord} not present")
    steps = _ROOK_STEPS if adjacency is Adjacency.ROOK else _QUEEN_STEPS
    i, j = coord
    return {(i + di, j + dj) for di, dj in steps if (i + di, j + dj) in shape.present}


def connected_components(
    patch: Patch, shape: GridShape, adjacency: Adjacency = Adjacency.ROOK
) -> list[Patch]:
    """Maximal connected sub-areas of a patch, ordered by smallest member.

    Component ids are 0..k-1 in output order; the union of the returned
    coordinate sets equals the input patch.
    """
    steps = _ROOK_STEPS if adjacency is Adjacency.ROOK else _QUEEN_STEPS
    remaining = set(patch.coords)
    components: list[frozenset[PlotCoord]] = []
    while remaining:
        start = min(remaining)
        stack = [start]
        remaining.discard(start)
        comp = {start}
        while stack:
            i, j = stack.pop()
            for di, dj in steps:
                nb = (i + di, j + dj)
                if nb in remaining:
                    remaining.discard(nb)
                    comp.add(nb)
                    stack.append(nb)
        components.append(frozenset(comp))
    components.sort(key=min)
    return [Patch(k, cs) for k, cs in enumerate(components)]


def border_pairs(
    partition: Partition, shape: GridShape, adjacency: Adjacency = Adjacency.ROOK
) -> list[tuple[PlotCoord, int, PlotCoord, int]]:
    """All ordered cross-patch neighbour pairs.

    Each entry is (plot, own patch, neighbour plot, neighbour patch) with the
    two plots adjacent and in different patches; sorted for determinism.
    """
    out = []
    for p in partition:
        for c in sorted(p.coords):
            for nb in sorted(neighbors(c, shape, adjacency)):
                if nb not in p.coords:
                    out.append((c, p.id, nb, partition.patch_of(nb)))
    out.sort()
    return out


def border_plots(
    partition: Partition, shape: GridShape, adjacency: Adjacency = Adjacency.ROOK
) -> list[tuple[PlotCoord, int, int]]:
    """One (plot, own patch, foreign patch) entry per cross-patch contact.

    A plot touching a foreign patch through two neighbour plots yields two
    entries, and a plot adjacent to two foreign patches yields one per patch.
    """
    return [(c, own, q) for c, own, _, q in border_pairs(partition, shape, adjacency)]


_DIM_RE = re.compile(r"rows\s*=\s*(\d+)\D+cols\s*=\s*(\d+)")


def parse_trial(data: bytes | str, fmt: TrialFormat = TrialFormat.CSV) -> TrialGrid:
    """Parse a trial CSV (``row,col,value``; empty value = missing plot).

    Dimensions are inferred from the largest indices unless a comment line
    ``# rows=R cols=C`` overrides them.
    """
    if fmt is not TrialFormat.CSV:
        raise ParseError(f"unsupported format {fmt}")
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    values: dict[PlotCoord, float] = {}
    seen: set[PlotCoord] = set()
    max_i = max_j = -1
    forced_dims: tuple[int, int] | None = None
    header_done = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _DIM_RE.search(line)
            if m:
                forced_dims = (int(m.group(1)), int(m.group(2)))
            continue
        if not header_done:
            cols = [c.strip().lower() for c in line.split(",")]
            if cols[:3] != ["row", "col", "value"]:
                raise ParseError("expected header 'row,col,value'", line=lineno)
            header_done = True
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"expected 3 fields, got {len(parts)}", line=lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"bad coordinates {parts[0]!r},{parts[1]!r}", line=lineno) from None
        if i < 0 or j < 0:
            raise ParseError("coordinates must be nonnegative", line=lineno)
        if (i, j) in seen:
            raise DuplicatePlotError(f"duplicate plot ({i},{j})", line=lineno)
        seen.add((i, j))
        max_i, max_j = max(max_i, i), max(max_j, j)
        cell = parts[2].strip()
        if cell == "":
            continue
        try:
            v = float(cell)
        except ValueError:
            raise ParseError(f"bad value {cell!r}", line=lineno) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite value {cell!r}", line=lineno)
        values[(i, j)] = v
    if not header_done:
        raise ParseError("missing header 'row,col,value'", line=1)
    if not values:
        raise EmptyTrialError("trial has no present plots")
    n_rows, n_cols = forced_dims if forced_dims else (max_i + 1, max_j + 1)
    shape = GridShape(n_rows, n_cols, frozenset(values))
    return TrialGrid(shape, values)


def format_trial(trial: TrialGrid) -> str:
    """Inverse of :func:`parse_trial`; emits a dimension comment and sorted rows."""
    lines = [f"# rows={trial.shape.n_rows} cols={trial.shape.n_cols}", "row,col,value"]
    for (i, j) in trial.coords:
        lines.append(f"{i},{j},{trial[(i, j)]!r}")
    return "\n".join(lines) + "\n"


def require_same_present(a: GridShape, b: GridShape) -> None:
    if a.present != b.present:
        raise ShapeMismatchError("present plot sets differ")


def coords_key(coords: Iterable[PlotCoord]) -> tuple[PlotCoord, ...]:
    """Canonical (sorted) coordinate tuple used as cache/dict key."""
    return tuple(sorted(coords))


def coords_to_runs(coords: Iterable[PlotCoord]) -> list[list[int]]:
    """Row-wise run-length encoding: [row, first col, last col] triples."""
    runs: list[list[int]] = []
    for (i, j) in sorted(coords):
        if runs and runs[-1][0] == i and runs[-1][2] == j - 1:
            runs[-1][2] = j
        else:
            runs.append([i, j, j])
    return runs


def runs_to_coords(runs: Iterable[Iterable[int]]) -> frozenset[PlotCoord]:
    return frozenset(
        (i, j) for i, j0, j1 in runs for j in range(j0, j1 + 1)
    )


def is_full_rectangle(coords: tuple[PlotCoord, ...]) -> tuple[int, int] | None:
    """If the sorted coords tile their bounding box completely, return (rows, cols)."""
    n = len(coords)
    i0, j0 = coords[0]
    i1, j1 = coords[-1]
    r, c = i1 - i0 + 1, j1 - j0 + 1
    if r * c != n:
        return None
    # sorted row-major: full rectangle iff every cell matches its expected slot
    for k in range(n):
        if coords[k] != (i0 + k // c, j0 + k % c):
            return None
    return r, c
