"""Dyadic cells, admissible partitions and piecewise-constant weight maps.

A cell ``(level, ix, iy)`` is the square ``[ix, ix+1) x [iy, iy+1)`` scaled
by ``2**-level`` inside the unit square; ``ix`` indexes columns and ``iy``
rows.  On an ``H x W`` pixel grid it covers rows
``floor(iy H / 2**level) .. floor((iy+1) H / 2**level)`` (half-open) and the
analogous columns, so the cells of any partition tile the grid exactly
even when ``H`` and ``W`` are not powers of two.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np
from scipy import ndimage


class ConfigurationError(ValueError):
    """Inputs are inconsistent (e.g. a cell without a value)."""


class DomainError(ValueError):
    """A value lies outside its admissible range."""


@dataclass(frozen=True, order=True)
class DyadicCell:
    level: int
    ix: int
    iy: int

    def __post_init__(self):
        if self.level < 0:
            raise DomainError("level must be nonnegative")
        n = 1 << self.level
        if not (0 <= self.ix < n and 0 <= self.iy < n):
            raise DomainError(f"indices ({self.ix}, {self.iy}) out of range for level {self.level}")

    @property
    def side(self) -> float:
        return 2.0 ** -self.level

    @property
    def origin(self) -> tuple[float, float]:
        """Lower-left corner ``(x, y)`` in unit-square coordinates."""
        return self.ix * self.side, self.iy * self.side

    def parent(self) -> DyadicCell | None:
        if self.level == 0:
            return None
        return DyadicCell(self.level - 1, self.ix // 2, self.iy // 2)

    def ancestors(self) -> Iterator[DyadicCell]:
        cell = self.parent()
        while cell is not None:
            yield cell
            cell = cell.parent()

    def to_dict(self) -> dict:
        return {"level": self.level, "ix": self.ix, "iy": self.iy}


def subdivide(cell: DyadicCell) -> tuple[DyadicCell, DyadicCell, DyadicCell, DyadicCell]:
    """The four children of ``cell``, ordered by ``(iy, ix)``."""
    lv = cell.level + 1
    return tuple(
        DyadicCell(lv, 2 * cell.ix + a, 2 * cell.iy + b) for b in (0, 1) for a in (0, 1)
    )


def pixel_range(cell: DyadicCell, dims: tuple[int, int]) -> tuple[int, int, int, int]:
    """Half-open pixel rectangle ``(row0, row1, col0, col1)`` covered by ``cell``."""
    h, w = dims
    if h < 1 or w < 1:
        raise DomainError("dims must be at least 1x1")
    n = 1 << cell.level
    return (
        cell.iy * h // n,
        (cell.iy + 1) * h // n,
        cell.ix * w // n,
        (cell.ix + 1) * w // n,
    )


def pixel_slices(cell: DyadicCell, dims: tuple[int, int]) -> tuple[slice, slice]:
    r0, r1, c0, c1 = pixel_range(cell, dims)
    return slice(r0, r1), slice(c0, c1)


class DyadicPartition:
    """A finite set of dyadic cells covering the unit square without overlap."""

    def __init__(self, cells: Iterable[DyadicCell]):
        self._cells = frozenset(cells)
        self.validate()

    @classmethod
    def root(cls) -> DyadicPartition:
        return cls([DyadicCell(0, 0, 0)])

    @classmethod
    def uniform(cls, level: int) -> DyadicPartition:
        n = 1 << level
        return cls(DyadicCell(level, ix, iy) for iy in range(n) for ix in range(n))

    @property
    def cells(self) -> frozenset[DyadicCell]:
        return self._cells

    def __iter__(self) -> Iterator[DyadicCell]:
        return iter(sorted(self._cells))

    def __len__(self) -> int:
        return len(self._cells)

    def __contains__(self, cell) -> bool:
        return cell in self._cells

    def __eq__(self, other) -> bool:
        return isinstance(other, DyadicPartition) and self._cells == other._cells

    def __hash__(self) -> int:
        return hash(self._cells)

    def __repr__(self) -> str:
        return f"DyadicPartition({len(self)} cells, depth {self.depth})"

    @property
    def depth(self) -> int:
        return max(c.level for c in self._cells)

    def validate(self) -> None:
        """Check disjointness and exact coverage of the unit square.

        No cell may contain another (no ancestor present) and the areas
        ``4**-level`` must sum to one; together these imply a tiling.
        """
        if not self._cells:
            raise ConfigurationError("partition is empty")
        for cell in self._cells:
            if any(a in self._cells for a in cell.ancestors()):
                raise ConfigurationError(f"cell {cell} overlaps one of its ancestors")
        max_level = max(c.level for c in self._cells)
        area = sum(1 << (2 * (max_level - c.level)) for c in self._cells)
        if area != 1 << (2 * max_level):
            raise ConfigurationError("cells do not cover the unit square exactly")

    def refine(self, cell: DyadicCell) -> DyadicPartition:
        if cell not in self._cells:
            raise ConfigurationError(f"{cell} is not in the partition")
        return DyadicPartition((self._cells - {cell}) | set(subdivide(cell)))

    def cells_at_level(self, level: int) -> list[DyadicCell]:
        return sorted(c for c in self._cells if c.level == level)

    def label_map(self, dims: tuple[int, int]) -> np.ndarray:
        """Integer map giving, per pixel, the index of its cell in sorted order (-1 if none)."""
        labels = np.full(dims, -1, dtype=int)
        for k, cell in enumerate(self):
            rs, cs = pixel_slices(cell, dims)
            labels[rs, cs] = k
        return labels

    def tiles(self, dims: tuple[int, int]) -> bool:
        """True when every pixel is covered by exactly one cell."""
        count = np.zeros(dims, dtype=int)
        for cell in self._cells:
            rs, cs = pixel_slices(cell, dims)
            count[rs, cs] += 1
        return bool(np.all(count == 1))


def root_partition() -> DyadicPartition:
    return DyadicPartition.root()


@dataclass(frozen=True)
class BoxConstraint:
    """Admissible parameter interval ``[c0, 1/c0]`` (and ``[c1, 1/c1]`` for a second weight)."""

    c0: float = 0.01
    c1: float | None = None

    def __post_init__(self):
        for c in (self.c0, self.c1):
            if c is not None and not 0.0 < c < 1.0:
                raise DomainError("box constants must lie in (0, 1)")

    @property
    def interval(self) -> tuple[float, float]:
        return self.c0, 1.0 / self.c0

    @property
    def lower(self) -> float:
        return self.c0

    @property
    def upper(self) -> float:
        return 1.0 / self.c0

    def clamp(self, value):
        return np.clip(value, self.lower, self.upper)

    def contains(self, value) -> bool:
        v = np.asarray(value)
        return bool(np.all((v >= self.lower) & (v <= self.upper)))


def assemble_weight(
    partition: DyadicPartition,
    values: Mapping[DyadicCell, float],
    dims: tuple[int, int],
) -> np.ndarray:
    """Piecewise-constant map taking ``values[cell]`` on each cell's pixels."""
    out = np.empty(dims)
    for cell in partition:
        if cell not in values:
            raise ConfigurationError(f"no value for cell {cell}")
        val = float(values[cell])
        if not np.isfinite(val) or val <= 0:
            raise DomainError(f"weight for {cell} must be positive, got {val}")
        rs, cs = pixel_slices(cell, dims)
        out[rs, cs] = val
    return out


# above this many distinct values the distance-transform route loses its edge
_MAX_LEVELS_EDT = 256


def _envelope_bruteforce(w: np.ndarray, k: float, hy: float, hx: float) -> np.ndarray:
    h, wd = w.shape
    rows, cols = np.mgrid[0:h, 0:wd]
    ys = (rows * hy).ravel()
    xs = (cols * hx).ravel()
    vals = w.ravel()
    out = np.empty(h * wd)
    chunk = max(1, 2_000_000 // vals.size)
    for start in range(0, vals.size, chunk):
        sl = slice(start, start + chunk)
        dist = np.hypot(ys[sl, None] - ys[None, :], xs[sl, None] - xs[None, :])
        out[sl] = np.min(vals[None, :] + k * dist, axis=1)
    return out.reshape(w.shape)


def mollify_lipschitz(w: np.ndarray, k: float) -> np.ndarray:
    """Lipschitz lower envelope ``min_y w(y) + k |x - y|`` in unit-square coordinates.

    For maps with few distinct values (the piecewise-constant weights built
    here) the envelope is ``min_v v + k dist(x, {w = v})`` computed with exact
    Euclidean distance transforms; otherwise by direct minimization.
    """
    if k <= 0:
        raise DomainError("k must be positive")
    w = np.asarray(w, dtype=float)
    h, wd = w.shape
    hy, hx = 1.0 / h, 1.0 / wd
    levels = np.unique(w)
    if levels.size > _MAX_LEVELS_EDT:
        return _envelope_bruteforce(w, k, hy, hx)
    out = np.full(w.shape, np.inf)
    for v in levels:
        mask = w != v
        dist = ndimage.distance_transform_edt(mask, sampling=(hy, hx)) if mask.any() else 0.0
        np.minimum(out, v + k * dist, out=out)
    return out


def partition_to_json(
    partition: DyadicPartition,
    lambdas: Mapping[DyadicCell, float] | None = None,
    costs: Mapping[DyadicCell, float] | None = None,
) -> str:
    """Serialize as a JSON array of ``{level, ix, iy, lambda, cost}``."""
    items = []
    for cell in partition:
        d = cell.to_dict()
        d["lambda"] = None if lambdas is None else float(lambdas[cell])
        d["cost"] = None if costs is None else float(costs[cell])
        items.append(d)
    return json.dumps(items)


def partition_from_json(text: str) -> tuple[DyadicPartition, dict, dict]:
    items = json.loads(text)
    cells = [DyadicCell(int(d["level"]), int(d["ix"]), int(d["iy"])) for d in items]
    lambdas = {c: d.get("lambda") for c, d in zip(cells, items)}
    costs = {c: d.get("cost") for c, d in zip(cells, items)}
    return DyadicPartition(cells), lambdas, costs
