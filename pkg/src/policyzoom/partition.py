"""Adaptive dyadic partition of a bounded state box.

Cells are dyadic cubes of side ``2**-level`` anchored at the lower corner of
the state box, intersected with the box.  A cell is identified by its key
``(level, anchor)`` where ``anchor`` is a tuple of integer lattice offsets.
Leaves carry visit counts; a leaf splits into its ``2**d`` children once its
count reaches ``N_max`` and the children inherit that count.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .env import ConfigError

Key = tuple  # (level, (i_1, ..., i_d))


@dataclass(frozen=True)
class PartitionConstants:
    c_db: float
    T: int
    delta: float

    @property
    def log_term(self) -> float:
        """c_d^b * log(T / delta)."""
        return self.c_db * math.log(self.T / self.delta)


@dataclass(frozen=True)
class Cell:
    level: int
    anchor: tuple[int, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    @property
    def key(self) -> Key:
        return (self.level, self.anchor)

    @property
    def rep(self) -> tuple[float, ...]:
        """Center of the cell (after intersection with the state box)."""
        return tuple((lo + hi) / 2 for lo, hi in zip(self.lower, self.upper))

    @property
    def diam(self) -> float:
        return cell_diam(self.level, len(self.anchor))

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def contains(self, s) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.all(s >= np.array(self.lower) - 1e-12) and np.all(s <= np.array(self.upper) + 1e-12))


def cell_diam(level: int, d: int) -> float:
    return math.sqrt(d) * 2.0 ** (-level)


def initial_level(d: int) -> int:
    """Smallest level whose cells have Euclidean diameter at most 1."""
    return max(0, math.ceil(math.log2(math.sqrt(d)) - 1e-12))


def thresholds(level: int, d: int, const: PartitionConstants, l0: int = 0) -> tuple[float, float]:
    """(N_min, N_max) for a cell of ``level`` in dimension ``d``.

    ``N_min`` is 0 for cells of the initial level ``l0``.
    """
    dm = cell_diam(level, d)
    base = const.log_term / dm ** (d + 2)
    n_max = 2 ** (d + 2) * base
    n_min = 0.0 if level <= l0 else base
    return n_min, n_max


class PartitionTree:
    """Leaves of the adaptive partition together with their visit counts."""

    def __init__(self, state_bounds, const: PartitionConstants):
        b = np.asarray(state_bounds, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(b)):
            raise ConfigError("adaptive partition needs a bounded state box")
        if np.any(b[:, 1] <= b[:, 0]):
            raise ConfigError("state box must have positive side lengths")
        self.bounds = b
        self.lo = b[:, 0]
        self.hi = b[:, 1]
        self.d = len(b)
        self._lo = tuple(self.lo.tolist())
        self._hi = tuple(self.hi.tolist())
        self._ncells: dict[int, tuple[int, ...]] = {}
        self._th: dict[int, tuple[float, float]] = {}
        self.const = const
        self.l0 = initial_level(self.d)
        self.counts: dict[Key, int] = {}
        self.internal: set[Key] = set()
        self.inherited = 0
        self.visits = 0
        self.splits: list[tuple[int, Key]] = []
        self.ell_max = self.l0
        for anchor in itertools.product(*(range(n) for n in self.n_cells(self.l0))):
            self.counts[(self.l0, anchor)] = 0

    # -- geometry -----------------------------------------------------------
    def n_cells(self, level: int) -> tuple[int, ...]:
        """Cells per axis at ``level`` needed to tile the box."""
        n = self._ncells.get(level)
        if n is None:
            side = 2.0 ** (-level)
            n = tuple(max(1, math.ceil((h - l) / side - 1e-9)) for l, h in zip(self.lo, self.hi))
            self._ncells[level] = n
        return n

    def cell(self, key: Key) -> Cell:
        level, anchor = key
        side = 2.0 ** (-level)
        lower = self.lo + side * np.array(anchor, dtype=float)
        upper = np.minimum(lower + side, self.hi)
        return Cell(level, tuple(anchor), tuple(lower.tolist()), tuple(upper.tolist()))

    def anchor_at(self, s, level: int) -> tuple[int, ...]:
        """Half-open lattice index with the upper box face closed."""
        side = 2.0 ** (-level)
        idx = np.floor((np.asarray(s, dtype=float) - self.lo) / side).astype(int)
        idx = np.minimum(idx, np.array(self.n_cells(level)) - 1)
        return tuple(int(i) for i in idx)

    def anchors_at(self, S: np.ndarray, level: int) -> np.ndarray:
        """Vectorized :meth:`anchor_at` for rows of ``S``: shape (n, d)."""
        side = 2.0 ** (-level)
        idx = np.floor((np.asarray(S, dtype=float).reshape(-1, self.d) - self.lo) / side).astype(np.int64)
        return np.clip(idx, 0, np.array(self.n_cells(level)) - 1)

    def children(self, key: Key) -> list[Key]:
        level, anchor = key
        n = self.n_cells(level + 1)
        out = []
        for bits in itertools.product((0, 1), repeat=self.d):
            child = tuple(2 * a + b for a, b in zip(anchor, bits))
            if all(c < m for c, m in zip(child, n)):
                out.append((level + 1, child))
        return out

    # -- queries ----------------------------------------------------------------
    def _check_inside(self, s) -> tuple[float, ...]:
        s = tuple(float(v) for v in np.asarray(s, dtype=float).reshape(-1))
        if len(s) != self.d or any(v < l - 1e-12 or v > h + 1e-12
                                   for v, l, h in zip(s, self._lo, self._hi)):
            raise ValueError(f"state {s} outside the partitioned box")
        return s

    def _anchor(self, s: tuple[float, ...], level: int) -> tuple[int, ...]:
        side = 2.0 ** (-level)
        return tuple(min(max(int(math.floor((v - l) / side)), 0), n - 1)
                     for v, l, n in zip(s, self._lo, self.n_cells(level)))

    def locate_key(self, s) -> Key:
        s = self._check_inside(s)
        level = self.l0
        key = (level, self._anchor(s, level))
        while key in self.internal:
            level += 1
            key = (level, self._anchor(s, level))
        return key

    def locate(self, s) -> Cell:
        return self.cell(self.locate_key(s))

    def leaves(self) -> list[Key]:
        return sorted(self.counts)

    def leaf_of_points(self, S: np.ndarray) -> list[Key]:
        return [self.locate_key(s) for s in np.asarray(S).reshape(-1, self.d)]

    def thresholds(self, key: Key) -> tuple[float, float]:
        th = self._th.get(key[0])
        if th is None:
            th = self._th[key[0]] = thresholds(key[0], self.d, self.const, self.l0)
        return th

    # -- updates ----------------------------------------------------------------
    def record_visit(self, s) -> tuple[Key, list[Key] | None]:
        """Count a visit; returns the visited leaf and the new leaves if it split.

        Children inherit the parent's count; if that already reaches their own
        ``N_max`` (tiny ``c_db``) they split in turn, so every leaf stays below
        its ``N_max``.
        """
        key = self.locate_key(s)
        self.visits += 1
        n = self.counts[key] + 1
        self.counts[key] = n
        if n < self.thresholds(key)[1]:
            return key, None
        new, todo = [], [key]
        while todo:
            parent = todo.pop()
            kids = self.children(parent)
            del self.counts[parent]
            self.internal.add(parent)
            self.inherited += (len(kids) - 1) * n
            self.ell_max = max(self.ell_max, parent[0] + 1)
            self.splits.append((self.visits, parent))
            for c in kids:
                self.counts[c] = n
                (todo if n >= self.thresholds(c)[1] else new).append(c)
        return key, sorted(new)

    # -- grids and diagnostics ------------------------------------------------
    def fine_keys(self) -> list[Key]:
        """All level-``ell_max`` cells tiling the box, lexicographic order."""
        L = self.ell_max
        return [(L, a) for a in itertools.product(*(range(n) for n in self.n_cells(L)))]

    def level_reps(self, level: int) -> np.ndarray:
        """Centers of the level cells tiling the box (clipped to it), lexicographic."""
        side = 2.0 ** (-level)
        axes = []
        for lo, hi, n in zip(self.lo, self.hi, self.n_cells(level)):
            a = lo + side * np.arange(n)
            axes.append((a + np.minimum(a + side, hi)) / 2)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def dump(self) -> list[tuple[int, tuple[int, ...], int]]:
        return [(k[0], k[1], self.counts[k]) for k in self.leaves()]

    def conserved(self) -> bool:
        return sum(self.counts.values()) - self.inherited == self.visits


def initial_partition(state_bounds, const: PartitionConstants) -> PartitionTree:
    return PartitionTree(state_bounds, const)


def locate(tree: PartitionTree, s) -> Cell:
    return tree.locate(s)


def record_visit(tree: PartitionTree, s):
    return tree.record_visit(s)


def min_level_grid(tree: PartitionTree) -> np.ndarray:
    """Representative points of the level-``ell_max`` cells, shape (n, d)."""
    return tree.level_reps(tree.ell_max)
