"""Discretized transition-kernel estimates and their L1 confidence balls.

Pipeline for one policy:

1. ``empirical_kernel``: for every leaf of the policy's partition, the
   successor states observed from that leaf or any of its ancestors are
   binned on the dyadic grid of the leaf's own level.
2. ``continuous_extension``: each bin's mass is spread uniformly over the bin.
3. ``rediscretize``: the extension is integrated over the cells of the finest
   active level, giving one row per leaf and one column per fine cell.

``build_ball`` composes the three and attaches per-row L1 radii.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .partition import Key, PartitionTree, cell_diam


# -- lattice helpers ------------------------------------------------------------

def level_volumes(tree: PartitionTree, level: int) -> np.ndarray:
    """Volumes of the level cells tiling the box (lexicographic, flattened)."""
    side = 2.0 ** (-level)
    lens = []
    for lo, hi, n in zip(tree.lo, tree.hi, tree.n_cells(level)):
        edges = lo + side * np.arange(n + 1)
        edges[-1] = min(edges[-1], hi)
        edges = np.minimum(edges, hi)
        lens.append(np.diff(edges))
    vol = lens[0]
    for ln in lens[1:]:
        vol = np.multiply.outer(vol, ln)
    return np.asarray(vol, dtype=float).ravel()


def level_index(tree: PartitionTree, S: np.ndarray, level: int) -> np.ndarray:
    """Flattened index of the level cell holding each row of ``S``."""
    A = tree.anchors_at(S, level)
    return np.ravel_multi_index(tuple(A.T), tree.n_cells(level))


def fine_to_coarse(tree: PartitionTree, fine_level: int, level: int) -> np.ndarray:
    """For each fine cell (flattened), the flattened index of its ancestor at ``level``."""
    n_f = tree.n_cells(fine_level)
    grids = np.meshgrid(*(np.arange(n) for n in n_f), indexing="ij")
    shift = fine_level - level
    anc = [g.ravel() >> shift for g in grids]
    return np.ravel_multi_index(tuple(anc), tree.n_cells(level))


# -- transition log ---------------------------------------------------------------

class TransitionLog:
    """Successor states grouped by the leaf that was active at visit time."""

    def __init__(self, d: int):
        self.d = d
        self._by_source: dict[Key, list] = {}
        self.n = 0

    def add(self, source: Key, s_next) -> None:
        self._by_source.setdefault(source, []).append(np.asarray(s_next, dtype=float).reshape(self.d))
        self.n += 1

    def sources(self) -> list[Key]:
        return list(self._by_source)

    def lineage(self, key: Key, l0: int) -> np.ndarray:
        """Successors recorded from ``key`` or from any of its ancestors, shape (n, d)."""
        level, anchor = key
        parts = []
        for lv in range(level, l0 - 1, -1):
            shift = level - lv
            anc = (lv, tuple(a >> shift for a in anchor))
            if anc in self._by_source:
                parts.append(np.array(self._by_source[anc]))
        if not parts:
            return np.empty((0, self.d))
        return np.concatenate(parts, axis=0)

    def lineage_count(self, key: Key, l0: int) -> int:
        level, anchor = key
        n = 0
        for lv in range(level, l0 - 1, -1):
            shift = level - lv
            n += len(self._by_source.get((lv, tuple(a >> shift for a in anchor)), ()))
        return n


# -- kernels ----------------------------------------------------------------------

@dataclass
class EmpiricalKernel:
    """Per-leaf rows binned at each leaf's own level.

    ``rows[i]`` is a probability vector over the level ``levels[i]`` cells
    tiling the box; ``visits[i]`` is the number of transitions behind it.
    """
    tree: PartitionTree
    keys: list[Key]
    levels: list[int]
    rows: list[np.ndarray]
    visits: np.ndarray


@dataclass
class DiscreteKernel:
    rows: np.ndarray   # (n_rows, d) source representatives
    cols: np.ndarray   # (n_cols, d) destination representatives
    probs: np.ndarray  # (n_rows, n_cols), row-stochastic

    def __post_init__(self):
        P = self.probs
        if P.ndim != 2 or np.any(P < -1e-15) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("kernel rows must be probability vectors")


def empirical_kernel(log: TransitionLog, tree: PartitionTree) -> EmpiricalKernel:
    """Lineage-binned empirical rows; unvisited rows are uniform over their bins."""
    keys = tree.leaves()
    levels, rows, visits = [], [], []
    for key in keys:
        level = key[0]
        n_bins = int(np.prod(tree.n_cells(level)))
        succ = log.lineage(key, tree.l0)
        if len(succ) == 0:
            row = np.full(n_bins, 1.0 / n_bins)
        else:
            row = np.bincount(level_index(tree, succ, level), minlength=n_bins) / len(succ)
        levels.append(level)
        rows.append(row)
        visits.append(len(succ))
    return EmpiricalKernel(tree, keys, levels, rows, np.array(visits, dtype=np.int64))


@dataclass
class ContinuousKernel:
    """Piecewise-constant density: row mass spread uniformly inside each bin."""
    emp: EmpiricalKernel
    _vols: dict = field(default_factory=dict, repr=False)

    def volumes(self, level: int) -> np.ndarray:
        if level not in self._vols:
            self._vols[level] = level_volumes(self.emp.tree, level)
        return self._vols[level]

    def mass(self, i: int, lower, upper) -> float:
        """p_hat(row i, B) for the axis-aligned box B = [lower, upper]."""
        tree = self.emp.tree
        level = self.emp.levels[i]
        side = 2.0 ** (-level)
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        overlap = None
        for j, n in enumerate(tree.n_cells(level)):
            a = tree.lo[j] + side * np.arange(n)
            b = np.minimum(a + side, tree.hi[j])
            ov = np.clip(np.minimum(b, upper[j]) - np.maximum(a, lower[j]), 0.0, None)
            overlap = ov if overlap is None else np.multiply.outer(overlap, ov)
        frac = np.asarray(overlap).ravel() / self.volumes(level)
        return float(frac @ self.emp.rows[i])


def continuous_extension(emp: EmpiricalKernel) -> ContinuousKernel:
    return ContinuousKernel(emp)


def rediscretize(p_hat: ContinuousKernel, fine_level: int | None = None) -> DiscreteKernel:
    """Integrate every row over the cells of ``fine_level`` (default: finest active level)."""
    emp = p_hat.emp
    tree = emp.tree
    L = tree.ell_max if fine_level is None else fine_level
    fine_vol = p_hat.volumes(L)
    n_f = fine_vol.size
    P = np.empty((len(emp.keys), n_f))
    maps = {}
    for i, (level, row) in enumerate(zip(emp.levels, emp.rows)):
        if level > L:
            raise ValueError("fine level must be at least every row's level")
        if level not in maps:
            parent = fine_to_coarse(tree, L, level)
            maps[level] = (parent, fine_vol / p_hat.volumes(level)[parent])
        parent, frac = maps[level]
        P[i] = row[parent] * frac
    reps = np.array([tree.cell(k).rep for k in emp.keys]).reshape(len(emp.keys), tree.d)
    return DiscreteKernel(reps, tree.level_reps(L), P)


# -- confidence radii and balls ------------------------------------------------------

@dataclass(frozen=True)
class KernelConstants:
    c_db: float
    T: int
    delta: float
    L_phi: float
    L_p: float
    C_p: float = 0.0

    @property
    def log_term(self) -> float:
        return self.c_db * math.log(self.T / self.delta)


def confidence_radius(diam: float, visits: int, d: int, const: KernelConstants) -> float:
    """Per-row L1 radius, capped at 2 (the L1 diameter of the simplex)."""
    eta = 3 * (const.log_term / max(1, visits)) ** (1.0 / (d + 2)) \
        + (3 * (1 + const.L_phi) * const.L_p + const.C_p) * diam
    return min(eta, 2.0)


@dataclass
class ConfidenceBall:
    """Rows indexed by leaves, columns by fine cells.

    ``row_of`` maps each fine cell to the leaf that contains it, which is how
    the optimistic iteration over fine states looks up its row.
    """
    center: DiscreteKernel
    radii: np.ndarray
    leaf_keys: list[Key]
    leaf_diams: np.ndarray
    fine_keys: list[Key]
    row_of: np.ndarray
    visits: np.ndarray

    @property
    def fine_reps(self) -> np.ndarray:
        return self.center.cols

    def contains(self, theta: np.ndarray, tol: float = 1e-12) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.center.probs.shape:
            return False
        if np.any(theta < -tol) or not np.allclose(theta.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            return False
        return bool(np.all(np.abs(theta - self.center.probs).sum(axis=1) <= self.radii + tol))

    def leaf_columns(self) -> np.ndarray:
        """Center rows with fine columns summed into their leaves: (n_leaves, n_leaves)."""
        n_l = len(self.leaf_keys)
        M = np.zeros((self.center.probs.shape[1], n_l))
        M[np.arange(len(self.row_of)), self.row_of] = 1.0
        return self.center.probs @ M


def fine_row_of(tree: PartitionTree, leaf_keys: list[Key]) -> np.ndarray:
    """Index into ``leaf_keys`` of the leaf containing each fine cell."""
    L = tree.ell_max
    out = np.full(int(np.prod(tree.n_cells(L))), -1, dtype=np.int64)
    by_level: dict[int, list[tuple[int, tuple]]] = {}
    for i, (lv, a) in enumerate(leaf_keys):
        by_level.setdefault(lv, []).append((i, a))
    for lv, items in by_level.items():
        table = np.full(int(np.prod(tree.n_cells(lv))), -1, dtype=np.int64)
        idx = np.ravel_multi_index(tuple(np.array([a for _, a in items]).T), tree.n_cells(lv))
        table[idx] = [i for i, _ in items]
        hit = table[fine_to_coarse(tree, L, lv)]
        out = np.where(hit >= 0, hit, out)
    if np.any(out < 0):
        raise RuntimeError("fine grid not covered by leaves")
    return out


def build_ball(log: TransitionLog, tree: PartitionTree, const: KernelConstants) -> ConfidenceBall:
    emp = empirical_kernel(log, tree)
    center = rediscretize(continuous_extension(emp))
    diams = np.array([cell_diam(k[0], tree.d) for k in emp.keys])
    radii = np.array([confidence_radius(dm, int(n), tree.d, const)
                      for dm, n in zip(diams, emp.visits)])
    return ConfidenceBall(center=center, radii=radii, leaf_keys=emp.keys, leaf_diams=diams,
                          fine_keys=tree.fine_keys(), row_of=fine_row_of(tree, emp.keys),
                          visits=emp.visits)
