"""Finitely parameterized policy families and the geometry of policy space.

A policy is a parameter vector ``w`` in a box ``W`` together with a family
that maps ``(w, s)`` to an action.  Distances between policies are measured
either through the parameter surrogate ``||w - w'||_2 / L_W`` or through the
sup-norm of action differences over a state grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .env import ConfigError


@dataclass(frozen=True)
class PolicyFamily:
    name: str
    w_low: tuple[float, ...]
    w_high: tuple[float, ...]
    state_bounds: tuple[tuple[float, float], ...]
    action_low: float
    action_high: float
    L_phi: float
    L_W: float
    _raw: Callable = field(repr=False, compare=False, default=None)

    @property
    def d_W(self) -> int:
        return len(self.w_low)

    @property
    def box(self) -> np.ndarray:
        return np.array([self.w_low, self.w_high]).T

    def contains(self, w) -> bool:
        w = np.asarray(w, dtype=float)
        return bool(np.all(w >= np.array(self.w_low) - 1e-12) and np.all(w <= np.array(self.w_high) + 1e-12))

    def evaluate(self, w, s) -> float:
        a = self._raw(w, s)
        lo, hi = self.action_low, self.action_high
        return lo if a < lo else hi if a > hi else a

    def evaluate_batch(self, W: np.ndarray, S: np.ndarray) -> np.ndarray:
        """Actions for every (policy, state) pair: shape (len(W), len(S))."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        S = np.asarray(S, dtype=float).reshape(-1, len(self.state_bounds))
        A = self._raw(W[:, None, :].transpose(2, 0, 1), S.T[:, None, :])
        A = np.broadcast_to(A, (W.shape[0], S.shape[0]))
        return np.clip(A, self.action_low, self.action_high)

    def evaluate_paired(self, W: np.ndarray, S: np.ndarray) -> np.ndarray:
        """Action of policy ``W[i]`` at state ``S[i]`` for every row i."""
        W = np.asarray(W, dtype=float)
        S = np.asarray(S, dtype=float).reshape(len(W), -1)
        A = np.broadcast_to(self._raw(W.T, S.T), (len(W),))
        return np.clip(A, self.action_low, self.action_high)


@dataclass(frozen=True)
class ParamPolicy:
    family: PolicyFamily
    w: tuple[float, ...]

    def __post_init__(self):
        if not self.family.contains(self.w):
            raise ConfigError(f"parameter {self.w} outside the {self.family.name} box")

    def __call__(self, s) -> float:
        return self.family.evaluate(self.w, s)


@dataclass(frozen=True)
class PolicyBall:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")


@dataclass(frozen=True)
class MetricSpec:
    mode: str = "param_euclid"
    resolution: float = 0.05

    def __post_init__(self):
        if self.mode not in ("param_euclid", "sup_grid"):
            raise ConfigError(f"unknown metric mode {self.mode!r}")
        if not self.resolution > 0:
            raise ConfigError("metric grid resolution must be positive")


# -- family definitions ------------------------------------------------------
# Raw maps take w and s indexed by their first axis, so the same code serves
# scalars (w: tuple, s: array) and the broadcast grid in evaluate_batch.

def _const(w, s):
    return w[0]


def _affine(w, s):
    return w[0] + w[1] * s[0]


def _quad(w, s):
    return w[0] + w[1] * s[0] + w[2] * s[0] * s[0]


def _threshold(w, s):
    out = (w[0] + w[1] * s[0]) < s[1]
    return out.astype(float) if isinstance(out, np.ndarray) else float(out)


def _poly_sensitivity(degree: int, lo: float, hi: float) -> float:
    """L_W for a polynomial family: max ||w|| subject to sup_s |poly_w(s)| <= 1.

    Computed as 1 / min over unit w of the sup-norm on a dense state grid,
    with a coarse direction scan refined by Nelder-Mead.
    """
    from scipy.optimize import minimize

    if degree == 0:
        return 1.0
    s = np.linspace(lo, hi, 2001)
    V = np.vander(s, degree + 1, increasing=True)

    def supnorm(u):
        u = np.asarray(u, dtype=float)
        return np.max(np.abs(V @ (u / np.linalg.norm(u))))

    rng = np.random.default_rng(0)
    U = rng.standard_normal((20000, degree + 1))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    vals = np.max(np.abs(U @ V.T), axis=1)
    best = np.inf
    for i in np.argsort(vals)[:10]:
        res = minimize(supnorm, U[i], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        best = min(best, res.fun)
    return 1.0 / best


@lru_cache(maxsize=None)
def _poly_LW(degree: int, lo: float, hi: float) -> float:
    return _poly_sensitivity(degree, lo, hi)


FAMILY_NAMES = ("riverswim_const", "riverswim_affine", "riverswim_quad",
                "scheduling_threshold", "two_arm_const")


def make_family(name: str, state_bounds: Sequence[Sequence[float]],
                action_bounds: Sequence[float] | None = None,
                w_bounds: Sequence[Sequence[float]] | None = None) -> PolicyFamily:
    """Build a named family for an environment's state (and action) box.

    ``w_bounds`` overrides the default parameter box, given as one
    ``(low, high)`` pair per parameter.
    """
    sb = tuple((float(lo), float(hi)) for lo, hi in np.asarray(state_bounds, dtype=float).reshape(-1, 2))
    lo0, hi0 = sb[0]
    if name == "riverswim_const":
        box, raw, L_phi, deg = [(-1, 1)], _const, 0.0, 0
        act = (-1.0, 1.0)
    elif name == "riverswim_affine":
        box, raw, deg = [(-1, 1), (-0.5, 0.5)], _affine, 1
        act = (-1.0, 1.0)
    elif name == "riverswim_quad":
        box, raw, deg = [(-1, 1), (-0.5, 0.5), (-0.5, 0.5)], _quad, 2
        act = (-1.0, 1.0)
    elif name == "scheduling_threshold":
        if len(sb) != 2:
            raise ConfigError("scheduling_threshold needs a 2-D state box (e, b)")
        box, raw, deg = [(1, 3), (-1, -0.01)], _threshold, None
        act = (0.0, 1.0)
    elif name == "two_arm_const":
        box, raw, L_phi, deg = [(0, 1)], _const, 0.0, 0
        act = (0.0, 1.0)
    else:
        raise ConfigError(f"unknown policy family {name!r}; expected one of {FAMILY_NAMES}")
    if w_bounds is not None:
        if len(w_bounds) != len(box):
            raise ConfigError(f"{name}: w_bounds needs {len(box)} (low, high) pairs")
        box = [tuple(map(float, b)) for b in w_bounds]
    if any(not lo <= hi for lo, hi in box):
        raise ConfigError(f"{name}: empty parameter box {box}")
    if action_bounds is not None:
        act = (float(action_bounds[0]), float(action_bounds[1]))

    if deg is None:
        # indicator family: not Lipschitz in s; unit constants by convention
        L_phi, L_W = 1.0, 1.0
    else:
        L_W = _poly_LW(deg, lo0, hi0)
        if deg == 0:
            L_phi = 0.0
        else:
            # sup over W and S of |d/ds phi|
            smax = max(abs(lo0), abs(hi0))
            L_phi = max(abs(b) for b in box[1]) + (2 * max(abs(b) for b in box[2]) * smax if deg == 2 else 0.0)
    return PolicyFamily(name=name, w_low=tuple(float(b[0]) for b in box),
                        w_high=tuple(float(b[1]) for b in box), state_bounds=sb,
                        action_low=act[0], action_high=act[1], L_phi=float(L_phi), L_W=float(L_W),
                        _raw=raw)


def evaluate(policy: ParamPolicy, s) -> float:
    return policy(s)


def state_grid(bounds, resolution: float) -> np.ndarray:
    """Endpoint-inclusive grid over a box with spacing at most ``resolution``."""
    axes = [np.linspace(lo, hi, max(int(math.ceil((hi - lo) / resolution - 1e-9)), 0) + 1)
            for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def policy_distance(a: ParamPolicy, b: ParamPolicy, metric: MetricSpec = MetricSpec()) -> float:
    if a.family.name != b.family.name:
        raise ValueError("cannot compare policies from different families")
    if metric.mode == "param_euclid":
        return float(np.linalg.norm(np.subtract(a.w, b.w))) / a.family.L_W
    S = state_grid(a.family.state_bounds, metric.resolution)
    A = a.family.evaluate_batch(np.array([a.w, b.w]), S)
    return float(np.max(np.abs(A[0] - A[1])))


def param_grid(family: PolicyFamily, resolution: float) -> np.ndarray:
    """Lexicographically ordered, endpoint-inclusive grid over ``W``."""
    return state_grid(family.box, resolution)


def _grid_distances(family: PolicyFamily, points: np.ndarray, center, metric: MetricSpec,
                    S: np.ndarray | None, center_actions: np.ndarray | None) -> np.ndarray:
    if metric.mode == "param_euclid":
        return np.linalg.norm(points - np.asarray(center), axis=1) / family.L_W
    out = np.empty(len(points))
    for i in range(0, len(points), 512):
        A = family.evaluate_batch(points[i:i + 512], S)
        out[i:i + 512] = np.max(np.abs(A - center_actions), axis=1)
    return out


def find_uncovered(balls: Sequence[PolicyBall], family: PolicyFamily, resolution: float,
                   metric: MetricSpec = MetricSpec(), max_points: int = 20_000_000):
    """First grid point of ``W`` (lexicographic order) outside every ball, or None.

    Closed balls: a point at distance exactly ``radius`` is covered.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if any(lo > hi for lo, hi in family.box):
        raise ValueError("empty parameter box")
    n = 1
    for lo, hi in family.box:
        n *= int(math.ceil((hi - lo) / resolution - 1e-9)) + 1
    if n > max_points:
        raise ConfigError(f"covering grid of {n} points exceeds cap {max_points}")
    grid = param_grid(family, resolution)
    cand = np.arange(len(grid))
    if metric.mode == "param_euclid":
        # largest balls first, in blocks, shrinking the candidate set as we go
        order = sorted(balls, key=lambda b: -b.radius)
        for i in range(0, len(order), 64):
            block = order[i:i + 64]
            C = np.array([b.center for b in block], dtype=float)
            r = np.array([b.radius for b in block]) + 1e-12
            keep = np.empty(len(cand), dtype=bool)
            for j in range(0, len(cand), 65_536):
                g = grid[cand[j:j + 65_536]]
                d = np.sqrt(((g[:, None, :] - C[None]) ** 2).sum(axis=2)) / family.L_W
                keep[j:j + 65_536] = ~np.any(d <= r, axis=1)
            cand = cand[keep]
            if cand.size == 0:
                return None
        return tuple(float(v) for v in grid[cand[0]]) if cand.size else None
    S = state_grid(family.state_bounds, metric.resolution) if metric.mode == "sup_grid" else None
    for ball in sorted(balls, key=lambda b: -b.radius):
        ca = family.evaluate_batch(np.array([ball.center]), S) if S is not None else None
        d = _grid_distances(family, grid[cand], ball.center, metric, S, ca)
        cand = cand[d > ball.radius + 1e-12]
        if cand.size == 0:
            return None
    return tuple(float(v) for v in grid[cand[0]])


def oracle_resolution(balls: Sequence[PolicyBall], family: PolicyFamily,
                      floor: float = 1e-3) -> float:
    """Grid spacing for the covering check: a quarter of the smallest ball,
    expressed in parameter units, never below ``floor``."""
    if not balls:
        return max(float(np.max(family.box[:, 1] - family.box[:, 0])) / 4, floor)
    r = min(b.radius for b in balls) * family.L_W / 4
    return max(r, floor)


def lipschitz_L_J(L_r: float, L_p: float, C: float, alpha: float) -> float:
    """Lipschitz constant of the average reward w.r.t. the sup-norm policy metric."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not C > 0:
        raise ValueError("C must be positive")
    return L_r + L_p / (2 * (1 - alpha)) * (mixing_steps(C, alpha))


def mixing_steps(C: float, alpha: float) -> int:
    """ceil(log_{1/alpha} C) + 1, with the log term taken as 0 when C <= 1."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if C <= 1:
        return 1
    x = math.log(C) / math.log(1 / alpha)
    k = math.ceil(x - 1e-12)
    return k + 1
