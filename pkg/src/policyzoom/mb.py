"""Model-based policy zooming (PZRL-MB).

Each active policy owns a dyadic partition of the state box and a log of its
transitions.  At episode boundaries the policy's confidence ball is rebuilt
and an optimistic value iteration over the ball yields its index; a second
iteration with cell diameters as rewards yields the approximate policy
diameter used both as the index bonus and as the covering radius.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernel import ConfidenceBall, KernelConstants, TransitionLog, build_ball
from .mf import EpisodicAgent, MfConstants, PolicyRecord
from .partition import PartitionConstants, PartitionTree, cell_diam
from .policies import MetricSpec, PolicyFamily, lipschitz_L_J, mixing_steps


# -- constants ----------------------------------------------------------------------

@dataclass(frozen=True)
class Constants:
    alpha: float
    C: float
    L_r: float
    L_p: float
    L_phi: float
    d_S: int
    C_p: float = 0.0
    c_db: float = 1.0
    c_df: float = 1.0
    kappa: float = 1.0
    kappa_prime: float = 1.0
    c_diam_override: float | None = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.C > 0:
            raise ValueError("C must be positive")
        if not self.kappa_prime > 0:
            raise ValueError("kappa' must be positive")

    @property
    def m_star(self) -> int:
        return mixing_steps(self.C, self.alpha)

    @property
    def C_eta(self) -> float:
        return 3 * (1 + (1 + self.L_phi) * self.L_p)

    @property
    def m_bar(self) -> int:
        a, m, d = self.alpha, self.m_star, self.d_S
        inner = (2 * self.C / self.kappa_prime) * (self.C_eta * (m + 1) * math.sqrt(d) / (1 - a)) ** d
        return max(0, math.ceil(math.log(inner) / math.log(1 / a) - 1e-12))

    @property
    def C_V(self) -> float:
        a, m, d = self.alpha, self.m_star, self.d_S
        mb = self.m_bar
        first = (mb * (mb + 5) / 2
                 + (6 / self.kappa_prime) * (self.C_eta * math.sqrt(d) * (m + 1) / (1 - a)) ** d
                 + 2 * (m + 1) / (1 - a))
        second = (1 + self.L_r * (1 - a) / ((m + 1) * self.C_eta)) / ((1 - a) * (1 - a ** (1 / m)))
        return max(first, second)

    @property
    def C_ub(self) -> float:
        return self.C_eta * self.C_V / 2 + 2 * (1 + self.L_phi) * self.L_r

    @property
    def c_diam(self) -> float:
        return self.C_ub if self.c_diam_override is None else self.c_diam_override

    @property
    def L_J(self) -> float:
        return lipschitz_L_J(self.L_r, self.L_p, self.C, self.alpha)

    def summary(self) -> dict[str, float]:
        return {"m_star": self.m_star, "C_eta": self.C_eta, "m_bar": self.m_bar, "C_V": self.C_V,
                "C_ub": self.C_ub, "c_diam": self.c_diam, "L_J": self.L_J}


def derive_constants(**inputs) -> Constants:
    return Constants(**inputs)


# -- optimistic inner maximization ---------------------------------------------------

def inner_max(values, center, eta):
    """Maximize ``theta @ values`` over the simplex within L1 distance ``eta`` of ``center``.

    Works on a single row or a stack of rows (``center`` of shape (n, k) with
    ``eta`` of shape (n,)).  Returns ``(theta, value)``.
    """
    v = np.asarray(values, dtype=float)
    P = np.asarray(center, dtype=float)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (P.shape[0],))
    if np.any(P < -1e-12) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("center rows must lie on the simplex")
    theta = _shift(v, P, eta)
    val = theta @ v
    return (theta[0], float(val[0])) if single else (theta, val)


def _shift(v: np.ndarray, P: np.ndarray, eta: np.ndarray) -> np.ndarray:
    best = int(np.argmax(v))
    # ascending order of value with the best coordinate placed last
    order = np.argsort(v, kind="stable")
    order = np.concatenate([order[order != best], [best]])
    add = np.minimum(eta / 2, 1 - P[:, best])
    Q = P[:, order[:-1]]
    before = np.cumsum(Q, axis=1) - Q
    removed = np.clip(add[:, None] - before, 0.0, Q)
    theta = P.copy()
    theta[:, order[:-1]] = Q - removed
    theta[:, best] = P[:, best] + add
    return theta


def _inner_values(v: np.ndarray, P: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Optimal values only (no theta materialized)."""
    best = int(np.argmax(v))
    order = np.argsort(v, kind="stable")
    order = order[order != best]
    add = np.minimum(eta / 2, 1 - P[:, best])
    Q = P[:, order]
    before = np.cumsum(Q, axis=1) - Q
    removed = np.clip(add[:, None] - before, 0.0, Q)
    return P @ v + add * v[best] - removed @ v[order]


# -- extended value iteration ----------------------------------------------------------

@dataclass(frozen=True)
class EviResult:
    gain: float
    iterations: int
    final_span_delta: float
    max_span: float = 0.0


class EviNonConvergence(RuntimeError):
    def __init__(self, result: EviResult):
        super().__init__(f"value iteration did not converge in {result.iterations} sweeps "
                         f"(span of increments {result.final_span_delta:.3g})")
        self.result = result


def evi(P: np.ndarray, eta: np.ndarray, row_of: np.ndarray, rewards: np.ndarray,
        tol: float = 1e-6, max_iter: int = 100_000) -> EviResult:
    """Optimistic value iteration over states indexed by ``rewards``.

    State ``s`` uses ball row ``row_of[s]``; the rows of ``P`` are distributions
    over the same state index.  Values are renormalized to min 0 every sweep.
    """
    r = np.asarray(rewards, dtype=float)
    P = np.asarray(P, dtype=float)
    eta = np.asarray(eta, dtype=float)
    row_of = np.asarray(row_of)
    V = np.zeros_like(r)
    span_max = 0.0
    delta = np.inf
    for i in range(1, max_iter + 1):
        V_new = r + _inner_values(V, P, eta)[row_of]
        diff = V_new - V
        lo, hi = float(diff.min()), float(diff.max())
        delta = hi - lo
        V = V_new - V_new.min()
        span_max = max(span_max, float(V.max()))
        if delta <= tol:
            return EviResult((hi + lo) / 2, i, delta, span_max)
    raise EviNonConvergence(EviResult((hi + lo) / 2, max_iter, delta, span_max))


def default_max_iter(n_states: int, alpha: float) -> int:
    return 10 * (n_states + math.ceil(1 / (1 - alpha))) * 100


def optimistic_rewards(ball: ConfidenceBall, reward_fn: Callable, family: PolicyFamily, w,
                       L_r: float) -> np.ndarray:
    """r(s, phi(s)) plus the (1 + L_phi) L_r diam bias, on the fine grid."""
    S = ball.fine_reps
    A = family.evaluate_batch(np.array([w]), S)[0]
    bias = (1 + family.L_phi) * L_r * ball.leaf_diams[ball.row_of]
    return np.asarray(reward_fn(S, A), dtype=float) + bias


def evi_gain(ball: ConfidenceBall, rewards, tol: float = 1e-6, max_iter: int | None = None,
             alpha: float = 0.5) -> EviResult:
    """Optimistic gain over the fine grid, rows looked up through each fine cell's leaf."""
    n = len(ball.row_of)
    if max_iter is None:
        max_iter = default_max_iter(n, alpha)
    return evi(ball.center.probs, ball.radii, ball.row_of, rewards, tol, max_iter)


def approx_diameter_limit(ball: ConfidenceBall, tol: float = 1e-6, max_iter: int | None = None,
                          alpha: float = 0.5) -> EviResult:
    """The raw iteration with leaf diameters as rewards, over leaf-indexed states."""
    n = len(ball.leaf_keys)
    if max_iter is None:
        max_iter = default_max_iter(n, alpha)
    return evi(ball.leaf_columns(), ball.radii, np.arange(n), ball.leaf_diams, tol, max_iter)


def approx_diameter(ball: ConfidenceBall | None, const: Constants, tol: float = 1e-6,
                    played: bool = True) -> float:
    """Iteration limit divided by c_diam; 1 for a never-played policy."""
    if ball is None or not played:
        return 1.0
    res = approx_diameter_limit(ball, tol, alpha=const.alpha)
    return res.gain / const.c_diam


def mb_index(gain: float, diam_b: float, L_J: float) -> float:
    return gain + L_J * diam_b


# -- agent ---------------------------------------------------------------------------------

@dataclass
class MbPolicyRecord(PolicyRecord):
    tree: PartitionTree | None = None
    log: TransitionLog | None = None
    ball: ConfidenceBall | None = None
    diam_b: float = 1.0
    gain: float = float("nan")
    index_value: float = float("nan")
    evi_iters: int = 0
    dirty: bool = True


class PzrlMB(EpisodicAgent):
    """Zooming over policies with model-based indices and approximate diameters."""

    def __init__(self, family: PolicyFamily, const: MfConstants, mb_const: Constants,
                 reward_fn: Callable, metric: MetricSpec = MetricSpec(), tol: float = 1e-6,
                 oracle_res: float | None = None, oracle_floor: float = 1e-3):
        super().__init__(family, const, metric, oracle_res, oracle_floor)
        self.mb = mb_const
        self.reward_fn = reward_fn
        self.tol = tol
        self.pconst = PartitionConstants(mb_const.c_db, const.T, const.delta)
        self.kconst = KernelConstants(mb_const.c_db, const.T, const.delta, family.L_phi,
                                      mb_const.L_p, mb_const.C_p)
        self.L_J = const.L_J
        self.span_trips = 0

    def new_record(self, w) -> MbPolicyRecord:
        rec = MbPolicyRecord(w=tuple(float(v) for v in w), id=len(self.records))
        rec.tree = PartitionTree(self.family.state_bounds, self.pconst)
        rec.log = TransitionLog(rec.tree.d)
        return rec

    def refresh(self, rec: MbPolicyRecord):
        if not rec.dirty:
            return
        rec.ball = build_ball(rec.log, rec.tree, self.kconst)
        r = optimistic_rewards(rec.ball, self.reward_fn, self.family, rec.w, self.mb.L_r)
        res = evi_gain(rec.ball, r, self.tol, alpha=self.mb.alpha)
        if res.max_span > 10 * self.mb.C_V:
            self.span_trips += 1
        rec.gain = res.gain
        rec.evi_iters = res.iterations
        rec.diam_b = approx_diameter(rec.ball, self.mb, self.tol, played=rec.N > 0)
        rec.index_value = mb_index(rec.gain, rec.diam_b, self.L_J)
        rec.dirty = False

    def radius(self, rec):
        return rec.diam_b

    def index(self, rec):
        self.refresh(rec)
        return rec.index_value

    def update_active(self):
        # the just-finished episode changed only the current policy's data
        if self.current is not None:
            self.refresh(self.records[self.current])
        return self.maybe_activate()

    def observe(self, reward: float, s_next=None):
        rec = self.records[self.current]
        rec.reward_sum += reward
        key, _ = rec.tree.record_visit(self._last_state)
        rec.log.add(key, s_next)
        rec.dirty = True
