"""Model-free policy zooming (PZRL-MF) and the shared doubling-episode loop."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policies import (MetricSpec, PolicyBall, PolicyFamily, find_uncovered,
                       oracle_resolution)


@dataclass
class PolicyRecord:
    """Bookkeeping for one active policy."""
    w: tuple[float, ...]
    id: int
    N: int = 0
    K: int = 0
    reward_sum: float = 0.0

    @property
    def mean(self) -> float:
        return self.reward_sum / max(1, self.N)


@dataclass(frozen=True)
class MfConstants:
    C: float
    alpha: float
    c_df: float
    T: int
    delta: float
    L_J: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.C > 0:
            raise ValueError("C must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")

    @property
    def log_term(self) -> float:
        """c_d^f * log(T / delta)."""
        return self.c_df * math.log(self.T / self.delta)


def mf_diameter(rec: PolicyRecord, const: MfConstants) -> float:
    n = max(1, rec.N)
    return const.C / (1 - const.alpha) * (math.sqrt(const.log_term / n) + (1 + rec.K) / n)


def mf_index(rec: PolicyRecord, diameter: float, L_J: float) -> float:
    return rec.mean + (1 + L_J) * diameter


def select_policy(indices: Sequence[float]) -> int:
    """Argmax with ties going to the earliest-activated policy."""
    if len(indices) == 0:
        raise ValueError("no active policies to select from")
    return int(np.argmax(np.asarray(indices, dtype=float)))


class EpisodicAgent:
    """Doubling episodes over a set of active policies.

    At each episode boundary the active set is updated, indices are
    recomputed, the argmax policy is selected and the episode length is set
    to the number of times that policy has already been played (at least 1).

    Drive it with ``a = agent.act(s)`` followed by ``agent.observe(r, s_next)``.
    """

    def __init__(self, family: PolicyFamily, const: MfConstants,
                 metric: MetricSpec = MetricSpec(), oracle_res: float | None = None,
                 oracle_floor: float = 1e-3):
        self.family = family
        self.const = const
        self.metric = metric
        self.oracle_res = oracle_res
        self.oracle_floor = oracle_floor
        self.records: list[PolicyRecord] = []
        self.current: int | None = None
        self.t = 0
        self.h = 0
        self.H = 0
        self.k = 0
        self.episode_starts: list[int] = []
        self.activations: list[tuple[int, int, tuple[float, ...], float]] = []
        self.boundary_log: list[tuple[int, int, float]] = []
        self.boundary_hooks = []

    # -- hooks for subclasses ---------------------------------------------
    def radius(self, rec: PolicyRecord) -> float:
        raise NotImplementedError

    def index(self, rec: PolicyRecord) -> float:
        raise NotImplementedError

    def update_active(self) -> int:
        return 0

    def new_record(self, w) -> PolicyRecord:
        return PolicyRecord(w=tuple(float(v) for v in w), id=len(self.records))

    # -- covering ------------------------------------------------------------
    def balls(self) -> list[PolicyBall]:
        return [PolicyBall(r.w, self.radius(r)) for r in self.records]

    def resolution(self, balls: Sequence[PolicyBall]) -> float:
        if self.oracle_res is not None:
            return self.oracle_res
        return oracle_resolution(balls, self.family, self.oracle_floor)

    def find_uncovered(self):
        balls = self.balls()
        return find_uncovered(balls, self.family, self.resolution(balls), self.metric)

    def maybe_activate(self) -> int:
        """Activate uncovered grid points until the balls cover W."""
        n = 0
        while True:
            w = self.find_uncovered()
            if w is None:
                return n
            rec = self.new_record(w)
            self.records.append(rec)
            self.activations.append((self.t, rec.id, rec.w, self.radius(rec)))
            n += 1

    # -- play loop -------------------------------------------------------------
    def start_episode(self):
        self.k += 1
        self.h = 0
        self.update_active()
        indices = [self.index(r) for r in self.records]
        j = select_policy(indices)
        rec = self.records[j]
        self.H = max(1, rec.N)
        rec.K += 1
        self.current = j
        self.episode_starts.append(self.t)
        self.boundary_log.append((self.t, rec.id, indices[j]))
        for hook in self.boundary_hooks:
            hook(self)

    def act(self, s) -> float:
        if self.h >= self.H:
            self.start_episode()
        self.h += 1
        rec = self.records[self.current]
        rec.N += 1
        self.t += 1
        self._last_state = s
        return self.family.evaluate(rec.w, s)

    def observe(self, reward: float, s_next=None):
        self.records[self.current].reward_sum += reward

    @property
    def current_record(self) -> PolicyRecord:
        return self.records[self.current]


class PzrlMF(EpisodicAgent):
    """Zooming over policies with model-free confidence diameters."""

    def radius(self, rec):
        return mf_diameter(rec, self.const)

    def index(self, rec):
        return mf_index(rec, mf_diameter(rec, self.const), self.const.L_J)

    def update_active(self):
        return self.maybe_activate()
