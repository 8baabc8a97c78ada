"""Policy UCB over a fixed uniform net of the parameter box."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import ConfigError
from .mf import EpisodicAgent, MfConstants, PolicyRecord, mf_diameter
from .policies import MetricSpec, PolicyFamily, state_grid


@dataclass(frozen=True)
class UniformNet:
    epsilon: float
    policies: np.ndarray

    def __len__(self):
        return len(self.policies)


def build_net(family: PolicyFamily, epsilon: float, cap: int = 1_000_000) -> UniformNet:
    """Endpoint-inclusive grid over W with spacing ``epsilon * L_W``.

    If the whole box fits within one spacing, the net is the box center.
    """
    size = net_size(family, epsilon)
    if size > cap:
        raise ConfigError(f"epsilon-net of {size} policies exceeds cap {cap}")
    box = family.box
    if size == 1 and _fits(family, epsilon):
        return UniformNet(epsilon, box.mean(axis=1)[None, :])
    return UniformNet(epsilon, state_grid(box, epsilon * family.L_W))


def _fits(family: PolicyFamily, epsilon: float) -> bool:
    box = family.box
    return float(np.linalg.norm(box[:, 1] - box[:, 0])) <= epsilon * family.L_W


def net_size(family: PolicyFamily, epsilon: float) -> int:
    """Cardinality of :func:`build_net` without building it."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if _fits(family, epsilon):
        return 1
    spacing = epsilon * family.L_W
    size = 1
    for lo, hi in family.box:
        size *= int(math.ceil((hi - lo) / spacing - 1e-9)) + 1
    return size


def net_for_budget(family: PolicyFamily, n: int) -> UniformNet:
    """Coarsest net with at least ``n`` policies (bisection on epsilon)."""
    diam = float(np.linalg.norm(family.box[:, 1] - family.box[:, 0])) / family.L_W
    if n <= 1:
        return build_net(family, diam)
    lo, hi = 1e-6, diam
    for _ in range(100):
        mid = math.sqrt(lo * hi)
        if net_size(family, mid) >= n:
            lo = mid
        else:
            hi = mid
    return build_net(family, lo)


class PolicyUCB(EpisodicAgent):
    """Fixed active set; index is the empirical mean plus the model-free diameter."""

    def __init__(self, family: PolicyFamily, const: MfConstants, epsilon: float,
                 metric: MetricSpec = MetricSpec()):
        super().__init__(family, const, metric)
        self.net = build_net(family, epsilon)
        for w in self.net.policies:
            rec = PolicyRecord(w=tuple(float(v) for v in w), id=len(self.records))
            self.records.append(rec)
            self.activations.append((0, rec.id, rec.w, self.radius(rec)))

    def radius(self, rec):
        return mf_diameter(rec, self.const)

    def index(self, rec):
        return rec.mean + mf_diameter(rec, self.const)
