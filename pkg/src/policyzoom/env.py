"""Benchmark MDPs with continuous state spaces.

Every environment keeps a full internal state vector ``x`` and exposes the
agent-visible part through :meth:`Environment.observe`.  One step consumes a
fixed number of uniform and standard-normal draws, so the dynamics are a pure
function of ``(x, a, draws)``; :class:`NoiseStream` supplies those draws from a
seeded generator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid environment, family, or experiment configuration."""


class NoiseStream:
    """Per-step primitive draws, generated in blocks.

    Uniforms and normals come from two independent child generators, so the
    sequence seen by the dynamics does not depend on the block size.
    """

    def __init__(self, seed_seq: np.random.SeedSequence, n_uniform: int, n_normal: int,
                 block: int = 4096):
        su, sn = seed_seq.spawn(2)
        self._ru = np.random.default_rng(su)
        self._rn = np.random.default_rng(sn)
        self.n_uniform = n_uniform
        self.n_normal = n_normal
        self.block = block
        self._pos = block
        self._u = self._z = None

    def _refill(self):
        self._u = self._ru.random((self.block, self.n_uniform)).tolist()
        self._z = self._rn.standard_normal((self.block, self.n_normal)).tolist()
        self._pos = 0

    def draw(self) -> tuple[list[float], list[float]]:
        if self._pos >= self.block:
            self._refill()
        i = self._pos
        self._pos += 1
        return self._u[i], self._z[i]


@dataclass(frozen=True)
class Environment:
    """Base class.  Subclasses implement the scalar and batched dynamics."""

    name: str = field(init=False, default="")
    d_S: int = field(init=False, default=1)
    d_A: int = field(init=False, default=1)
    n_uniform: int = field(init=False, default=1)
    n_normal: int = field(init=False, default=1)

    # -- metadata -------------------------------------------------------
    @property
    def state_bounds(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def action_bounds(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def lipschitz(self) -> tuple[float, float]:
        raise NotImplementedError

    @property
    def ergodicity(self) -> tuple[float, float]:
        raise NotImplementedError

    def params(self) -> dict[str, Any]:
        raise NotImplementedError

    # -- dynamics -------------------------------------------------------
    def reset(self, noise: NoiseStream) -> np.ndarray:
        return np.zeros(self.d_S)

    def observe(self, x: np.ndarray) -> np.ndarray:
        return x

    def reward(self, s, a):
        """Reward in [0, 1] for states ``s`` of shape (..., d_S) and actions of shape (...)."""
        raise NotImplementedError

    def raw_reward(self, s, a):
        return self.reward(s, a)

    def step(self, x: np.ndarray, a: float, u: list[float], z: list[float]):
        """Return ``(x_next, reward, raw_reward)``."""
        raise NotImplementedError

    def step_batch(self, X: np.ndarray, A: np.ndarray, U: np.ndarray, Z: np.ndarray):
        """Vectorized :meth:`step` over the leading axis."""
        raise NotImplementedError

    def reset_batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.zeros((n, self.d_S))


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


@dataclass(frozen=True)
class RiverSwim(Environment):
    """Continuous RiverSwim on S = [0, length], A = [-1, 1].

    The agent drifts left w.p. 2(1-a)/5, stays w.p. 0.2 and drifts right
    w.p. 2(1+a)/5; each drift has length (1 + w/2)/2 with w ~ N(0, noise_var).
    """

    noise_var: float = 0.5
    length: float = 6.0
    L_r: float = 1.0
    L_p: float = 1.0
    C: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "name", "riverswim")
        object.__setattr__(self, "n_uniform", 1)
        object.__setattr__(self, "n_normal", 1)
        if not self.noise_var > 0:
            raise ConfigError("riverswim: noise_var must be positive")
        if not self.length > 0:
            raise ConfigError("riverswim: length must be positive")
        _check_ergodicity(self.C, self.alpha)

    @property
    def state_bounds(self):
        return np.array([[0.0, self.length]])

    @property
    def action_bounds(self):
        return np.array([[-1.0, 1.0]])

    @property
    def lipschitz(self):
        return (self.L_r, self.L_p)

    @property
    def ergodicity(self):
        return (self.C, self.alpha)

    def params(self):
        return {"noise_var": self.noise_var, "length": self.length, "L_r": self.L_r,
                "L_p": self.L_p, "C": self.C, "alpha": self.alpha}

    def reward(self, s, a):
        s = np.asarray(s)[..., 0]
        n = self.length
        r = (0.005 * (((s - n) / n) ** 4 + ((a - 1) / 2) ** 4)
             + 0.5 * ((s / n) ** 4 + ((a + 1) / 2) ** 4))
        return np.clip(r, 0.0, 1.0)

    def move_probs(self, a):
        """(left, stay, right) probabilities."""
        return 2 * (1 - a) / 5, 0.2, 2 * (1 + a) / 5

    def step(self, x, a, u, z):
        s = float(x[0])
        a = _clip(a, -1.0, 1.0)
        n = self.length
        r = _clip(0.005 * (((s - n) / n) ** 4 + ((a - 1) / 2) ** 4)
                  + 0.5 * ((s / n) ** 4 + ((a + 1) / 2) ** 4), 0.0, 1.0)
        jump = 0.5 * (1 + z[0] * math.sqrt(self.noise_var) / 2)
        p_left = 2 * (1 - a) / 5
        if u[0] < p_left:
            s_next = _clip(s - jump, 0.0, self.length)
        elif u[0] < p_left + 0.2:
            s_next = s
        else:
            s_next = _clip(s + jump, 0.0, self.length)
        return np.array([s_next]), r, r

    def step_batch(self, X, A, U, Z):
        s = X[:, 0]
        a = np.clip(A, -1.0, 1.0)
        r = self.reward(X, a)
        jump = 0.5 * (1 + Z[:, 0] * math.sqrt(self.noise_var) / 2)
        p_left = 2 * (1 - a) / 5
        u = U[:, 0]
        left = np.clip(s - jump, 0.0, self.length)
        right = np.clip(s + jump, 0.0, self.length)
        s_next = np.where(u < p_left, left, np.where(u < p_left + 0.2, s, right))
        return s_next[:, None], r, r


def belief_update(b: float, a: int, observed_c: int | None, p01: float, p11: float) -> float:
    """One-step prediction of P(channel good).

    A transmission attempt (a=1) is acknowledged, revealing the current
    channel state; otherwise the belief is propagated through the chain.
    """
    if a == 1 and observed_c is not None:
        return p11 if observed_c == 1 else p01
    return b * p11 + (1 - b) * p01


@dataclass(frozen=True)
class TransmissionScheduling(Environment):
    """Remote estimation over a Gilbert-Elliott channel.

    Internal state is ``(e, b, c)``: estimation error, belief that the channel
    is good, and the hidden channel state.  The agent observes ``(e, b)``.
    The error is clamped to ``[-e_max, e_max]`` and the reward
    ``-e^2 - lam*a`` is mapped affinely onto [0, 1].
    """

    beta: float = 0.9
    lam: float = 5.0
    p01: float = 0.2
    p11: float = 0.8
    e_max: float = 10.0
    L_r: float | None = None
    L_p: float = 1.0
    C: float = 1.0
    alpha: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "name", "scheduling")
        object.__setattr__(self, "d_S", 2)
        object.__setattr__(self, "n_uniform", 1)
        object.__setattr__(self, "n_normal", 1)
        if not abs(self.beta) < 1:
            raise ConfigError(f"scheduling: |beta| must be < 1, got {self.beta}")
        if not self.lam > 0:
            raise ConfigError("scheduling: lam must be positive")
        for nm in ("p01", "p11"):
            p = getattr(self, nm)
            if not 0 < p <= 1:
                raise ConfigError(f"scheduling: {nm} must lie in (0, 1]")
        if not self.e_max > 0:
            raise ConfigError("scheduling: e_max must be positive")
        _check_ergodicity(self.C, self.alpha)

    @property
    def stationary_good(self) -> float:
        return self.p01 / (1 + self.p01 - self.p11)

    @property
    def state_bounds(self):
        return np.array([[-self.e_max, self.e_max], [0.0, 1.0]])

    @property
    def action_bounds(self):
        return np.array([[0.0, 1.0]])

    @property
    def lipschitz(self):
        scale = self.e_max ** 2 + self.lam
        L_r = self.L_r if self.L_r is not None else max(2 * self.e_max, self.lam) / scale
        return (L_r, self.L_p)

    @property
    def ergodicity(self):
        return (self.C, self.alpha)

    def params(self):
        return {"beta": self.beta, "lam": self.lam, "p01": self.p01, "p11": self.p11,
                "e_max": self.e_max, "L_r": self.lipschitz[0], "L_p": self.L_p,
                "C": self.C, "alpha": self.alpha}

    def observe(self, x):
        return x[:2]

    def raw_reward(self, s, a):
        e = np.clip(np.asarray(s)[..., 0], -self.e_max, self.e_max)
        return -e * e - self.lam * np.asarray(a)

    def reward(self, s, a):
        e = np.clip(np.asarray(s)[..., 0], -self.e_max, self.e_max)
        return 1 - (e * e + self.lam * np.asarray(a)) / (self.e_max ** 2 + self.lam)

    def reset(self, noise):
        u, _ = noise.draw()
        c = 1.0 if u[0] < self.stationary_good else 0.0
        return np.array([0.0, self.stationary_good, c])

    def reset_batch(self, n, rng):
        c = (rng.random(n) < self.stationary_good).astype(float)
        return np.column_stack([np.zeros(n), np.full(n, self.stationary_good), c])

    def step(self, x, a, u, z):
        e, b, c = float(x[0]), float(x[1]), int(x[2])
        act = 1 if a >= 0.5 else 0
        em = self.e_max
        scale = em * em + self.lam
        raw = -e * e - self.lam * act
        r = 1 - (e * e + self.lam * act) / scale
        e_next = _clip(self.beta * e * (1 - c * act) + z[0], -em, em)
        b_next = belief_update(b, act, c if act else None, self.p01, self.p11)
        p_good = self.p11 if c == 1 else self.p01
        c_next = 1.0 if u[0] < p_good else 0.0
        return np.array([e_next, b_next, c_next]), r, raw

    def step_batch(self, X, A, U, Z):
        e, b, c = X[:, 0], X[:, 1], X[:, 2]
        act = (A >= 0.5).astype(float)
        raw = -e * e - self.lam * act
        r = 1 - (e * e + self.lam * act) / (self.e_max ** 2 + self.lam)
        e_next = np.clip(self.beta * e * (1 - c * act) + Z[:, 0], -self.e_max, self.e_max)
        revealed = np.where(c == 1, self.p11, self.p01)
        b_next = np.where(act == 1, revealed, b * self.p11 + (1 - b) * self.p01)
        c_next = (U[:, 0] < revealed).astype(float)
        return np.column_stack([e_next, b_next, c_next]), r, raw


@dataclass(frozen=True)
class TwoArmChain(Environment):
    """Sticky two-region chain on S = [0, 1] with A = [0, 1].

    With probability ``stick`` the next state is uniform on the current half
    of [0, 1]; otherwise it is uniform on the upper half w.p. ``a`` and on the
    lower half w.p. ``1 - a``.  Under a constant action ``w`` the stationary
    law is ``w*U[1/2, 1] + (1-w)*U[0, 1/2]`` and the half-indicator mixes at
    rate ``stick``, so C = 1 and alpha = stick exactly.

    Reward ``0.5*s + 0.5*(1 - a^2)`` gives J(w) = 0.625 + 0.25 w - 0.5 w^2.
    """

    stick: float = 0.5
    L_r: float = 1.0
    L_p: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "name", "two_arm_chain")
        object.__setattr__(self, "n_uniform", 3)
        object.__setattr__(self, "n_normal", 0)
        if not 0 < self.stick < 1:
            raise ConfigError("two_arm_chain: stick must lie in (0, 1)")

    @property
    def state_bounds(self):
        return np.array([[0.0, 1.0]])

    @property
    def action_bounds(self):
        return np.array([[0.0, 1.0]])

    @property
    def lipschitz(self):
        return (self.L_r, self.L_p)

    @property
    def ergodicity(self):
        return (1.0, self.stick)

    def params(self):
        return {"stick": self.stick, "L_r": self.L_r, "L_p": self.L_p}

    def reward(self, s, a):
        s0 = np.asarray(s)[..., 0]
        a = np.asarray(a)
        return 0.5 * s0 + 0.5 * (1 - a * a)

    def gain(self, w: float) -> float:
        """Exact average reward of the constant policy ``a = w``."""
        return 0.625 + 0.25 * w - 0.5 * w * w

    def stationary_upper(self, w: float) -> float:
        """Stationary probability of the upper half under ``a = w``."""
        return w

    def step(self, x, a, u, z):
        s = float(x[0])
        a = _clip(a, 0.0, 1.0)
        r = 0.5 * s + 0.5 * (1 - a * a)
        if u[0] < self.stick:
            upper = s >= 0.5
        else:
            upper = u[1] < a
        s_next = 0.5 + 0.5 * u[2] if upper else 0.5 * u[2]
        return np.array([s_next]), r, r

    def step_batch(self, X, A, U, Z):
        s = X[:, 0]
        a = np.clip(A, 0.0, 1.0)
        r = 0.5 * s + 0.5 * (1 - a * a)
        upper = np.where(U[:, 0] < self.stick, s >= 0.5, U[:, 1] < a)
        s_next = np.where(upper, 0.5 + 0.5 * U[:, 2], 0.5 * U[:, 2])
        return s_next[:, None], r, r

    def reset(self, noise):
        u, _ = noise.draw()
        return np.array([u[0]])

    def reset_batch(self, n, rng):
        return rng.random((n, 1))


def _check_ergodicity(C: float, alpha: float):
    if not C > 0:
        raise ConfigError("ergodicity constant C must be positive")
    if not 0 < alpha < 1:
        raise ConfigError("ergodicity coefficient alpha must lie in (0, 1)")


_ENVS = {
    "riverswim": RiverSwim,
    "scheduling": TransmissionScheduling,
    "two_arm_chain": TwoArmChain,
}


def make_env(name: str, **params) -> Environment:
    """Build a configured environment by name."""
    try:
        cls = _ENVS[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; expected one of {sorted(_ENVS)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def env_step(env: Environment, x: np.ndarray, a: float, noise: NoiseStream):
    """Advance one step drawing from ``noise``; returns ``(x_next, reward, raw_reward)``."""
    u, z = noise.draw()
    return env.step(x, a, u, z)
