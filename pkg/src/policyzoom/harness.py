"""Experiment orchestration: configs, seeded runs, the optimal-gain oracle,
regret curves, aggregation, export and the zooming-dimension diagnostic."""
from __future__ import annotations

import hashlib
import json
import math
import os
import sys
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .baseline import PolicyUCB
from .env import ConfigError, Environment, NoiseStream, make_env
from .mb import Constants, EviNonConvergence, PzrlMB
from .mf import EpisodicAgent, MfConstants, PzrlMF
from .policies import (PolicyBall, PolicyFamily, MetricSpec, find_uncovered, lipschitz_L_J,
                       make_family, mixing_steps, param_grid)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

AGENTS = ("pzrl_mf", "pzrl_mb", "policy_ucb")


# -- configuration ---------------------------------------------------------------------

@dataclass
class OracleBudget:
    resolution: float = 0.1
    rollout: int = 20_000
    replications: int = 4
    seed: int = 12345

    def __post_init__(self):
        if not self.resolution > 0:
            raise ConfigError("oracle resolution must be positive")
        if self.rollout < 1 or self.replications < 2:
            raise ConfigError("oracle needs rollout >= 1 and replications >= 2")


@dataclass
class ExperimentConfig:
    env: str = "riverswim"
    env_params: dict = field(default_factory=dict)
    agent: str = "pzrl_mf"
    family: str = "riverswim_affine"
    w_bounds: list | None = None
    metric: str = "param_euclid"
    metric_resolution: float = 0.05
    cover_resolution: float | None = None
    cover_floor: float = 1e-3
    epsilon: float | None = None
    T: int = 10_000
    delta: float = 0.1
    seeds: list = field(default_factory=lambda: [0])
    c_df: float = 1.0
    c_db: float = 1.0
    C: float | None = None
    alpha: float | None = None
    C_p: float = 0.0
    L_r: float | None = None
    L_p: float | None = None
    kappa_prime: float = 1.0
    c_diam: float | None = None
    evi_tol: float = 1e-6
    oracle: OracleBudget = field(default_factory=OracleBudget)
    gap_units: str = "clipped"
    out_dir: str = "out"
    check_cover_every: int = 0

    def __post_init__(self):
        if isinstance(self.oracle, dict):
            self.oracle = OracleBudget(**self.oracle)
        if self.agent not in AGENTS:
            raise ConfigError(f"unknown agent {self.agent!r}; expected one of {AGENTS}")
        if self.T < 1:
            raise ConfigError("horizon T must be >= 1")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.agent == "policy_ucb" and not (self.epsilon and self.epsilon > 0):
            raise ConfigError("policy_ucb needs a positive epsilon")
        if self.gap_units not in ("clipped", "raw"):
            raise ConfigError("gap_units must be 'clipped' or 'raw'")

    # sections of the TOML file and the fields they hold
    _SECTIONS = {
        "agent": {"name": "agent", "epsilon": "epsilon"},
        "family": {"name": "family", "w_bounds": "w_bounds", "metric": "metric",
                   "metric_resolution": "metric_resolution", "cover_resolution": "cover_resolution",
                   "cover_floor": "cover_floor"},
        "run": {"T": "T", "delta": "delta", "seeds": "seeds", "check_cover_every": "check_cover_every"},
        "constants": {k: k for k in ("c_df", "c_db", "C", "alpha", "C_p", "L_r", "L_p",
                                     "kappa_prime", "c_diam", "evi_tol")},
        "output": {"dir": "out_dir", "gap_units": "gap_units"},
    }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        kw: dict[str, Any] = {}
        env = dict(d.get("env", {}))
        if "name" in env:
            kw["env"] = env.pop("name")
        kw["env_params"] = dict(env.pop("params", {}), **env)
        for sec, keys in cls._SECTIONS.items():
            for k, v in d.get(sec, {}).items():
                if k not in keys:
                    raise ConfigError(f"unknown key {sec}.{k}")
                kw[keys[k]] = v
        if "oracle" in d:
            kw["oracle"] = OracleBudget(**d["oracle"])
        extra = set(d) - set(cls._SECTIONS) - {"env", "oracle"}
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        return cls(**kw)

    @classmethod
    def from_toml(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    # -- derived objects ---------------------------------------------------------
    def make_env(self) -> Environment:
        return make_env(self.env, **self.env_params)

    def make_family(self, env: Environment) -> PolicyFamily:
        return make_family(self.family, env.state_bounds, env.action_bounds[0], self.w_bounds)

    def constants(self, env: Environment) -> tuple[float, float, float, float]:
        L_r, L_p = env.lipschitz
        C, alpha = env.ergodicity
        return (self.L_r if self.L_r is not None else L_r,
                self.L_p if self.L_p is not None else L_p,
                self.C if self.C is not None else C,
                self.alpha if self.alpha is not None else alpha)

    def mf_constants(self, env: Environment) -> MfConstants:
        L_r, L_p, C, alpha = self.constants(env)
        return MfConstants(C=C, alpha=alpha, c_df=self.c_df, T=self.T, delta=self.delta,
                           L_J=lipschitz_L_J(L_r, L_p, C, alpha))

    def mb_constants(self, env: Environment, family: PolicyFamily) -> Constants:
        L_r, L_p, C, alpha = self.constants(env)
        return Constants(alpha=alpha, C=C, L_r=L_r, L_p=L_p, L_phi=family.L_phi, d_S=env.d_S,
                         C_p=self.C_p, c_db=self.c_db, c_df=self.c_df,
                         kappa_prime=self.kappa_prime, c_diam_override=self.c_diam)


def build_agent(cfg: ExperimentConfig, env: Environment, family: PolicyFamily) -> EpisodicAgent:
    metric = MetricSpec(cfg.metric, cfg.metric_resolution)
    const = cfg.mf_constants(env)
    if cfg.agent == "pzrl_mf":
        return PzrlMF(family, const, metric, cfg.cover_resolution, cfg.cover_floor)
    if cfg.agent == "policy_ucb":
        return PolicyUCB(family, const, cfg.epsilon, metric)
    return PzrlMB(family, const, cfg.mb_constants(env, family), env.reward, metric,
                  cfg.evi_tol, cfg.cover_resolution, cfg.cover_floor)


def stream(seed: int, name: str) -> np.random.SeedSequence:
    """Independent named child stream of a root seed."""
    return np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))


# -- runs --------------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    rewards: np.ndarray
    raw_rewards: np.ndarray
    policy_ids: np.ndarray
    episode_ids: np.ndarray
    episode_starts: np.ndarray
    activations: list
    final_active: list
    cover_checks: int = 0
    cover_violations: int = 0
    boundary_log: list = field(default_factory=list)
    leaf_dumps: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.rewards)


class RunError(RuntimeError):
    """A run aborted; ``report`` holds a structured description."""

    def __init__(self, report: dict):
        super().__init__(json.dumps(report))
        self.report = report


def _cover_hook(every: int, counter: dict):
    def hook(agent: EpisodicAgent):
        if agent.k % every:
            return
        counter["checks"] += 1
        if agent.find_uncovered() is not None:
            counter["violations"] += 1
    return hook


def run_experiment(cfg: ExperimentConfig, seed: int, agent: EpisodicAgent | None = None) -> RunResult:
    env = cfg.make_env()
    family = cfg.make_family(env)
    if agent is None:
        agent = build_agent(cfg, env, family)
    counter = {"checks": 0, "violations": 0}
    if cfg.check_cover_every > 0 and cfg.agent != "policy_ucb":
        agent.boundary_hooks.append(_cover_hook(cfg.check_cover_every, counter))
    noise = NoiseStream(stream(seed, "env"), env.n_uniform, env.n_normal)
    T = cfg.T
    rewards = np.empty(T)
    raw = np.empty(T)
    pids = np.empty(T, dtype=np.int64)
    eids = np.empty(T, dtype=np.int64)
    x = env.reset(noise)
    t = 0
    try:
        for t in range(T):
            a = agent.act(env.observe(x))
            u, z = noise.draw()
            x, r, rr = env.step(x, a, u, z)
            agent.observe(r, env.observe(x))
            rewards[t] = r
            raw[t] = rr
            pids[t] = agent.current_record.id
            eids[t] = agent.k
    except (EviNonConvergence, ValueError, RuntimeError) as exc:
        raise RunError({"seed": seed, "t": t, "agent": cfg.agent, "env": cfg.env,
                        "error": type(exc).__name__, "message": str(exc)}) from exc
    total_N = sum(r.N for r in agent.records)
    total_K = sum(r.K for r in agent.records)
    if total_N != T or total_K != agent.k:
        raise RunError({"seed": seed, "t": T, "agent": cfg.agent, "error": "AccountingError",
                        "message": f"sum N={total_N} (T={T}), sum K={total_K} (episodes={agent.k})"})
    final = [{"id": r.id, "w": list(r.w), "N": r.N, "K": r.K, "mean": r.mean,
              "radius": agent.radius(r)} for r in agent.records]
    leaves = {}
    if cfg.agent == "pzrl_mb":
        leaves = {r.id: [[lv, list(a), n] for lv, a, n in r.tree.dump()] for r in agent.records}
    return RunResult(seed=seed, rewards=rewards, raw_rewards=raw, policy_ids=pids, episode_ids=eids,
                     episode_starts=np.array(agent.episode_starts, dtype=np.int64),
                     activations=[(t_, i, list(w), rad) for t_, i, w, rad in agent.activations],
                     final_active=final, cover_checks=counter["checks"],
                     cover_violations=counter["violations"], boundary_log=list(agent.boundary_log),
                     leaf_dumps=leaves)


# -- optimal-gain oracle ---------------------------------------------------------------------

@dataclass
class GainEstimate:
    J_star: float
    half_width: float
    method: str
    w_star: tuple = ()
    grid: np.ndarray | None = field(default=None, repr=False)
    means: np.ndarray | None = field(default=None, repr=False)
    stderr: np.ndarray | None = field(default=None, repr=False)
    raw_means: np.ndarray | None = field(default=None, repr=False)

    def gaps(self, units: str = "clipped") -> np.ndarray:
        m = self.means if units == "clipped" else self.raw_means
        return float(np.max(m)) - m if units == "raw" else self.J_star - m

    def nearest(self, w) -> int:
        return int(np.argmin(np.linalg.norm(self.grid - np.asarray(w, dtype=float), axis=1)))

    def to_json(self) -> dict:
        return {"J_star": self.J_star, "half_width": self.half_width, "method": self.method,
                "w_star": list(self.w_star)}


def rollout_gains(env: Environment, family: PolicyFamily, W: np.ndarray, budget: OracleBudget,
                  burn_in: int, seed: int):
    """Average clipped and raw reward of each policy in ``W`` over independent rollouts.

    Returns ``(mean, stderr, raw_mean)`` per policy; replications are the
    independent units for the standard error.
    """
    W = np.asarray(W, dtype=float)
    n, R = len(W), budget.replications
    Wr = np.repeat(W, R, axis=0)
    rng = np.random.default_rng(stream(seed, "oracle"))
    X = env.reset_batch(n * R, rng)
    tot = np.zeros(n * R)
    tot_raw = np.zeros(n * R)
    for t in range(burn_in + budget.rollout):
        A = family.evaluate_paired(Wr, X[:, :env.d_S])
        U = rng.random((n * R, env.n_uniform))
        Z = rng.standard_normal((n * R, env.n_normal))
        X, r, rr = env.step_batch(X, A, U, Z)
        if t >= burn_in:
            tot += r
            tot_raw += rr
    per = (tot / budget.rollout).reshape(n, R)
    per_raw = (tot_raw / budget.rollout).reshape(n, R)
    return per.mean(axis=1), per.std(axis=1, ddof=1) / math.sqrt(R), per_raw.mean(axis=1)


def cache_dir() -> Path:
    return Path(os.environ.get("POLICY_ZOOM_CACHE", Path.home() / ".cache" / "policyzoom"))


def _oracle_key(cfg: ExperimentConfig, env: Environment, family: PolicyFamily,
                budget: OracleBudget) -> str:
    blob = json.dumps({"env": env.name, "params": env.params(), "family": family.name,
                       "box": family.box.tolist(), "budget": asdict(budget)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def estimate_optimal_gain(cfg: ExperimentConfig, budget: OracleBudget | None = None,
                          use_cache: bool = True) -> GainEstimate:
    """Best grid policy by Monte-Carlo rollouts, with a 95% normal CI."""
    budget = budget or cfg.oracle
    env = cfg.make_env()
    family = cfg.make_family(env)
    path = cache_dir() / f"oracle-{_oracle_key(cfg, env, family, budget)}.npz"
    method = (f"grid-rollout(res={budget.resolution:g}, len={budget.rollout}, "
              f"reps={budget.replications})")
    if use_cache and path.exists():
        z = np.load(path)
        means, se, raw_means, grid = z["means"], z["stderr"], z["raw_means"], z["grid"]
    else:
        grid = param_grid(family, budget.resolution)
        _, _, C, alpha = cfg.constants(env)
        burn = 10 * mixing_steps(C, alpha)
        means, se, raw_means = rollout_gains(env, family, grid, budget, burn, budget.seed)
        if use_cache:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp.npz")
            np.savez(tmp, means=means, stderr=se, raw_means=raw_means, grid=grid)
            os.replace(tmp, path)
    i = int(np.argmax(means))
    return GainEstimate(J_star=float(means[i]), half_width=float(1.96 * se[i]), method=method,
                        w_star=tuple(float(v) for v in grid[i]), grid=grid, means=means,
                        stderr=se, raw_means=raw_means)


def fixed_action_gain(env: Environment, action: float, budget: OracleBudget, burn_in: int = 100,
                      seed: int = 0) -> tuple[float, float]:
    """(clipped, raw) average reward of a constant-action policy."""
    R = budget.replications
    rng = np.random.default_rng(stream(seed, "fixed-action"))
    X = env.reset_batch(R, rng)
    tot = np.zeros(R)
    tot_raw = np.zeros(R)
    A = np.full(R, float(action))
    for t in range(burn_in + budget.rollout):
        X, r, rr = env.step_batch(X, A, rng.random((R, env.n_uniform)),
                                  rng.standard_normal((R, env.n_normal)))
        if t >= burn_in:
            tot += r
            tot_raw += rr
    return float(tot.mean() / budget.rollout), float(tot_raw.mean() / budget.rollout)


# -- regret ------------------------------------------------------------------------------------

def kahan_cumsum(x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    s = 0.0
    c = 0.0
    for i, v in enumerate(np.asarray(x, dtype=float).tolist()):
        y = v - c
        t = s + y
        c = (t - s) - y
        s = t
        out[i] = s
    return out


def regret_curve(run: RunResult | np.ndarray, J: GainEstimate | float) -> np.ndarray:
    """R(t) = t J* - sum of the first t clipped rewards, t = 1..T."""
    r = run.rewards if isinstance(run, RunResult) else np.asarray(run, dtype=float)
    j = J.J_star if isinstance(J, GainEstimate) else float(J)
    t = np.arange(1, len(r) + 1, dtype=float)
    return t * j - kahan_cumsum(r)


def relative_reward_curve(run: RunResult, baseline_gain: float, raw: bool = True) -> np.ndarray:
    """Cumulative reward minus t times a reference policy's average reward."""
    r = run.raw_rewards if raw else run.rewards
    return kahan_cumsum(r) - np.arange(1, len(r) + 1) * baseline_gain


@dataclass
class Aggregate:
    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    activation_table: dict | None = None

    def ci95(self, i: int = -1) -> tuple[float, float]:
        return (float(self.mean[i] - 1.96 * self.stderr[i]), float(self.mean[i] + 1.96 * self.stderr[i]))


GAP_EDGES = (0.0, 0.05, 0.1, 0.25, 0.5, math.inf)


def activation_table(runs: Sequence[RunResult], oracle: GainEstimate, units: str = "clipped",
                     high: float = 0.25) -> dict:
    """Bucket counts of the oracle gap of every activated policy, over all runs."""
    gaps_all = oracle.gaps(units)
    gaps = np.array([gaps_all[oracle.nearest(w)] for run in runs for _, _, w, _ in run.activations])
    counts = np.histogram(gaps, bins=np.array(GAP_EDGES))[0] if len(gaps) else np.zeros(len(GAP_EDGES) - 1)
    labels = [f"[{a:g},{b:g})" for a, b in zip(GAP_EDGES[:-1], GAP_EDGES[1:])]
    return {"units": units, "buckets": dict(zip(labels, [int(c) for c in counts])),
            "n_activated": int(len(gaps)),
            "high_gap_threshold": high,
            "high_gap_share": float(np.mean(gaps > high)) if len(gaps) else 0.0}


def aggregate(runs: Sequence[RunResult], J: GainEstimate | float,
              oracle: GainEstimate | None = None, units: str = "clipped") -> Aggregate:
    if len(runs) < 2:
        raise ValueError("aggregate needs at least two runs")
    T = runs[0].T
    if any(r.T != T for r in runs):
        raise ValueError("runs have different horizons")
    R = np.stack([regret_curve(r, J) for r in runs])
    mean = R.mean(axis=0)
    se = R.std(axis=0, ddof=1) / math.sqrt(len(runs))
    table = activation_table(runs, oracle, units) if oracle is not None and oracle.grid is not None else None
    return Aggregate(np.arange(1, T + 1), mean, se, table)


def loglog_slope(t: np.ndarray, y: np.ndarray, lo: float, hi: float) -> float:
    """Least-squares slope of log y on log t over lo <= t <= hi (positive y only)."""
    m = (t >= lo) & (t <= hi) & (y > 0)
    return float(np.polyfit(np.log(t[m]), np.log(y[m]), 1)[0])


# -- zooming-dimension diagnostic ------------------------------------------------------

def greedy_cover(points: np.ndarray, radius: float, L_W: float = 1.0) -> int:
    """Size of a greedy cover (centers taken in lexicographic order)."""
    remaining = np.asarray(points, dtype=float)
    n = 0
    while len(remaining):
        c = remaining[0]
        d = np.linalg.norm(remaining - c, axis=1) / L_W
        remaining = remaining[d > radius]
        n += 1
    return n


def zooming_diagnostic(cfg: ExperimentConfig, gammas: Sequence[float], resolution: float | None = None,
                       oracle: GainEstimate | None = None, c_z: float | None = None) -> dict:
    """Cover counts of the gap bands (gamma, 2 gamma] and [0, gamma] at radius gamma / c_z."""
    env = cfg.make_env()
    family = cfg.make_family(env)
    if oracle is None:
        budget = cfg.oracle if resolution is None else OracleBudget(
            resolution, cfg.oracle.rollout, cfg.oracle.replications, cfg.oracle.seed)
        oracle = estimate_optimal_gain(cfg, budget)
    if c_z is None:
        mb = cfg.mb_constants(env, family)
        c_z = 2 * (max(2.0, mb.C_ub) + mb.L_J)
    gaps = oracle.gaps(cfg.gap_units)
    rows = []
    for g in gammas:
        band = oracle.grid[(gaps > g) & (gaps <= 2 * g)]
        low = oracle.grid[gaps <= g]
        rows.append((float(g), greedy_cover(band, g / c_z, family.L_W),
                     greedy_cover(low, g / c_z, family.L_W)))
    slopes = []
    for col in (1, 2):
        pts = [(g, n) for g, *ns in rows for n in [ns[col - 1]] if n > 0]
        if len(pts) >= 2:
            x = -np.log([p[0] for p in pts])
            y = np.log([p[1] for p in pts])
            slopes.append(float(np.polyfit(x, y, 1)[0]))
    d_hat = max(slopes) if slopes else 0.0
    return {"c_z": c_z, "rows": rows, "d_z_hat": d_hat}


# -- export -----------------------------------------------------------------------------------

def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def run_csv(run: RunResult) -> str:
    lines = ["t,reward_clipped,reward_raw,policy_id,episode_id"]
    for t, (r, rr, p, e) in enumerate(zip(run.rewards.tolist(), run.raw_rewards.tolist(),
                                          run.policy_ids.tolist(), run.episode_ids.tolist()), 1):
        lines.append(f"{t},{r:.17g},{rr:.17g},{p},{e}")
    return "\n".join(lines) + "\n"


def aggregate_csv(agg: Aggregate) -> str:
    lines = ["t,mean_regret,stderr"]
    for t, m, s in zip(agg.t.tolist(), agg.mean.tolist(), agg.stderr.tolist()):
        lines.append(f"{t},{m:.17g},{s:.17g}")
    return "\n".join(lines) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def summary_json(payload: dict) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"


def export(out_dir: str | os.PathLike, runs: Sequence[RunResult] = (), agg: Aggregate | None = None,
           summary: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    written = []
    for run in runs:
        p = out / f"run_seed{run.seed}.csv"
        _write(p, run_csv(run))
        written.append(p)
    if agg is not None:
        p = out / "aggregate.csv"
        _write(p, aggregate_csv(agg))
        written.append(p)
    if summary is not None:
        p = out / "summary.json"
        _write(p, summary_json(summary))
        written.append(p)
    return written


def run_summary(cfg: ExperimentConfig, runs: Sequence[RunResult], J: GainEstimate | None = None,
                agg: Aggregate | None = None, extra: dict | None = None) -> dict:
    out = {"config": cfg.to_dict(),
           "runs": [{"seed": r.seed, "T": r.T, "episodes": int(len(r.episode_starts)),
                     "activations": len(r.activations),
                     "cumulative_reward": float(math.fsum(r.rewards)),
                     "cumulative_raw_reward": float(math.fsum(r.raw_rewards)),
                     "cover_checks": r.cover_checks, "cover_violations": r.cover_violations,
                     "final_active": r.final_active,
                     "leaves": r.leaf_dumps}
                    for r in runs]}
    if J is not None:
        out["J_star"] = J.to_json()
        for entry, r in zip(out["runs"], runs):
            entry["final_regret"] = float(regret_curve(r, J)[-1])
    if agg is not None:
        out["final_mean_regret"] = float(agg.mean[-1])
        out["final_stderr"] = float(agg.stderr[-1])
        if agg.activation_table is not None:
            out["activation_table"] = agg.activation_table
    if extra:
        out.update(extra)
    return out


def covering_ok(agent: EpisodicAgent) -> bool:
    """True when the agent's balls cover W at its oracle resolution."""
    balls = [PolicyBall(r.w, agent.radius(r)) for r in agent.records]
    return find_uncovered(balls, agent.family, agent.resolution(balls), agent.metric) is None
