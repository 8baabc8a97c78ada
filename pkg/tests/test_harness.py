import json
import math

import numpy as np
import pytest

from policyzoom import harness as H
from policyzoom.env import ConfigError, NoiseStream, make_env

TWO_ARM_J = 0.65625  # max of 0.625 + 0.25 w - 0.5 w^2, at w = 0.25


def two_arm(**kw):
    base = dict(env="two_arm_chain", family="two_arm_const", T=2000, seeds=[0, 1], c_df=0.05,
                oracle=H.OracleBudget(0.05, 4000, 8, 7))
    base.update(kw)
    return H.ExperimentConfig(**base)


# -- config -------------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        H.ExperimentConfig(T=0)
    with pytest.raises(ConfigError):
        H.ExperimentConfig(delta=1.0)
    with pytest.raises(ConfigError):
        H.ExperimentConfig(seeds=[])
    with pytest.raises(ConfigError):
        H.ExperimentConfig(agent="q_learning")
    with pytest.raises(ConfigError):
        H.ExperimentConfig(agent="policy_ucb")
    with pytest.raises(ConfigError):
        H.ExperimentConfig(gap_units="percent")
    with pytest.raises(ConfigError):
        H.OracleBudget(replications=1)


def test_config_from_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("""
[env]
name = "scheduling"
params = { lam = 3.0 }

[agent]
name = "policy_ucb"
epsilon = 0.2

[family]
name = "scheduling_threshold"

[run]
T = 50
seeds = [3, 4]

[constants]
c_df = 0.5

[oracle]
resolution = 0.5
rollout = 100
replications = 2

[output]
dir = "results"
gap_units = "raw"
""")
    cfg = H.ExperimentConfig.from_toml(p)
    assert cfg.env == "scheduling" and cfg.env_params == {"lam": 3.0}
    assert cfg.agent == "policy_ucb" and cfg.epsilon == 0.2
    assert cfg.T == 50 and cfg.seeds == [3, 4] and cfg.c_df == 0.5
    assert cfg.oracle == H.OracleBudget(0.5, 100, 2)
    assert cfg.out_dir == "results" and cfg.gap_units == "raw"
    assert cfg.make_env().lam == 3.0
    p.write_text("[run]\nhorizon = 5\n")
    with pytest.raises(ConfigError):
        H.ExperimentConfig.from_toml(p)
    p.write_text("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        H.ExperimentConfig.from_toml(p)


# -- runs ---------------------------------------------------------------------------------

def test_single_step_run():
    run = H.run_experiment(two_arm(T=1), 0)
    assert run.T == 1 and len(run.episode_starts) == 1 and len(run.activations) == 1
    assert run.rewards.shape == run.raw_rewards.shape == run.policy_ids.shape == (1,)


def test_run_determinism():
    cfg = two_arm(T=3000)
    a, b = H.run_experiment(cfg, 5), H.run_experiment(cfg, 5)
    assert H.run_csv(a) == H.run_csv(b)
    assert H.run_csv(H.run_experiment(cfg, 6)) != H.run_csv(a)
    assert np.all(np.diff(a.episode_starts) > 0)


def test_streams_are_independent():
    a = np.random.default_rng(H.stream(0, "env")).random(4)
    b = np.random.default_rng(H.stream(0, "oracle")).random(4)
    c = np.random.default_rng(H.stream(0, "env")).random(4)
    assert not np.allclose(a, b) and np.array_equal(a, c)


def test_run_error_report():
    cfg = two_arm(T=10)

    class Broken:
        boundary_hooks = []

        def act(self, s):
            raise ValueError("boom")

    with pytest.raises(H.RunError) as exc:
        H.run_experiment(cfg, 0, agent=Broken())
    assert exc.value.report["error"] == "ValueError" and exc.value.report["t"] == 0


# -- oracle ---------------------------------------------------------------------------------

def test_oracle_matches_analytic_gain():
    g = H.estimate_optimal_gain(two_arm())
    assert g.w_star == pytest.approx((0.25,))
    # the grid contains the optimum; allow the CI plus the max-of-noisy-means bias
    assert abs(g.J_star - TWO_ARM_J) <= g.half_width + 3e-3
    w = g.grid[:, 0]
    np.testing.assert_allclose(g.means, 0.625 + 0.25 * w - 0.5 * w * w, atol=5e-3)
    assert 0 <= g.J_star <= 1 and g.half_width >= 0


def test_oracle_riverswim_optimum_swims_right():
    cfg = H.ExperimentConfig(env="riverswim", family="riverswim_const",
                             oracle=H.OracleBudget(0.1, 2000, 4, 3))
    g = H.estimate_optimal_gain(cfg)
    assert g.w_star[0] >= 0.8


def test_oracle_single_policy_family():
    cfg = two_arm(w_bounds=[[0.4, 0.4]])
    g = H.estimate_optimal_gain(cfg)
    assert len(g.grid) == 1 and g.J_star == g.means[0]
    assert g.J_star == pytest.approx(0.625 + 0.1 - 0.08, abs=5e-3)


def test_oracle_cache_coherence(tmp_path, monkeypatch):
    monkeypatch.setenv("POLICY_ZOOM_CACHE", str(tmp_path))
    cfg = two_arm()
    cold = H.estimate_optimal_gain(cfg, use_cache=False)
    first = H.estimate_optimal_gain(cfg)
    assert len(list(tmp_path.glob("oracle-*.npz"))) == 1
    hit = H.estimate_optimal_gain(cfg)
    for g in (first, hit):
        assert g.to_json() == cold.to_json()
        assert g.means.tobytes() == cold.means.tobytes()
    other = H.estimate_optimal_gain(cfg, H.OracleBudget(0.1, 4000, 8, 7))
    assert len(list(tmp_path.glob("oracle-*.npz"))) == 2 and len(other.grid) < len(hit.grid)


# -- regret ---------------------------------------------------------------------------------

def test_regret_arithmetic():
    r = np.full(10, 0.6)
    assert H.regret_curve(r, 0.8)[-1] == pytest.approx(2.0)
    R = H.regret_curve(np.array([1.0, 0.0, 1.0]), 0.5)
    np.testing.assert_allclose(R, [-0.5, 0.0, -0.5])  # not monotone


def test_regret_identity():
    rng = np.random.default_rng(0)
    r = rng.random(200_000)
    J = 0.5123456789
    R = H.regret_curve(r, J)
    T = len(r)
    assert abs(R[-1] + math.fsum(r) - T * J) <= 1e-9 * T


def test_optimal_policy_has_vanishing_regret():
    env = make_env("two_arm_chain")
    noise = NoiseStream(H.stream(0, "env"), env.n_uniform, env.n_normal)
    x = env.reset(noise)
    T = 200_000
    r = np.empty(T)
    for t in range(T):
        u, z = noise.draw()
        x, r[t], _ = env.step(x, 0.25, u, z)
    R = H.regret_curve(r, TWO_ARM_J)
    assert abs(R[-1]) / T < 5e-3
    assert abs(R[-1]) / T < abs(R[999]) / 1000 + 1e-3


def test_relative_reward_curve():
    run = H.run_experiment(two_arm(T=50), 0)
    c = H.relative_reward_curve(run, 0.1)
    assert c[-1] == pytest.approx(run.raw_rewards.sum() - 50 * 0.1)


# -- aggregation ------------------------------------------------------------------------------

def fake_run(seed, rewards, activations=()):
    n = len(rewards)
    z = np.zeros(n, dtype=np.int64)
    return H.RunResult(seed, np.asarray(rewards, float), np.asarray(rewards, float), z, z,
                       np.array([0]), list(activations), [])


def test_aggregate_examples():
    a = fake_run(0, [0.5, 0.5, 0.5])
    agg = H.aggregate([a, fake_run(1, [0.5, 0.5, 0.5])], 0.5)
    np.testing.assert_array_equal(agg.stderr, 0.0)
    c = 0.3
    b = fake_run(1, [0.5 - c, 0.5, 0.5])
    agg = H.aggregate([a, b], 0.5)
    assert agg.mean[-1] == pytest.approx(c / 2)
    with pytest.raises(ValueError):
        H.aggregate([a, fake_run(1, [0.5, 0.5])], 0.5)
    with pytest.raises(ValueError):
        H.aggregate([a], 0.5)


def test_activation_table():
    g = H.GainEstimate(1.0, 0.0, "test", (1.0,), grid=np.array([[0.0], [0.5], [1.0]]),
                       means=np.array([0.6, 0.85, 1.0]), stderr=np.zeros(3),
                       raw_means=np.array([-6.0, -3.0, -1.0]))
    runs = [fake_run(0, [1.0], [(0, 0, [0.02], 1.0), (1, 1, [0.9], 0.5)]),
            fake_run(1, [1.0], [(0, 0, [0.45], 1.0)])]
    t = H.activation_table(runs, g)
    assert t["n_activated"] == 3 and t["buckets"]["[0,0.05)"] == 1
    assert t["buckets"]["[0.1,0.25)"] == 1 and t["buckets"]["[0.25,0.5)"] == 1
    assert t["high_gap_share"] == pytest.approx(1 / 3)
    raw = H.activation_table(runs, g, "raw")
    assert raw["buckets"]["[0.5,inf)"] == 2


def test_loglog_slope():
    t = np.arange(1, 10_001, dtype=float)
    assert H.loglog_slope(t, 3 * t ** 0.6, 100, 10_000) == pytest.approx(0.6)


# -- export -----------------------------------------------------------------------------------

def test_export_files(tmp_path):
    cfg = two_arm(T=3)
    runs = [H.run_experiment(cfg, s) for s in (0, 1)]
    agg = H.aggregate(runs, 0.6)
    summ = H.run_summary(cfg, runs, H.GainEstimate(0.6, 0.01, "fixed"), agg)
    files = H.export(tmp_path / "a", runs, agg, summ)
    again = H.export(tmp_path / "b", runs, agg, summ)
    for f, g in zip(files, again):
        assert f.read_bytes() == g.read_bytes()
        assert f.read_text().endswith("\n")
    text = (tmp_path / "a" / "run_seed0.csv").read_text()
    assert len(text.splitlines()) == 4
    assert text.splitlines()[0] == "t,reward_clipped,reward_raw,policy_id,episode_id"
    assert (tmp_path / "a" / "aggregate.csv").read_text().startswith("t,mean_regret,stderr\n")

    def strict(c):
        raise ValueError(c)
    back = json.loads((tmp_path / "a" / "summary.json").read_text(), parse_constant=strict)
    assert back["J_star"]["J_star"] == 0.6 and back["config"]["T"] == 3
    # floats keep 17 significant digits
    v = float(text.splitlines()[1].split(",")[1])
    assert v == runs[0].rewards[0]


def test_export_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        H.export(blocker / "sub", [fake_run(0, [0.1])])


# -- zooming diagnostic ----------------------------------------------------------------------

def test_zooming_constant_gains():
    grid = np.linspace(0, 1, 11)[:, None]
    g = H.GainEstimate(0.5, 0.0, "test", (0.0,), grid=grid, means=np.full(11, 0.5),
                       stderr=np.zeros(11), raw_means=np.full(11, 0.5))
    res = H.zooming_diagnostic(two_arm(), [0.4, 0.1, 0.01], oracle=g)
    assert all(band == 0 for _, band, _ in res["rows"])
    assert all(low > 0 for _, _, low in res["rows"])


def test_greedy_cover():
    pts = np.linspace(0, 1, 11)[:, None]
    assert H.greedy_cover(pts, 0.15) == 6
    assert H.greedy_cover(pts, 2.0) == 1
    assert H.greedy_cover(np.empty((0, 1)), 0.1) == 0


def test_zooming_riverswim_one_param():
    cfg = H.ExperimentConfig(env="riverswim", family="riverswim_const",
                             oracle=H.OracleBudget(0.02, 2000, 4, 3))
    gammas = [0.4, 0.2, 0.1, 0.05]
    coarse = H.zooming_diagnostic(cfg, gammas, c_z=2.0)
    assert coarse["d_z_hat"] <= 1.5
    fine = H.zooming_diagnostic(cfg, gammas, resolution=0.01, c_z=2.0)
    for (_, a, b), (_, c, d) in zip(coarse["rows"], fine["rows"]):
        # covers at radius gamma / c_z barely depend on the grid once it is finer than the radius
        assert c <= 2 * a + 1 and d <= 2 * b + 1
