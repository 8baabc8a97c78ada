"""Acceptance criteria 1-11.

Each test prints one ``CRITERION n: PASS|FAIL`` line with the measured
quantities and runtime, then asserts.  Run just these with

    pytest tests/test_acceptance.py -v -s

Criteria 9 and 10 run full multi-seed experiments (several minutes each).
"""
import math
import time

import numpy as np
import pytest
from scipy.optimize import linprog

from policyzoom import harness as H
from policyzoom.baseline import net_for_budget
from policyzoom.kernel import KernelConstants, TransitionLog, build_ball
from policyzoom.mb import approx_diameter_limit, default_max_iter, derive_constants, evi, inner_max
from policyzoom.partition import PartitionConstants, PartitionTree, cell_diam, thresholds
from policyzoom.policies import lipschitz_L_J, mixing_steps

TWO_ARM_J = 0.65625


def report(capsys, n: int, ok: bool, detail: str, seconds: float):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail} | {seconds:.1f}s")


# -- 1 ------------------------------------------------------------------------------------

def _simplex_grid(k: int, n: int) -> np.ndarray:
    if k == 2:
        a = np.arange(n + 1) / n
        return np.stack([a, 1 - a], axis=1)
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    return np.stack([i[keep], j[keep], n - i[keep] - j[keep]], axis=1) / n


def _lp_max(v, c, eta):
    k = len(v)
    I = np.eye(k)
    res = linprog(np.concatenate([-v, np.zeros(k)]),
                  A_ub=np.block([[I, -I], [-I, -I], [np.zeros((1, k)), np.ones((1, k))]]),
                  b_ub=np.concatenate([c, -c, [eta]]),
                  A_eq=np.concatenate([np.ones(k), np.zeros(k)])[None], b_eq=[1.0],
                  bounds=[(0, None)] * (2 * k), method="highs")
    return -res.fun


def test_criterion_01_inner_max(capsys):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    grids = {2: _simplex_grid(2, 1000), 3: _simplex_grid(3, 1000)}
    worst = 0.0
    for n in range(200):
        k = 2 + n % 3
        v = rng.uniform(0, 1, k)
        c = rng.dirichlet(np.ones(k))
        eta = rng.uniform(0, 2)
        val = inner_max(v, c, eta)[1]
        if k in grids:
            G = grids[k]
            feas = np.abs(G - c).sum(axis=1) <= eta + 1e-12
            brute = float((G[feas] @ v).max()) if feas.any() else float(c @ v)
            # the grid is a subset of the feasible set: inner_max can only be above it
            worst = max(worst, abs(val - brute), brute - val)
        else:
            # 4 states: a 1e-3 grid has ~1.7e8 points, so the exact LP stands in for it
            worst = max(worst, abs(val - _lp_max(v, c, eta)))
    dt = time.time() - t0
    ok = worst <= 2e-3 and dt < 10
    report(capsys, 1, ok, f"max |inner_max - brute| = {worst:.2e} (tol 2e-3)", dt)
    assert ok


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_02_evi_singleton(capsys):
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(50):
        n = 2 + i % 4
        P = rng.dirichlet(np.ones(n), size=n)
        r = rng.uniform(0, 1, n)
        # stationary law: pi (P - I) = 0, sum pi = 1
        A = np.vstack([(P - np.eye(n)).T, np.ones(n)])
        pi = np.linalg.lstsq(A, np.concatenate([np.zeros(n), [1.0]]), rcond=None)[0]
        g = evi(P, np.zeros(n), np.arange(n), r, tol=1e-10, max_iter=default_max_iter(n, 0.5)).gain
        worst = max(worst, abs(g - pi @ r))
    dt = time.time() - t0
    ok = worst <= 1e-6 and dt < 30
    report(capsys, 2, ok, f"max |gain - pi.r| = {worst:.2e} (tol 1e-6)", dt)
    assert ok


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_03_evi_convergence(capsys):
    t0 = time.time()
    rng = np.random.default_rng(11)
    converged = 0
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 40))
        P = rng.dirichlet(np.ones(n) * rng.uniform(0.1, 2.0), size=n)
        P = 0.95 * P + 0.05 / n  # strictly positive rows: ergodic for every kernel in the ball
        eta = rng.uniform(0, 2, n)
        r = rng.uniform(0, 1, n)
        res = evi(P, eta, np.arange(n), r, tol=1e-6, max_iter=default_max_iter(n, 0.5))
        converged += res.final_span_delta <= 1e-6
        worst = max(worst, res.final_span_delta)
    dt = time.time() - t0
    ok = converged == 100 and dt < 60
    report(capsys, 3, ok, f"{converged}/100 converged, max final span {worst:.2e}", dt)
    assert ok


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_04_partition(capsys):
    t0 = time.time()
    rng = np.random.default_rng(3)
    tree = PartitionTree([[0.0, 6.0]], PartitionConstants(1.0, 100_000, 0.1))
    S = rng.uniform(0, 6, 100_000)
    S[::2] = np.clip(rng.normal(4.2, 0.1, 50_000), 0, 6)
    bad = 0
    splits_exact = True
    ell = tree.ell_max
    for i, s in enumerate(S):
        key, kids = tree.record_visit((s,))
        for k in ([key] if kids is None else kids):
            lo, hi = tree.thresholds(k)
            bad += not (lo <= tree.counts[k] < hi)
        if kids is not None:
            n_max = tree.thresholds(key)[1]
            n = tree.counts[kids[0]]
            splits_exact &= n >= n_max > n - 1
        bad += tree.ell_max < ell
        ell = tree.ell_max
        if i % 20_000 == 19_999:
            vol = sum(tree.cell(k).volume for k in tree.counts)
            bad += abs(vol - 6.0) > 1e-9
    lengths = sorted((tree.cell(k).lower[0], tree.cell(k).upper[0]) for k in tree.counts)
    disjoint = all(a[1] <= b[0] + 1e-12 for a, b in zip(lengths, lengths[1:]))
    covering = lengths[0][0] == 0.0 and lengths[-1][1] == 6.0 and all(
        abs(a[1] - b[0]) < 1e-12 for a, b in zip(lengths, lengths[1:]))
    dt = time.time() - t0
    ok = bad == 0 and splits_exact and disjoint and covering and tree.conserved() and dt < 5
    report(capsys, 4, ok, f"{len(tree.counts)} leaves, {len(tree.splits)} splits, ell_max "
                          f"{tree.ell_max}, violations {bad}", dt)
    assert ok


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_05_covering(capsys):
    t0 = time.time()
    cfg = H.ExperimentConfig(env="riverswim", family="riverswim_affine", agent="pzrl_mf",
                             T=20_000, c_df=0.01, check_cover_every=1)
    run = H.run_experiment(cfg, 0)
    dt = time.time() - t0
    ok = run.cover_violations == 0 and run.cover_checks == len(run.episode_starts) and dt < 120
    report(capsys, 5, ok, f"{run.cover_checks} boundary scans, {run.cover_violations} uncovered, "
                          f"{len(run.activations)} active policies", dt)
    assert ok


# -- 6 ------------------------------------------------------------------------------------

def _normal_cdf(x, mu, sd):
    return 0.5 * (1 + math.erf((x - mu) / (sd * math.sqrt(2))))


def test_criterion_06_kernel_concentration(capsys):
    t0 = time.time()
    T, delta = 10_000, 0.1
    k = KernelConstants(1.0, T, delta, 0.0, 1.0)
    hits = total = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tree = PartitionTree([[0.0, 4.0]], PartitionConstants(1.0, T, delta))
        log = TransitionLog(1)
        # s' = clip(0.5 s + 1 + N(0, 0.25)), n visits spread uniformly in each unit cell
        for c in range(4):
            S = c + rng.random(40)
            nxt = np.clip(0.5 * S + 1 + 0.5 * rng.standard_normal(40), 0.0, 4.0)
            for s, x in zip(S, nxt):
                key, _ = tree.record_visit((s,))
                log.add(key, (x,))
        ball = build_ball(log, tree, k)
        edges = np.linspace(0, 4, len(ball.fine_keys) + 1)
        for i, key in enumerate(ball.leaf_keys):
            mu = 0.5 * tree.cell(key).rep[0] + 1
            cdf = np.array([_normal_cdf(e, mu, 0.5) for e in edges])
            cdf[0], cdf[-1] = 0.0, 1.0
            err = np.abs(ball.center.probs[i] - np.diff(cdf)).sum()
            hits += err <= ball.radii[i]
            total += 1
    dt = time.time() - t0
    share = hits / total
    ok = share >= 0.95
    report(capsys, 6, ok, f"L1 error <= eta in {hits}/{total} = {share:.3f} (need 0.95)", dt)
    assert ok


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_07_optimism(capsys):
    t0 = time.time()
    shares = {}
    for agent, T in (("pzrl_mf", 5000), ("pzrl_mb", 1000)):
        cfg = H.ExperimentConfig(env="two_arm_chain", family="two_arm_const", agent=agent,
                                 T=T, delta=0.1)
        hit = tot = 0
        for seed in range(100):
            run = H.run_experiment(cfg, seed)
            idx = np.array([i for _, _, i in run.boundary_log])
            hit += int(np.sum(idx >= TWO_ARM_J))
            tot += len(idx)
        shares[agent] = hit / tot
    dt = time.time() - t0
    ok = all(s >= 0.85 for s in shares.values())
    report(capsys, 7, ok, "index >= J* at " + ", ".join(f"{a}: {s:.3f}" for a, s in shares.items())
           + " of boundaries (need 0.85)", dt)
    assert ok


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_08_diameter_sandwich(capsys):
    t0 = time.time()
    cfg = H.ExperimentConfig(env="two_arm_chain", family="two_arm_const", agent="pzrl_mb",
                             T=100_000, delta=0.1)
    env = cfg.make_env()
    agent = H.build_agent(cfg, env, cfg.make_family(env))
    c_diam = agent.mb.c_diam
    ratios = []
    for w in (0.1, 0.25, 0.5, 0.9):
        for seed in range(3):
            rec = agent.new_record((w,))
            rng = np.random.default_rng(seed)
            s = np.array([0.3])
            for _ in range(30_000):
                key, _ = rec.tree.record_visit(s)
                x, _, _ = env.step(s, np.array([w]), rng.random(env.n_uniform), np.empty(0))
                s = env.observe(x)
                rec.log.add(key, s)
            rec.N = 30_000
            agent.refresh(rec)
            lim = approx_diameter_limit(rec.ball, 1e-9, alpha=agent.mb.alpha).gain
            # stationary law under constant w: density 2(1 - w) on [0, 1/2), 2w on [1/2, 1]
            true = 0.0
            for k in rec.tree.leaves():
                c = rec.tree.cell(k)
                lo, hi = c.lower[0], c.upper[0]
                mass = 2 * (1 - w) * max(0.0, min(hi, 0.5) - lo) + 2 * w * max(0.0, hi - max(lo, 0.5))
                true += mass * cell_diam(k[0], 1)
            ratios.append(lim / true)
    dt = time.time() - t0
    ok = min(ratios) >= 0.9 and max(ratios) <= 1.1 * c_diam
    report(capsys, 8, ok, f"limit / diam_true in [{min(ratios):.3f}, {max(ratios):.3f}], "
                          f"allowed [0.9, {1.1 * c_diam:.4g}]", dt)
    assert ok


# -- 9 ------------------------------------------------------------------------------------

RIVERSWIM = dict(env="riverswim", family="riverswim_affine", T=200_000, delta=0.1, c_df=0.01,
                 oracle=H.OracleBudget(0.05, 20_000, 4))


def test_criterion_09_riverswim(capsys):
    t0 = time.time()
    seeds = range(10)
    mf_cfg = H.ExperimentConfig(agent="pzrl_mf", **RIVERSWIM)
    J = H.estimate_optimal_gain(mf_cfg)
    mf = [H.run_experiment(mf_cfg, s) for s in seeds]
    n_act = int(round(np.mean([len(r.activations) for r in mf])))
    env = mf_cfg.make_env()
    net = net_for_budget(mf_cfg.make_family(env), n_act)
    ucb_cfg = H.ExperimentConfig(agent="policy_ucb", epsilon=net.epsilon, **RIVERSWIM)
    ucb = [H.run_experiment(ucb_cfg, s) for s in seeds]
    a_mf, a_ucb = H.aggregate(mf, J), H.aggregate(ucb, J)
    (mf_lo, mf_hi), (u_lo, u_hi) = a_mf.ci95(), a_ucb.ci95()
    slope = H.loglog_slope(a_mf.t, a_mf.mean, 1e4, 2e5)
    dt = time.time() - t0
    ok = a_mf.mean[-1] < a_ucb.mean[-1] and mf_hi < u_lo and slope < 1.0 and dt < 1800
    report(capsys, 9, ok,
           f"J*={J.J_star:.5f}+-{J.half_width:.1e}; regret at T: MF {a_mf.mean[-1]:.1f} "
           f"[{mf_lo:.1f}, {mf_hi:.1f}] ({n_act} policies) vs UCB {a_ucb.mean[-1]:.1f} "
           f"[{u_lo:.1f}, {u_hi:.1f}] ({len(net)} policies); MF log-log slope {slope:.3f}", dt)
    assert ok


# -- 10 -----------------------------------------------------------------------------------

SCHEDULING = dict(env="scheduling", family="scheduling_threshold", T=100_000, delta=0.1,
                  c_df=0.01, gap_units="raw", oracle=H.OracleBudget(0.05, 20_000, 4))


def test_criterion_10_scheduling(capsys):
    t0 = time.time()
    seeds = range(10)
    mf_cfg = H.ExperimentConfig(agent="pzrl_mf", **SCHEDULING)
    oracle = H.estimate_optimal_gain(mf_cfg)
    mf = [H.run_experiment(mf_cfg, s) for s in seeds]
    env = mf_cfg.make_env()
    _, always_raw = H.fixed_action_gain(env, 1.0, H.OracleBudget(0.05, 100_000, 8))
    mf_raw = float(np.mean([math.fsum(r.raw_rewards) for r in mf]))
    n_act = int(round(np.mean([len(r.activations) for r in mf])))
    net = net_for_budget(mf_cfg.make_family(env), n_act)
    # every net policy is activated at t = 0, so one run gives the uniform net's table
    ucb_cfg = H.ExperimentConfig(agent="policy_ucb", epsilon=net.epsilon, **dict(SCHEDULING, T=1))
    ucb = [H.run_experiment(ucb_cfg, 0)]
    t_mf = H.activation_table(mf, oracle, "raw")
    t_ucb = H.activation_table(ucb, oracle, "raw")
    dt = time.time() - t0
    ok = (mf_raw > always_raw * mf_cfg.T and t_mf["high_gap_share"] < t_ucb["high_gap_share"]
          and dt < 1800)
    report(capsys, 10, ok,
           f"raw reward per step MF {mf_raw / mf_cfg.T:.3f} vs always-transmit {always_raw:.3f}; "
           f"share with raw gap > 0.25: MF {t_mf['high_gap_share']:.3f} ({t_mf['n_activated']} "
           f"activations) vs uniform net {t_ucb['high_gap_share']:.3f} ({len(net)} policies)", dt)
    assert ok


# -- 11 -----------------------------------------------------------------------------------

def test_criterion_11_constants(capsys):
    t0 = time.time()
    L_J = lipschitz_L_J(1, 1, 1, 0.5)
    m = mixing_steps(4, 0.5)
    k = derive_constants(alpha=0.5, C=4, L_r=1, L_p=1, L_phi=1, d_S=1)
    n_min0 = thresholds(0, 1, PartitionConstants(1.0, 1000, 0.1))[0]
    dt = time.time() - t0
    ok = L_J == 2 and m == 3 and k.m_star == 3 and n_min0 == 0
    report(capsys, 11, ok, f"L_J={L_J}, m*={m}, level-0 N_min={n_min0}", dt)
    assert ok
