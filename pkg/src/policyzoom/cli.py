"""Command-line entry point: ``policyzoom run|sweep|oracle|diag|export-plots``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .env import ConfigError


def _seeds(spec: str) -> list[int]:
    """``a..b`` (inclusive) or a comma list."""
    if ".." in spec:
        a, b = spec.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(s) for s in spec.split(",") if s]


def _budget(spec: str | None, default: H.OracleBudget) -> H.OracleBudget:
    if not spec:
        return default
    parts = spec.split(",")
    res = float(parts[0])
    rollout = int(parts[1]) if len(parts) > 1 else default.rollout
    reps = int(parts[2]) if len(parts) > 2 else default.replications
    return H.OracleBudget(res, rollout, reps, default.seed)


def _oracle_or_none(cfg, skip: bool):
    return None if skip else H.estimate_optimal_gain(cfg)


def cmd_run(args) -> int:
    cfg = H.ExperimentConfig.from_toml(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out or cfg.out_dir)
    run = H.run_experiment(cfg, seed)
    J = _oracle_or_none(cfg, args.no_oracle)
    H.export(out, [run], summary=H.run_summary(cfg, [run], J))
    print(f"seed {seed}: T={run.T} episodes={len(run.episode_starts)} "
          f"activations={len(run.activations)} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = H.ExperimentConfig.from_toml(args.config)
    seeds = _seeds(args.seeds) if args.seeds else list(cfg.seeds)
    out = Path(args.out or cfg.out_dir)
    runs = [H.run_experiment(cfg, s) for s in seeds]
    J = _oracle_or_none(cfg, args.no_oracle)
    agg = None
    if J is not None and len(runs) >= 2:
        agg = H.aggregate(runs, J, J, cfg.gap_units)
    H.export(out, runs, agg, H.run_summary(cfg, runs, J, agg))
    msg = f"{len(runs)} runs -> {out}"
    if agg is not None:
        lo, hi = agg.ci95()
        msg += f"; final mean regret {agg.mean[-1]:.4g} (95% CI {lo:.4g}..{hi:.4g})"
    print(msg)
    return 0


def cmd_oracle(args) -> int:
    cfg = H.ExperimentConfig.from_toml(args.config)
    g = H.estimate_optimal_gain(cfg, _budget(args.budget, cfg.oracle), use_cache=not args.no_cache)
    print(json.dumps(g.to_json(), indent=2))
    return 0


def cmd_diag(args) -> int:
    cfg = H.ExperimentConfig.from_toml(args.config)
    out = Path(args.out or cfg.out_dir)
    if args.what == "zoom":
        gammas = [float(g) for g in args.gammas.split(",")]
        res = H.zooming_diagnostic(cfg, gammas, args.resolution)
        lines = ["gamma,cover_band,cover_below"] + [f"{g:.17g},{a},{b}" for g, a, b in res["rows"]]
        H._write(out / "zoom.csv", "\n".join(lines) + "\n")
        print(f"d_z_hat = {res['d_z_hat']:.4g} (c_z = {res['c_z']:.4g}) -> {out / 'zoom.csv'}")
        return 0
    if cfg.agent != "pzrl_mb":
        raise ConfigError("kernel and partition diagnostics need agent = 'pzrl_mb'")
    env = cfg.make_env()
    family = cfg.make_family(env)
    agent = H.build_agent(cfg, env, family)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    H.run_experiment(cfg, seed, agent=agent)
    if args.what == "partition":
        dump = {rec.id: {"w": list(rec.w), "ell_max": rec.tree.ell_max,
                         "leaves": [[lv, list(a), n] for lv, a, n in rec.tree.dump()]}
                for rec in agent.records}
        H._write(out / "partition.json", H.summary_json(dump))
        print(f"{len(dump)} partitions -> {out / 'partition.json'}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    rows = ["policy_id,gain,diam_b,index,n_leaves,ell_max"]
    for rec in agent.records:
        agent.refresh(rec)
        np.savetxt(out / f"kernel_policy{rec.id}.csv", rec.ball.center.probs, fmt="%.17g",
                   delimiter=",")
        rows.append(f"{rec.id},{rec.gain:.17g},{rec.diam_b:.17g},{rec.index_value:.17g},"
                    f"{len(rec.tree.counts)},{rec.tree.ell_max}")
    H._write(out / "mb_policies.csv", "\n".join(rows) + "\n")
    print(f"{len(agent.records)} kernels -> {out}")
    return 0


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        data = np.array([[float(v) for v in row] for row in rd])
    return {h: data[:, i] for i, h in enumerate(header)}


def cmd_export_plots(args) -> int:
    src = Path(args.inp)
    out = Path(args.out or src / "plots")
    agg_path = src / "aggregate.csv"
    written = []
    if agg_path.exists():
        a = _read_csv(agg_path)
        t = a["t"].astype(int)
        idx = np.unique(np.geomspace(1, len(t), num=min(len(t), args.points)).astype(int) - 1)
        lines = ["t,mean_regret,lower95,upper95"]
        for i in idx:
            m, s = a["mean_regret"][i], a["stderr"][i]
            lines.append(f"{t[i]},{m:.17g},{m - 1.96 * s:.17g},{m + 1.96 * s:.17g}")
        H._write(out / "regret_plot.csv", "\n".join(lines) + "\n")
        written.append(out / "regret_plot.csv")
    summ = src / "summary.json"
    if summ.exists():
        s = json.loads(summ.read_text())
        table = s.get("activation_table")
        if table:
            lines = ["bucket,count"] + [f"{k},{v}" for k, v in table["buckets"].items()]
            H._write(out / "activation_buckets.csv", "\n".join(lines) + "\n")
            written.append(out / "activation_buckets.csv")
    for p in sorted(src.glob("run_seed*.csv")):
        r = _read_csv(p)
        pid = r["policy_id"].astype(int)
        first = {}
        for t, k in zip(r["t"].astype(int), pid):
            first.setdefault(k, t)
        lines = ["policy_id,first_played_t"] + [f"{k},{v}" for k, v in sorted(first.items())]
        q = out / f"{p.stem}_first_play.csv"
        H._write(q, "\n".join(lines) + "\n")
        written.append(q)
    if not written:
        print(f"nothing to export in {src}", file=sys.stderr)
        return 1
    print(f"{len(written)} files -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policyzoom", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="single seeded run")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--no-oracle", action="store_true", help="skip the optimal-gain oracle")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="runs over a seed range plus aggregation")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", help="a..b or comma list (default: config seeds)")
    s.add_argument("--out")
    s.add_argument("--no-oracle", action="store_true")
    s.set_defaults(func=cmd_sweep)

    o = sub.add_parser("oracle", help="estimate the optimal gain over the family")
    o.add_argument("--config", required=True)
    o.add_argument("--budget", help="resolution[,rollout[,replications]]")
    o.add_argument("--no-cache", action="store_true")
    o.set_defaults(func=cmd_oracle)

    d = sub.add_parser("diag", help="diagnostics")
    d.add_argument("what", choices=["zoom", "kernels", "partition"])
    d.add_argument("--config", required=True)
    d.add_argument("--out")
    d.add_argument("--seed", type=int)
    d.add_argument("--gammas", default="0.4,0.2,0.1,0.05,0.025")
    d.add_argument("--resolution", type=float)
    d.set_defaults(func=cmd_diag)

    e = sub.add_parser("export-plots", help="plot-ready CSVs from a results directory")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out")
    e.add_argument("--points", type=int, default=200)
    e.set_defaults(func=cmd_export_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, H.RunError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
