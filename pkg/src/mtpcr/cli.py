"""Command-line front end.

Subcommands:

* ``register``: align three PLY clouds, write the transforms report and
  the per-generation convergence CSV (optionally the aligned clouds).
* ``bench``: generate or load a synthetic three-view problem, run it over
  several seeds and write per-run errors plus summary statistics.
* ``sweep``: grid of bench runs over loop weight, sharing probability and
  sample ratio.

Flags override values from an optional ``key=value`` config file, which
in turn overrides the built-in defaults. MTPCR_THREADS caps evaluation
parallelism; it never changes the numbers a run produces.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, geometry, multitask
from .pointcloud import apply_transform, load_ply, save_ply, subsample

CONFIG_KEYS = {
    "seed": int,
    "seeds": str,
    "repeats": int,
    "generations": int,
    "pop_size": int,
    "p_intra": float,
    "p_inter": float,
    "top_ratio": float,
    "alpha": float,
    "scale_factor": float,
    "sample_ratio": float,
    "epsilon": float,
    "overlaps": str,
    "sigma": float,
    "base_points": int,
    "problem_seed": int,
    "full_range": lambda v: v.lower() in ("1", "true", "yes"),
}


def _read_config_file(path) -> dict:
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line (expected key=value): {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key: {key!r}")
        values[key] = CONFIG_KEYS[key](value)
    return values


def _merge_config(args) -> dict:
    """Effective settings: defaults, overridden by the config file,
    overridden by explicit flags (argparse defaults are all None)."""
    merged = dict(getattr(args, "_file_config", {}))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _mt_config(settings: dict, seed: int) -> multitask.MTConfig:
    cfg = multitask.MTConfig(seed=seed)
    for key in ("pop_size", "generations", "p_intra", "p_inter", "top_ratio",
                "scale_factor", "alpha", "epsilon"):
        if key in settings:
            setattr(cfg, key, settings[key])
    cfg.validate()
    return cfg


def _parse_seed_list(settings: dict) -> list[int]:
    if "seeds" in settings and settings["seeds"]:
        return [int(v) for v in str(settings["seeds"]).replace(",", " ").split()]
    base = int(settings.get("seed", 0))
    repeats = int(settings.get("repeats", 1))
    if repeats < 1:
        raise ValueError("repeat count must be at least 1")
    return list(range(base, base + repeats))


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def _maybe_subsample(clouds, ratio, seed):
    if ratio is None:
        return clouds
    return tuple(subsample(c, ratio, seed=[seed, i]) for i, c in enumerate(clouds))


def _write_convergence(report: multitask.RunReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("generation",) + multitask.TASK_ORDER)
        for row in report.convergence_rows():
            writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])


def _write_report(report: multitask.RunReport, path: Path) -> None:
    path.write_text(report.canonical_json(), encoding="ascii")


def _emit_aligned(clouds, report: multitask.RunReport, out: Path) -> None:
    """All three clouds expressed in cloud 1's frame."""
    t12, _, t31 = report.transforms
    aligned = (
        clouds[0],
        apply_transform(clouds[1], geometry.invert(t12)),
        apply_transform(clouds[2], t31),
    )
    for i, cloud in enumerate(aligned, start=1):
        save_ply(cloud, out / f"aligned{i}.ply")


def _run_one(clouds, settings: dict, seed: int, ground_truth=None) -> multitask.RunReport:
    clouds = _maybe_subsample(clouds, settings.get("sample_ratio"), seed)
    problem = multitask.prepare_problem(*clouds, epsilon=settings.get("epsilon"),
                                        ground_truth=ground_truth)
    return multitask.run(problem, _mt_config(settings, seed))


def cmd_register(args) -> int:
    settings = _merge_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clouds = tuple(load_ply(p) for p in (args.cloud1, args.cloud2, args.cloud3))
    ground_truth = None
    if args.gt:
        manifest = bench.parse_manifest(args.gt)
        ground_truth = [manifest["t12"], manifest["t23"], manifest["t31"]]
    seed = int(settings.get("seed", 0))
    report = _run_one(clouds, settings, seed, ground_truth)
    _write_report(report, out / "transforms.json")
    _write_convergence(report, out / "convergence.csv")
    if args.emit_aligned:
        _emit_aligned(clouds, report, out)
    print(f"registered 3 clouds in {report.wall_time_s:.2f}s; "
          f"loop residual {report.loop_residual:.6g}"
          + (f"; Err_R {report.err_r:.6g} Err_T {report.err_t:.6g}"
             if report.err_r is not None else ""))
    return 0


_PER_RUN_FIELDS = ("run", "seed", "err_r", "err_t", "err_r_x1000", "err_t_x1000",
                   "loop_residual") + tuple(f"cost_{t}" for t in multitask.TASK_ORDER)


def _bench_problem(args, settings: dict) -> bench.SyntheticProblem:
    if args.problem:
        return bench.load_problem(args.problem)
    if args.base:
        base = load_ply(args.base)
    else:
        base = bench.make_base_cloud(int(settings.get("base_points", 2000)),
                                     seed=int(settings.get("problem_seed", 0)))
    overlaps = tuple(float(v) for v in
                     str(settings.get("overlaps", "0.8,0.6,0.6")).replace(",", " ").split())
    return bench.generate(base, overlaps, float(settings.get("sigma", 0.0)),
                          seed=int(settings.get("problem_seed", 0)),
                          full_range=bool(settings.get("full_range", False)))


def _run_bench(problem: bench.SyntheticProblem, settings: dict, seeds, out: Path):
    """Run one problem over several seeds; returns (rows, summary, failed)."""
    rows = []
    reports = []
    failed = []
    for run_index, seed in enumerate(seeds):
        try:
            report = _run_one(problem.clouds, settings, seed,
                              ground_truth=problem.ground_truth)
        except Exception as exc:  # noqa: BLE001 -- per-seed isolation
            print(f"seed {seed} failed: {exc}", file=sys.stderr)
            failed.append(seed)
            continue
        metrics = bench.evaluate(report.transforms, problem)
        rows.append({
            "run": run_index,
            "seed": seed,
            "err_r": metrics.err_r,
            "err_t": metrics.err_t,
            "err_r_x1000": metrics.err_r_x1000,
            "err_t_x1000": metrics.err_t_x1000,
            "loop_residual": metrics.loop_residual,
            **{f"cost_{t}": c for t, c in zip(multitask.TASK_ORDER, report.final_costs)},
        })
        reports.append(report)

    summary = {}
    if rows:
        err_r = np.array([r["err_r"] for r in rows])
        err_t = np.array([r["err_t"] for r in rows])
        summary = {
            "runs": len(rows),
            "seeds": [r["seed"] for r in rows],
            "err_r_mean": float(err_r.mean()),
            "err_r_std": float(err_r.std()),
            "err_t_mean": float(err_t.mean()),
            "err_t_std": float(err_t.std()),
            "err_r_x1000_mean": float(1000.0 * err_r.mean()),
            "err_r_x1000_std": float(1000.0 * err_r.std()),
            "err_t_x1000_mean": float(1000.0 * err_t.mean()),
            "err_t_x1000_std": float(1000.0 * err_t.std()),
            "tasks": {},
        }
        finals = np.array([report.final_costs for report in reports])
        for col, label in enumerate(multitask.TASK_ORDER):
            summary["tasks"][label] = {
                "best_cost": float(finals[:, col].min()),
                "avg_cost": float(finals[:, col].mean()),
                "avg_cost_std": float(finals[:, col].std()),
            }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "per_run.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_PER_RUN_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (_fmt(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
        (out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="ascii")
    return rows, summary, failed


def cmd_bench(args) -> int:
    settings = _merge_config(args)
    out = Path(args.out)
    problem = _bench_problem(args, settings)
    if args.save_problem:
        bench.save_problem(problem, out / "problem")
    seeds = _parse_seed_list(settings)
    rows, _, failed = _run_bench(problem, settings, seeds, out)
    print(f"bench: {len(rows)} runs completed, {len(failed)} failed"
          + (f" (failed seeds: {failed})" if failed else ""))
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    settings = _merge_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _bench_problem(args, settings)
    alphas = [float(v) for v in args.alphas.replace(",", " ").split()] \
        if args.alphas else [settings.get("alpha", multitask.MTConfig().alpha)]
    p_shares = [float(v) for v in args.p_shares.replace(",", " ").split()] \
        if args.p_shares else [None]
    ratios = [float(v) for v in args.sample_ratios.replace(",", " ").split()] \
        if args.sample_ratios else [settings.get("sample_ratio")]
    seeds = _parse_seed_list(settings)

    sweep_rows = []
    any_failed = False
    for alpha in alphas:
        for p_share in p_shares:
            for ratio in ratios:
                cell = dict(settings)
                cell["alpha"] = alpha
                if p_share is not None:
                    cell["p_intra"] = p_share
                    cell["p_inter"] = p_share
                if ratio is not None:
                    cell["sample_ratio"] = ratio
                name = (f"alpha{alpha:g}_p{p_share if p_share is not None else 'default'}"
                        f"_s{ratio if ratio is not None else 'full'}")
                rows, summary, failed = _run_bench(problem, cell, seeds, out / name)
                any_failed = any_failed or bool(failed) or not rows
                sweep_rows.append({
                    "alpha": alpha,
                    "p_share": p_share if p_share is not None else "",
                    "sample_ratio": ratio if ratio is not None else "",
                    "runs": len(rows),
                    "failed": len(failed),
                    "err_r_mean": summary.get("err_r_mean", ""),
                    "err_r_std": summary.get("err_r_std", ""),
                    "err_t_mean": summary.get("err_t_mean", ""),
                    "err_t_std": summary.get("err_t_std", ""),
                    "err_r_x1000_mean": summary.get("err_r_x1000_mean", ""),
                    "err_t_x1000_mean": summary.get("err_t_x1000_mean", ""),
                })
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(sweep_rows[0].keys()))
        writer.writeheader()
        for row in sweep_rows:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
    print(f"sweep: {len(sweep_rows)} cells written to {out / 'sweep.csv'}")
    return 1 if any_failed else 0


def _add_mt_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--generations", type=int, help="number of generations")
    parser.add_argument("--pop-size", dest="pop_size", type=int,
                        help="population size per task")
    parser.add_argument("--p-intra", dest="p_intra", type=float,
                        help="intra-pair sharing probability")
    parser.add_argument("--p-inter", dest="p_inter", type=float,
                        help="inter-task sharing probability")
    parser.add_argument("--top-ratio", dest="top_ratio", type=float,
                        help="archive ratio for knowledge sharing")
    parser.add_argument("--alpha", type=float, help="loop-closure weight")
    parser.add_argument("--scale-factor", dest="scale_factor", type=float,
                        help="differential evolution scale factor")
    parser.add_argument("--sample-ratio", dest="sample_ratio", type=float,
                        help="subsample clouds to this fraction before running")
    parser.add_argument("--epsilon", type=float,
                        help="inlier threshold override (default: adaptive)")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtpcr",
        description="Register three overlapping point clouds by co-evolutionary "
                    "multitask search.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_reg = sub.add_parser("register", help="register three PLY clouds")
    p_reg.add_argument("cloud1")
    p_reg.add_argument("cloud2")
    p_reg.add_argument("cloud3")
    _add_mt_flags(p_reg)
    p_reg.add_argument("--gt", help="ground-truth manifest for error metrics")
    p_reg.add_argument("--emit-aligned", action="store_true",
                       help="also write the three aligned clouds as PLY")
    p_reg.set_defaults(func=cmd_register)

    p_bench = sub.add_parser("bench", help="run a synthetic problem over seeds")
    _add_mt_flags(p_bench)
    p_bench.add_argument("--problem", help="load a serialized problem directory")
    p_bench.add_argument("--base", help="base cloud PLY for problem generation")
    p_bench.add_argument("--base-points", dest="base_points", type=int,
                         help="synthetic base cloud size (default 2000)")
    p_bench.add_argument("--overlaps", help="pairwise overlap targets, e.g. 0.8,0.6,0.6")
    p_bench.add_argument("--sigma", type=float, help="gaussian noise deviation")
    p_bench.add_argument("--problem-seed", dest="problem_seed", type=int,
                         help="seed for problem generation")
    p_bench.add_argument("--full-range", dest="full_range", action="store_const",
                         const=True, help="draw pose angles from the full [-pi, pi]")
    p_bench.add_argument("--seeds", help="comma-separated run seeds")
    p_bench.add_argument("--repeats", type=int, help="number of runs (seeds seed..seed+R-1)")
    p_bench.add_argument("--save-problem", action="store_true",
                         help="serialize the generated problem next to the results")
    p_bench.set_defaults(func=cmd_bench)

    p_sweep = sub.add_parser("sweep", help="grid of bench runs")
    _add_mt_flags(p_sweep)
    p_sweep.add_argument("--problem", help="load a serialized problem directory")
    p_sweep.add_argument("--base", help="base cloud PLY for problem generation")
    p_sweep.add_argument("--base-points", dest="base_points", type=int)
    p_sweep.add_argument("--overlaps", help="pairwise overlap targets")
    p_sweep.add_argument("--sigma", type=float)
    p_sweep.add_argument("--problem-seed", dest="problem_seed", type=int)
    p_sweep.add_argument("--full-range", dest="full_range", action="store_const", const=True)
    p_sweep.add_argument("--seeds", help="comma-separated run seeds")
    p_sweep.add_argument("--repeats", type=int)
    p_sweep.add_argument("--alphas", help="loop-weight grid, e.g. 0.5,0.2,0.1,0.05")
    p_sweep.add_argument("--p-shares", dest="p_shares",
                         help="sharing-probability grid (sets p-intra = p-inter)")
    p_sweep.add_argument("--sample-ratios", dest="sample_ratios",
                         help="sample-ratio grid")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            args._file_config = _read_config_file(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (OSError, ValueError, bench.OverlapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
