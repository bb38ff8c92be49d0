"""Command-line front end: ``datamhe {generate-data,estimate,reproduce-example,analyze}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from . import experiment as ex
from .estimator import EstimationError, SetupError
from .hankel import PreconditionError
from .lti import CapabilityError

log = logging.getLogger("datamhe")

EXIT_USAGE = 2


def _config(args) -> ex.ExperimentConfig:
    return ex.load_config(args.config) if args.config else ex.ExperimentConfig()


def _seeds(args, cfg: ex.ExperimentConfig) -> list[int]:
    first = args.seed if args.seed is not None else cfg.seeds[0]
    if args.seeds is not None:
        return list(range(first, first + args.seeds))
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")
    print(f"wrote {path}")


def constants_dict(c: analysis.RgesConstants) -> dict:
    return {
        "lambda": c.lam, "L": c.L, "rho": c.rho, "T_min": c.T_min, "rho_max": c.rho_max,
        "c_beta": c.euoss.c_beta, "lambda_beta": c.euoss.lambda_beta, "c_gamma_d": c.euoss.c_gamma_d,
        "c_gamma_e": c.c_gamma_e, "c3": c.c3, "c1": c.c1, "c2": c.c2,
        "lambda1": c.lambda1, "lambda2": c.lambda2,
        "horizon_ok": c.horizon_ok, "rho_ok": c.rho_ok, "certificate_valid": c.certificate_valid,
    }


def format_constants(c: analysis.RgesConstants) -> str:
    lines = [
        f"T_min = {c.T_min}   (L = {c.L}: {'ok' if c.horizon_ok else 'L < T_min'})",
        f"rho_max = {c.rho_max:.6g}   (rho = {c.rho:g}: {'ok' if c.rho_ok else 'rho > rho_max'})",
        f"c1 = {c.c1:.6g}, c2 = {c.c2:.6g}, lambda1 = lambda2 = {c.lambda1:.6g}",
        f"certificate: {'valid' if c.certificate_valid else 'NOT valid (empirical check only)'}",
    ]
    return "\n".join(lines)


def warn_uncertified(c: analysis.RgesConstants) -> None:
    if not c.rho_ok:
        log.warning("rho = %g exceeds rho_max = %.4g; the bound is not guaranteed", c.rho, c.rho_max)
    if not c.horizon_ok:
        log.warning("L = %d is below T_min = %d; the bound is not guaranteed", c.L, c.T_min)


def verdict(report: analysis.RgesReport) -> str:
    if not report.holds:
        return f"fails at t = {report.first_violation}"
    ratio = report.min_ratio
    if math.isinf(ratio):
        return "holds, infinite margin"
    return f"holds, min bound/error ratio {ratio:.4g}"


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    sys_ = cfg.lti_system()
    out = _out(args)
    for seed in _seeds(args, cfg):
        ds = ex.generate_dataset(sys_, cfg.N, cfg.L, seed, cfg.input_range)
        _write(out / f"dataset_seed{seed}.csv", ex.dataset_to_csv(ds))
        print(f"seed {seed}: N = {ds.N}, PE order {ds.pe_order_certified} certified (need {cfg.L + sys_.n})")
    return 0


def _run_summary(result: ex.RunResult) -> dict:
    m = result.metrics
    return {
        "seed": result.record.seed,
        "rmse": None if m is None else [float(v) for v in m.rmse],
        "max_error": None if m is None else m.max_error,
        "variance": None if m is None else [float(v) for v in m.variance],
        "kalman_rmse": None if result.kalman_rmse is None else [float(v) for v in result.kalman_rmse],
        "rges": verdict(result.report),
        "rges_holds": result.report.holds,
        "guaranteed": result.report.guaranteed,
        "qp_statuses": sorted({e.qp_status for e in result.record.estimates}),
    }


def cmd_estimate(args) -> int:
    cfg = _config(args)
    sys_ = cfg.lti_system()
    ds = ex.dataset_from_csv(Path(args.data).read_text(), sys_)
    warn_uncertified(ex.run_constants(cfg))
    out = _out(args)
    results = ex.sweep(cfg, _seeds(args, cfg), dataset=ds)
    for r in results:
        seed = r.record.seed
        _write(out / f"run_seed{seed}.csv", ex.run_to_csv(r))
        if args.svg:
            svg = out / f"run_seed{seed}.svg"
            ex.write_svg(r, svg, title=f"seed {seed}")
            print(f"wrote {svg}")
        print(f"seed {seed}: {verdict(r.report)}")
    summary = {"constants": constants_dict(results[0].constants), "runs": [_run_summary(r) for r in results]}
    _write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    print(format_constants(results[0].constants))
    return 0


def _table(summary: dict) -> str:
    rows = ["cell     sigma  R    mean RMSE  var(e_x1)  var(e_x2)  Kalman RMSE  RGES"]
    for key, cell in summary["cells"].items():
        s, v = key.split("_")
        rows.append(
            f"{s:<8} {ex.NOISE_LEVELS[v]:<6g} {ex.SETTINGS[s]['R']:<4g} {cell['mean_rmse']:<10.4f} "
            f"{cell['mean_var_x1']:<10.4f} {cell['mean_var_x2']:<10.4f} {cell['kalman_mean_rmse']:<12.4f} "
            f"{'holds' if cell['rges_holds'] else 'violated'}"
        )
    for v in ex.NOISE_LEVELS:
        frac = summary.get(f"frac_var_x2_b_gt_a_{v}")
        if frac is not None:
            rows.append(f"var(e_x2) larger under R = 100 I than R = 10 I at sigma = {ex.NOISE_LEVELS[v]:g}: "
                        f"{100 * frac:.0f}% of seeds")
    return "\n".join(rows)


def cmd_reproduce_example(args) -> int:
    start = time.perf_counter()
    base = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    seed = args.seed if args.seed is not None else 1
    k = args.seeds if args.seeds is not None else 20
    seeds = list(range(seed, seed + k))
    out = _out(args)
    grid = ex.grid_configs(base)

    results = {}
    for (s, v), cfg in grid.items():
        runs = ex.sweep(cfg, seeds)
        results[(s, v)] = runs
        shown = runs[0]
        _write(out / f"run_{s}_{v}.csv", ex.run_to_csv(shown))
        if args.svg:
            svg = out / f"fig_{s}_{v}.svg"
            ex.write_svg(shown, svg, title=f"setting ({s}), noise sigma = {ex.NOISE_LEVELS[v]:g}, seed {seed}")
            print(f"wrote {svg}")
    summary = ex.summarize(results)

    # the preset violates the sufficient conditions; rerun with a compliant (L, rho)
    preset_consts = ex.run_constants(grid[("a", "v1")])
    warn_uncertified(preset_consts)
    compliant = ex.compliant_variant(grid[("a", "v1")])
    ds = ex.generate_dataset(compliant.lti_system(), compliant.N, compliant.L, seed, compliant.input_range)
    comp_runs = ex.sweep(compliant, seeds, dataset=ds)
    _write(out / "run_compliant.csv", ex.run_to_csv(comp_runs[0]))
    summary["preset_constants"] = constants_dict(preset_consts)
    summary["compliant_variant"] = {
        "config": compliant.to_dict(),
        "constants": constants_dict(comp_runs[0].constants),
        "rges_holds_all": all(r.report.holds for r in comp_runs),
        "verdicts": [verdict(r.report) for r in comp_runs],
    }
    summary["seeds"] = seeds
    _write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    table = _table(summary)
    _write(out / "summary.txt", table + "\n")
    print(table)
    print("\npreset constants:")
    print(format_constants(preset_consts))
    print(f"\ncompliant variant (L = {compliant.L}, rho = {compliant.rho:.4g}, N = {compliant.N}):")
    print(f"RGES {'holds' if summary['compliant_variant']['rges_holds_all'] else 'VIOLATED'} "
          f"on all {len(comp_runs)} seeds")
    print(f"elapsed {time.perf_counter() - start:.2f} s")
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    consts = ex.run_constants(cfg)
    print(format_constants(consts))
    warn_uncertified(consts)
    e0 = float(np.linalg.norm(np.subtract(cfg.x0, cfg.x_hat_0)))
    status = 0
    for path in args.runs:
        run = ex.run_from_csv(Path(path).read_text())
        rep = analysis.verify_errors(run.e_norm, np.linalg.norm(run.noise, axis=1), e0, consts)
        print(f"{path}: {verdict(rep)}")
        if not rep.holds:
            status = 1
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="datamhe", description="Data-based moving horizon estimation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config (default: the paper-example preset)")
        sp.add_argument("--seed", type=int, help="base seed")
        sp.add_argument("--seeds", type=int, help="number of consecutive seeds from the base seed")
        if out:
            sp.add_argument("--out", default="out", help="output directory")
            sp.add_argument("--svg", action="store_true", help="also write SVG plots")

    g = sub.add_parser("generate-data", help="simulate a noise-free offline dataset")
    common(g)
    g.set_defaults(func=cmd_generate_data)

    e = sub.add_parser("estimate", help="run the estimator on a dataset")
    common(e)
    e.add_argument("--data", required=True, help="dataset CSV from generate-data")
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("reproduce-example", help="run the 2x2 example grid with seed statistics")
    common(r)
    r.set_defaults(func=cmd_reproduce_example)

    a = sub.add_parser("analyze", help="stability constants and bound verification of run files")
    common(a, out=False)
    a.add_argument("runs", nargs="*", help="run CSV files")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    for name in ("seed", "seeds"):
        val = getattr(args, name, None)
        if val is not None and val < (1 if name == "seeds" else 0):
            print(f"error: --{name} must be {'positive' if name == 'seeds' else 'nonnegative'}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (ex.ConfigError, ex.IngestionError, ex.GenerationError, SetupError, PreconditionError,
            CapabilityError, EstimationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
