"""Command-line entry point: every engine behind one verb-based interface.

Verbs: lambda, hstar, solve-q, eta-scan, delta, simulate, verify.  Each
prints a JSON summary to stdout (floats at 17 significant digits so runs
diff cleanly) and optionally writes CSV artifacts.  Exit status: 0 on
success, 1 on computational failure (non-convergence), 2 on usage errors.

Settings can come from a JSON config file (--config); explicit flags win
over the file.  Where randomness is involved the seed defaults to a fixed
documented constant, never wall-clock entropy.  Thread counts resolve as
--threads flag, then the GFFTREE_THREADS environment variable, then the
machine's CPU count.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import fixedpoint, simulate, spectral, verify as verify_mod
from .grids import GridSpec
from .model import make_params
from .simulate import SimConfig
from .spectral import NonConvergenceError, SpectralConfig

DEFAULT_SEED = verify_mod.DEFAULT_SEED

__all__ = ["RunConfig", "parse_and_dispatch", "main", "to_json"]


@dataclass
class RunConfig:
    """Full set of run settings; omitted fields fall back to these defaults."""

    command: str = ""
    d: int = 3
    h: float = 0.0
    tol: float = 1e-6
    fp_tol: float = 1e-10
    n: int = 512
    cutoff_sigmas: float = 8.0
    points_per_panel: int = 8
    max_iter: int = 200_000
    dense: bool = False
    seed: int = DEFAULT_SEED
    n_samples: int = 10_000
    depth_cap: int = 40
    size_cap: int = 1_000_000
    a: float | None = None
    delta: float | None = None
    k: int = 20
    r: int = 3
    mode: str = "survival"
    forward_only: bool = False
    h_from: float = -1.0
    h_to: float = 1.0
    step: float = 0.1
    with_delta: bool = False
    suite: str = "fast"
    threads: int = 0
    out: str | None = None
    csv: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(
            n=self.n, cutoff_sigmas=self.cutoff_sigmas, points_per_panel=self.points_per_panel
        )

    @property
    def spectral_config(self) -> SpectralConfig:
        return SpectralConfig(grid=self.grid_spec, dense=self.dense)


# --- JSON with 17-significant-digit floats --------------------------------


def _to_jsonable(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_to_jsonable(v) for v in obj.tolist()]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _write_json(obj, parts: list[str], indent: int) -> None:
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        parts.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            parts.append(pad + "  " + json.dumps(k) + ": ")
            _write_json(v, parts, indent + 2)
            parts.append(",\n" if i < len(obj) - 1 else "\n")
        parts.append(pad + "}")
    elif isinstance(obj, list):
        if not obj:
            parts.append("[]")
            return
        parts.append("[\n")
        for i, v in enumerate(obj):
            parts.append(pad + "  ")
            _write_json(v, parts, indent + 2)
            parts.append(",\n" if i < len(obj) - 1 else "\n")
        parts.append(pad + "]")
    elif isinstance(obj, bool) or obj is None:
        parts.append(json.dumps(obj))
    elif isinstance(obj, float):
        parts.append("null" if math.isnan(obj) or math.isinf(obj) else format(obj, ".17g"))
    elif isinstance(obj, int):
        parts.append(str(obj))
    else:
        parts.append(json.dumps(obj))


def to_json(obj) -> str:
    """Serialize with floats at 17 significant digits (NaN/Inf become null)."""
    parts: list[str] = []
    _write_json(_to_jsonable(obj), parts, 0)
    return "".join(parts)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [format(v, ".17g") if isinstance(v, float) else ("" if v is None else v)
                 for v in row]
            )


# --- verbs -----------------------------------------------------------------


def _cmd_lambda(cfg: RunConfig) -> dict:
    params = make_params(cfg.d)
    sol = spectral.lambda_of_h(params, cfg.h, cfg.spectral_config)
    if cfg.csv:
        sol.chi.to_csv(cfg.csv)
    return {
        "d": cfg.d,
        "h": cfg.h,
        "lambda": sol.lam,
        "kappa": sol.kappa,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "n": cfg.n,
    }


def _cmd_hstar(cfg: RunConfig) -> dict:
    params = make_params(cfg.d)
    res = spectral.find_h_star(params, cfg.tol, cfg.spectral_config)
    return {
        "d": cfg.d,
        "h_star": res.h_star,
        "lambda_at_h_star": res.lambda_at_h_star,
        "bracket_width": res.bracket[1] - res.bracket[0],
        "bracket": list(res.bracket),
        "evaluations": res.evaluations,
        "tol": cfg.tol,
    }


def _cmd_solve_q(cfg: RunConfig) -> dict:
    params = make_params(cfg.d)
    lam = spectral.lambda_of_h(params, cfg.h, cfg.spectral_config).lam
    fp = fixedpoint.solve_q(
        params, cfg.h, tol=cfg.fp_tol, max_iter=cfg.max_iter,
        grid_spec=cfg.grid_spec, lam_hint=lam,
    )
    if cfg.csv:
        fp.q.to_csv(cfg.csv)
    return {
        "d": cfg.d,
        "h": cfg.h,
        "lambda": lam,
        "eta_plus": fp.eta_plus,
        "eta": fp.eta,
        "sup_q": float(fp.q.values.max()),
        "residual": fp.residual,
        "iterations": fp.iterations,
    }


def _cmd_eta_scan(cfg: RunConfig) -> dict:
    params = make_params(cfg.d)
    rows = verify_mod.scan_levels(
        params, cfg.h_from, cfg.h_to, cfg.step,
        grid_spec=cfg.grid_spec, with_delta=cfg.with_delta,
    )
    if cfg.out:
        _write_csv(
            cfg.out,
            ["h", "lambda", "eta_plus", "eta", "delta_h"],
            [[r["h"], r["lam"], r["eta_plus"], r["eta"], r.get("delta_h")] for r in rows],
        )
    return {
        "d": cfg.d,
        "h_from": cfg.h_from,
        "h_to": cfg.h_to,
        "step": cfg.step,
        "n_levels": len(rows),
        "levels": rows,
    }


def _cmd_delta(cfg: RunConfig) -> dict:
    params = make_params(cfg.d)
    delta, sol = fixedpoint.find_delta_h(params, cfg.h, grid_spec=cfg.grid_spec)
    if cfg.csv:
        sol.g.to_csv(cfg.csv)
    return {
        "d": cfg.d,
        "h": cfg.h,
        "delta": delta,
        "converged": sol.converged,
        "residual": sol.residual,
        "growth_cap": sol.growth_cap,
        "iterations": sol.iterations,
    }


def _sim_rows_to_payload(rows: list[tuple]) -> tuple[dict, list[list]]:
    payload = {}
    csv_rows = []
    for quantity, est in rows:
        payload[quantity] = {
            "estimate": est.estimate,
            "std_error": est.std_error,
            "n_effective": est.n_effective,
            "truncation_fraction": est.truncation_fraction,
        }
        csv_rows.append(
            [quantity, est.estimate, est.std_error, est.n_effective, est.truncation_fraction]
        )
    return payload, csv_rows


def _cmd_simulate(cfg: RunConfig) -> dict:
    params = make_params(cfg.d)
    sim = SimConfig(
        seed=cfg.seed, n_samples=cfg.n_samples, depth_cap=cfg.depth_cap,
        size_cap=cfg.size_cap, threads=max(1, cfg.threads),
    )
    rows: list[tuple[str, simulate.MCEstimate]] = []
    extra: dict = {}
    if cfg.mode == "survival":
        rows.append(("survival_forward", simulate.estimate_eta_mc(params, cfg.h, sim, True)))
        if not cfg.forward_only:
            rows.append(("survival_full", simulate.estimate_eta_mc(params, cfg.h, sim, False)))
    elif cfg.mode == "qmc":
        a = cfg.h + 1.0 if cfg.a is None else cfg.a
        extra["a"] = a
        rows.append(("extinction_by_depth", simulate.estimate_q_mc(params, cfg.h, a, sim)))
    elif cfg.mode == "martingale":
        sol = spectral.lambda_of_h(params, cfg.h, cfg.spectral_config)
        paths, truncated, extrap = simulate.martingale_ensemble(params, cfg.h, sol, sim)
        capped = truncated == "size"
        m0 = paths[:, 0]
        rows.append(
            ("mean_M0",
             simulate.MCEstimate(float(m0.mean()),
                                 float(m0.std(ddof=1) / np.sqrt(m0.size)),
                                 m0.size, float(capped.mean())))
        )
        for eps in (1e-4, 1e-3, 1e-2):
            positive = np.where(capped, True, paths[:, -1] > eps)
            p = float(positive.mean())
            se = float(np.sqrt(p * (1 - p) / positive.size))
            rows.append((f"freq_M{cfg.depth_cap}_gt_{eps:g}",
                         simulate.MCEstimate(p, se, positive.size, float(capped.mean()))))
        extra.update({"lambda": sol.lam, "chi_tail_extrapolations": extrap})
    elif cfg.mode == "growth":
        sol = spectral.lambda_of_h(params, cfg.h, cfg.spectral_config)
        rows.append(
            (f"growth_event_k{cfg.k}",
             simulate.growth_event_frequency(params, cfg.h, sol, cfg.k, sim))
        )
        extra["lambda"] = sol.lam
        extra["threshold"] = sol.lam ** cfg.k / cfg.k**2
    elif cfg.mode == "expmoment":
        if cfg.delta is None:
            delta, _ = fixedpoint.find_delta_h(params, cfg.h, grid_spec=cfg.grid_spec)
        else:
            delta = cfg.delta
        a = cfg.h + 0.5 if cfg.a is None else cfg.a
        extra.update({"delta": delta, "a": a})
        rows.append(("exp_moment", simulate.exp_moment_mc(params, cfg.h, delta, a, sim)))
    elif cfg.mode == "cov":
        rng = simulate.run_stream(cfg.seed, 0)
        for r in range(cfg.r + 1):
            cov, se = simulate.covariance_check(params, r, cfg.n_samples, rng)
            rows.append((f"covariance_r{r}",
                         simulate.MCEstimate(cov, se, cfg.n_samples, 0.0)))
    else:
        raise ValueError(f"unknown simulate mode {cfg.mode!r}")

    payload, csv_rows = _sim_rows_to_payload(rows)
    if cfg.out:
        _write_csv(
            cfg.out,
            ["quantity", "estimate", "std_error", "n_effective", "truncation_fraction"],
            csv_rows,
        )
    return {
        "d": cfg.d,
        "h": cfg.h,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "n_samples": cfg.n_samples,
        "depth_cap": cfg.depth_cap,
        "size_cap": cfg.size_cap,
        "results": payload,
        **extra,
    }


def _cmd_verify(cfg: RunConfig) -> dict:
    suite_cfg = verify_mod.SuiteConfig(
        d=cfg.d, seed=cfg.seed, suite=cfg.suite, threads=max(1, cfg.threads)
    )
    report = verify_mod.run_suite(make_params(cfg.d), suite_cfg)
    out = report.to_dict()
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(to_json(out))
            fh.write("\n")
        base, _ = os.path.splitext(cfg.out)
        _write_csv(
            base + "_levels.csv",
            ["h", "lambda", "kappa", "eta_plus_fp", "eta_fp",
             "eta_plus_mc", "eta_plus_mc_se", "delta_h", "g_residual"],
            [[r["h"], r["lam"], r["kappa"], r["eta_plus_fp"], r["eta_fp"],
              r["eta_plus_mc"], r["eta_plus_mc_se"], r["delta_h"], r["g_residual"]]
             for r in report.levels],
        )
    return {
        "d": cfg.d,
        "suite": cfg.suite,
        "seed": cfg.seed,
        "all_passed": report.all_passed,
        "h_star": report.h_star,
        "n_checks": len(report.checks),
        "checks": [
            {"name": c.name, "passed": c.passed, "statistic": c.statistic,
             "tolerance": c.tolerance, "tol_kind": c.tol_kind, "seconds": c.seconds}
            for c in report.checks
        ],
        "report_path": cfg.out,
    }


_DISPATCH = {
    "lambda": _cmd_lambda,
    "hstar": _cmd_hstar,
    "solve-q": _cmd_solve_q,
    "eta-scan": _cmd_eta_scan,
    "delta": _cmd_delta,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfftree",
        description="Level-set percolation of the Gaussian free field on the d-regular tree",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, h=False):
        p.add_argument("--d", type=int, required=True, help="tree degree (>= 3)")
        if h:
            p.add_argument("--h", type=float, required=True, help="level")
        p.add_argument("--config", type=str, help="JSON config file; flags win")
        p.add_argument("--n", type=int, help="grid node count", default=argparse.SUPPRESS)
        p.add_argument("--cutoff-sigmas", dest="cutoff_sigmas", type=float,
                       default=argparse.SUPPRESS)
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("lambda", help="leading eigenvalue and eigenfunction at a level")
    add_common(p, h=True)
    p.add_argument("--dense", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--csv", type=str, default=argparse.SUPPRESS,
                   help="write the eigenfunction values to CSV")

    p = sub.add_parser("hstar", help="critical level by bisection")
    add_common(p)
    p.add_argument("--tol", type=float, default=argparse.SUPPRESS,
                   help="tolerance on |lambda - 1|")

    p = sub.add_parser("solve-q", help="extinction fixed point and percolation probabilities")
    add_common(p, h=True)
    p.add_argument("--tol", dest="fp_tol", type=float, default=argparse.SUPPRESS)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=argparse.SUPPRESS)
    p.add_argument("--csv", type=str, default=argparse.SUPPRESS)

    p = sub.add_parser("eta-scan", help="per-level table of lambda/eta over a level range")
    add_common(p)
    p.add_argument("--from", dest="h_from", type=float, required=True)
    p.add_argument("--to", dest="h_to", type=float, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--with-delta", dest="with_delta", action="store_true",
                   default=argparse.SUPPRESS)
    p.add_argument("--out", type=str, default=argparse.SUPPRESS, help="CSV output path")

    p = sub.add_parser("delta", help="largest convergent exponential-moment tilt at a level")
    add_common(p, h=True)
    p.add_argument("--csv", type=str, default=argparse.SUPPRESS)

    p = sub.add_parser("simulate", help="Monte Carlo estimators")
    add_common(p, h=True)
    p.add_argument("--mode", required=True,
                   choices=["survival", "qmc", "martingale", "growth", "expmoment", "cov"])
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=argparse.SUPPRESS)
    p.add_argument("--depth-cap", dest="depth_cap", type=int, default=argparse.SUPPRESS)
    p.add_argument("--size-cap", dest="size_cap", type=int, default=argparse.SUPPRESS)
    p.add_argument("--a", type=float, default=argparse.SUPPRESS, help="conditioned root value")
    p.add_argument("--delta", type=float, default=argparse.SUPPRESS)
    p.add_argument("--k", type=int, default=argparse.SUPPRESS, help="generation for growth mode")
    p.add_argument("--r", type=int, default=argparse.SUPPRESS, help="max distance for cov mode")
    p.add_argument("--forward-only", dest="forward_only", action="store_true",
                   default=argparse.SUPPRESS)
    p.add_argument("--out", type=str, default=argparse.SUPPRESS, help="CSV output path")

    p = sub.add_parser("verify", help="cross-engine verification suite")
    add_common(p)
    p.add_argument("--suite", choices=["fast", "full"], default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", type=str, default=argparse.SUPPRESS, help="JSON report path")

    return parser


def parse_and_dispatch(argv: list[str], environ: dict | None = None) -> int:
    """Parse argv, run the verb, print the JSON summary; returns the exit status."""
    environ = dict(os.environ if environ is None else environ)
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    ns_dict = {k: v for k, v in vars(ns).items() if v is not None}
    config_path = ns_dict.pop("config", None)
    file_settings = {}
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_settings = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"gfftree: cannot read config file: {exc}", file=sys.stderr)
            return 2

    if "threads" not in ns_dict and "threads" not in file_settings:
        env_threads = environ.get("GFFTREE_THREADS")
        if env_threads is not None:
            file_settings["threads"] = int(env_threads)
        else:
            file_settings["threads"] = os.cpu_count() or 1

    merged = {**file_settings, **ns_dict}
    try:
        cfg = RunConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        print(f"gfftree: bad configuration: {exc}", file=sys.stderr)
        return 2

    try:
        payload = _DISPATCH[cfg.command](cfg)
        summary = {"command": cfg.command, "status": "ok", **payload}
        print(to_json(summary))
        return 0
    except NonConvergenceError as exc:
        print(to_json({"command": cfg.command, "status": "error",
                       "error": str(exc), "kind": "non_convergence"}))
        print(f"gfftree: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"gfftree: invalid request: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
