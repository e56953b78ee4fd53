"""Benchmark harness: factor, solve and report, writing CSV rows and a JSON report.

Run as ``python -m rskel <command> [options]`` (or the ``rskel-bench``
script). Commands:

factorize  factor once per ``--eps`` value and solve one right-hand side
solve      use the factorization as a preconditioner for CG (Laplace) or GMRES (Helmholtz)
sweep      ``factorize`` over a comma-separated list of tolerances
ranks      per-level average skeleton sizes
comm       parallel schedule with per-worker message and word counters

CSV rows are appended to ``results.csv`` in the output directory
(``--output``, else ``$RSKEL_OUTPUT_DIR``, else ``./bench_out``); the JSON
report goes to ``<command>.json`` next to it.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .driver import factorize, rank_report
from .geometry import build_tree, make_grid
from .kernels import KernelSpec, gaussian_bump, plane_wave
from .parallel import PartitionError, compatible_order, parallel_factorize, partition_domain
from .solve import BreakdownError, apply_inverse, dense_matvec, gmres, pcg, relres

CSV_HEADER = ["kernel", "n_side", "N", "eps", "p", "t_fact", "t_solve", "relres", "n_it", "msgs_total", "words_total"]
COMMANDS = ("factorize", "solve", "sweep", "ranks", "comm")
OUTPUT_ENV = "RSKEL_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "factorize"
    kernel: str = "laplace"
    n_side: int = 64
    eps: list[float] = field(default_factory=lambda: [1e-6])
    p: int = 1
    leaf_target: int = 64
    n_proxy: int | None = None
    kappa: float = 25.0
    rhs: str = "random"
    seed: int = 0
    output: str | None = None
    tol: float = 1e-12
    threads: int = 1
    order: int | None = None  # sequential runs: box order of the given worker count's schedule

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        if self.kernel not in ("laplace", "helmholtz"):
            raise ConfigError("--kernel must be laplace or helmholtz")
        if self.n_side < 2 or self.n_side & (self.n_side - 1):
            raise ConfigError("--n-side must be a power of 2 and at least 2")
        if not self.eps or any(not 0 < e < 1 for e in self.eps):
            raise ConfigError("every --eps value must lie in (0, 1)")
        if self.kernel == "helmholtz" and not self.kappa > 0:
            raise ConfigError("--kappa must be positive for helmholtz")
        if self.rhs not in ("random", "planewave"):
            raise ConfigError("--rhs must be random or planewave")
        if self.rhs == "planewave" and self.kernel != "helmholtz":
            raise ConfigError("--rhs planewave needs --kernel helmholtz")
        if self.leaf_target < 1:
            raise ConfigError("--leaf-target must be positive")
        if self.n_proxy is not None and self.n_proxy < 4:
            raise ConfigError("--n-proxy must be at least 4")
        if self.command == "comm" and self.p < 4:
            raise ConfigError("comm needs --p of at least 4")
        tree = build_tree(make_grid(self.n_side), self.leaf_target)
        try:
            partition_domain(tree, self.p)
        except PartitionError as exc:
            raise ConfigError(str(exc)) from None
        if self.order is not None:
            try:
                partition_domain(tree, self.order)
            except PartitionError as exc:
                raise ConfigError(f"--order: {exc}") from None

    def output_dir(self) -> Path:
        return Path(self.output or os.environ.get(OUTPUT_ENV) or "bench_out")


def make_problem(cfg: RunConfig):
    points = make_grid(cfg.n_side)
    h = 1.0 / cfg.n_side
    if cfg.kernel == "laplace":
        spec = KernelSpec.laplace(h, n_proxy=cfg.n_proxy)
    else:
        spec = KernelSpec.helmholtz(h, cfg.kappa, n_proxy=cfg.n_proxy)
    return points, spec


def make_rhs(cfg: RunConfig, points, spec):
    if cfg.rhs == "planewave":
        # scattered-field source for an incoming wave travelling in +x
        return -cfg.kappa ** 2 * np.sqrt(gaussian_bump(points)) * plane_wave(points, cfg.kappa)
    return np.random.default_rng(cfg.seed).random(len(points))


def _factor(cfg, points, spec, eps):
    if cfg.p == 1 and cfg.command != "comm":
        order = compatible_order(cfg.order) if cfg.order else None
        return factorize(points, spec, eps, cfg.leaf_target, order=order)
    return parallel_factorize(points, spec, eps, cfg.leaf_target, cfg.p, threads=cfg.threads)


def _one(cfg: RunConfig, points, spec, b, eps) -> tuple[dict, dict]:
    f = _factor(cfg, points, spec, eps)

    def matvec(v):
        return dense_matvec(spec, points, v)

    t0 = time.perf_counter()
    n_it = 0
    if cfg.command == "solve":
        if cfg.kernel == "laplace":
            try:
                x, n_it = pcg(matvec, f.solve, b, tol=cfg.tol)
            except BreakdownError:
                x, n_it = gmres(matvec, f.solve, b, tol=cfg.tol)
        else:
            x, n_it = gmres(matvec, f.solve, b, tol=cfg.tol)
    else:
        x = apply_inverse(f, b)
    t_solve = time.perf_counter() - t0
    rr = relres(matvec, x, b)
    counters = f.stats.get("comm", {})
    row = {
        "kernel": cfg.kernel,
        "n_side": cfg.n_side,
        "N": len(points),
        "eps": eps,
        "p": cfg.p,
        "t_fact": f.stats["t_fact"],
        "t_solve": t_solve,
        "relres": rr,
        "n_it": n_it,
        "msgs_total": sum(c["messages"] for c in counters.values()),
        "words_total": sum(c["words"] for c in counters.values()),
    }
    detail = {
        "t_comp": f.stats["t_comp"],
        "t_other": f.stats.get("t_other", f.stats["t_fact"] - f.stats["t_comp"]),
        "ranks": {str(lv): r for lv, r in rank_report(f).items()},
        "peak_store_entries": f.stats["peak_store_entries"],
        "top_size": f.stats["top_size"],
    }
    if counters:
        detail["counters"] = {str(w): c for w, c in counters.items()}
    return row, detail


def run(cfg: RunConfig) -> dict:
    """Execute ``cfg`` and return the report; CSV and JSON are written to disk."""
    cfg.validate()
    points, spec = make_problem(cfg)
    b = make_rhs(cfg, points, spec)
    rows, details = [], []
    for eps in cfg.eps:
        row, detail = _one(cfg, points, spec, b, eps)
        rows.append(row)
        details.append(detail)
    report = {"config": asdict(cfg), "runs": [dict(r, **d) for r, d in zip(rows, details)]}
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv", rows)
    (out / f"{cfg.command}.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def write_csv(path: Path, rows: list[dict]):
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_HEADER})


def _eps_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tolerance list {text!r}") from None


def _order(text: str):
    if text == "rowmajor":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--order takes 'rowmajor' or a worker count") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rskel-bench", description="Factor and solve 2D kernel systems.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--kernel", choices=["laplace", "helmholtz"], default="laplace")
        sp.add_argument("--n-side", type=int, default=64, help="points per side (power of 2)")
        sp.add_argument("--eps", type=_eps_list, default=[1e-6], help="tolerance, or comma-separated list")
        sp.add_argument("--p", type=int, default=4 if name == "comm" else 1, help="worker count (power of 4)")
        sp.add_argument("--leaf-target", type=int, default=64)
        sp.add_argument("--n-proxy", type=int, default=None)
        sp.add_argument("--kappa", type=float, default=25.0)
        sp.add_argument("--rhs", choices=["random", "planewave"], default="random")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--tol", type=float, default=1e-12, help="Krylov tolerance for 'solve'")
        sp.add_argument("--order", type=_order, default=None,
                        help="with --p 1: 'rowmajor' (default) or a worker count whose schedule order to follow")
        sp.add_argument("--threads", type=int, default=1, help="threads used to run workers")
        sp.add_argument("--output", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./bench_out)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(
        command=args.command, kernel=args.kernel, n_side=args.n_side, eps=args.eps, p=args.p,
        leaf_target=args.leaf_target, n_proxy=args.n_proxy, kappa=args.kappa, rhs=args.rhs,
        seed=args.seed, output=args.output, tol=args.tol, threads=args.threads, order=args.order,
    )
    try:
        report = run(cfg)
    except ConfigError as exc:
        print(f"rskel-bench: error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(f"rskel-bench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for r in report["runs"]:
        line = "  ".join(f"{k}={r[k]:.3e}" if isinstance(r[k], float) else f"{k}={r[k]}"
                         for k in ("N", "eps", "p", "t_fact", "t_solve", "relres", "n_it"))
        print(line)
    print(f"wrote {cfg.output_dir() / 'results.csv'} and {cfg.output_dir() / (cfg.command + '.json')}")
    return 0
