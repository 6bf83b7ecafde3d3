"""Command-line front end: ``slowhomog <experiment> --config FILE [--out DIR] [--threads N]``.

Exit status is 0 on success, 2 when the configuration is invalid and 3 when
a solve fails.  Every run writes its CSV files and a ``manifest.json`` into
the output directory; each file is written to a temporary name first and
then renamed into place.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy

from . import __version__, acceptance, config, dns, effective, msint
from .cellsolve import CellProblemSpec, Mode, export_solution, solve_cell
from .geometry import CellGeometry
from .macro import MacroProblem, RhoMode, solve_homogenized
from .mesh import build_cell_mesh

EXPERIMENTS = ("cell", "eff-table", "msint", "macro", "dns-converge", "paper-suite")
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class Outputs:
    """Atomic writer for the files of one run."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    @contextmanager
    def path(self, name: str):
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
        os.close(fd)
        try:
            yield tmp
            os.replace(tmp, self.dir / name)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        self.files.append(name)

    def rows(self, name, header, rows):
        with self.path(name) as tmp, open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    def digest(self, name) -> str:
        return hashlib.sha256((self.dir / name).read_bytes()).hexdigest()


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _executor(threads):
    return ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None


def _table(section, threads, rho=True):
    ex = _executor(threads)
    try:
        return effective.build_effective_table(
            section["a_values"],
            eps_e=section["eps_e"],
            mode=section["mode"],
            rho=section["rho"] if rho else None,
            eps_i=config.as_float(section["eps_i"]),
            target_h=section["target_h"],
            executor=ex,
        )
    finally:
        if ex:
            ex.shutdown()


# -- experiments --------------------------------------------------------------


def run_cell(cfg, out: Outputs, threads=None, log=print):
    c = cfg["cell"]
    mesh = build_cell_mesh(CellGeometry(c["a"]), c["target_h"])
    eps_i = config.as_float(c["eps_i"])
    eps_rows, xi_rows = [], []
    for name in c["modes"]:
        mode = Mode(name)
        spec = CellProblemSpec(mesh, mode, c["eps_e"], math.inf if mode.is_limit else eps_i, rho=c["rho"] if mode.is_xi else None)
        sol = solve_cell(spec)
        if mode.is_xi:
            F, G = effective.xi_flux_volume(sol), effective.xi_flux_boundary(sol)
            xi_rows.append([mode.value, *map(_fmt, F), *map(_fmt, G)])
        else:
            for coeffs in (effective.epsilon_volume(sol), effective.epsilon_boundary(sol)):
                eps_rows.append([mode.value, coeffs.formula.value, *map(_fmt, coeffs.eps_eff.ravel())])
                log(f"{mode.value:22s} {coeffs.formula.value:8s} eps_eff = {np.array2string(coeffs.eps_eff, precision=6)}")
        if c["export_mesh"]:
            with out.path(f"cell_{mode.value.lower()}.txt") as tmp:
                export_solution(sol, tmp)
    if eps_rows:
        out.rows("cell_eps.csv", ["mode", "formula", "eps11", "eps12", "eps21", "eps22"], eps_rows)
    if xi_rows:
        out.rows("cell_xi.csv", ["mode", "F1", "F2", "G1", "G2"], xi_rows)


def run_eff_table(cfg, out: Outputs, threads=None, log=print):
    table = _table(cfg["effective"], threads)
    with out.path("eff_table.csv") as tmp:
        table.to_csv(tmp)
    log(f"tabulated {len(table.a_values)} radii on [{table.a_range[0]:g}, {table.a_range[1]:g}]")


def run_msint(cfg, out: Outputs, threads=None, log=print):
    m = cfg["msint"]
    flux = msint.FluxField(m["Q1"], m["Q2"])
    common = dict(n_quad=m["n_quad"], n_boundary=m["n_boundary"], exponent=m["exponent"])
    closed = msint.order_study(flux, m["a_of_x"], m["x_hat"], m["delta_values"], **common)
    arc = msint.order_study(flux, m["a_of_x"], m["x_hat"], m["delta_values"], arc=tuple(m["arc"]), **common)
    for name, rep in (("msint_closed.csv", closed), ("msint_arc.csv", arc)):
        with out.path(name) as tmp:
            rep.to_csv(tmp)
        log(f"{name}: slope correct={rep.fitted_slopes['correct']:.3f} naive={rep.fitted_slopes['naive']:.3f}")


def run_macro(cfg, out: Outputs, threads=None, log=print):
    m = cfg["macro"]
    flux_mode = RhoMode(m["rho_mode"]) is RhoMode.FLUX_DIVERGENCE
    table = _table(cfg["effective"], threads, rho=flux_mode)
    sol = solve_homogenized(MacroProblem(m["a_of_x"], table, m["rho"], m["boundary_value"], m["rho_mode"], m["grid_n"]))
    with out.path("macro_solution.csv") as tmp:
        sol.to_csv(tmp)
    with out.path("macro_coefficients.csv") as tmp:
        sol.coefficients_to_csv(tmp)
    with out.path("eff_table.csv") as tmp:
        table.to_csv(tmp)
    log(f"macro solve: {sol.iterations} CG iterations, max |phi0| = {np.abs(sol.phi).max():.6g}")


def run_dns(cfg, out: Outputs, threads=None, log=print):
    report = dns.convergence_study(cfg["dns"]["deltas"], acceptance.study_config(cfg))
    with out.path("dns_convergence.csv") as tmp:
        report.to_csv(tmp)
    log("errors " + ", ".join(f"{e:.4e}" for e in report.errors) + f"; fitted slope {report.slope:.3f}")


def run_suite(cfg, out: Outputs, threads=None, log=print):
    results = acceptance.run_all(cfg, log=log)
    with out.path("acceptance.csv") as tmp:
        acceptance.write_csv(results, tmp)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} criteria failed: " + ", ".join(str(r.number) for r in failed), file=sys.stderr)
    return results


RUNNERS = {
    "cell": run_cell,
    "eff-table": run_eff_table,
    "msint": run_msint,
    "macro": run_macro,
    "dns-converge": run_dns,
    "paper-suite": run_suite,
}


def _versions() -> dict:
    import sklearn

    return {
        "slowhomog": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


def run(experiment: str, cfg: dict, out_dir, threads=None, log=print) -> int:
    """Validate ``cfg`` and run ``experiment``; returns the exit status."""
    problems = config.validate(cfg)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_INVALID
    out = Outputs(out_dir)
    t0 = time.perf_counter()
    status = EXIT_OK
    error = None
    try:
        RUNNERS[experiment](cfg, out, threads=threads, log=log)
    except Exception as exc:  # any failure past validation is numerical
        status, error = EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}"
        print(f"numerical failure in {experiment}: {error}", file=sys.stderr)
    manifest = {
        "experiment": experiment,
        "config_sha256": config.config_hash(cfg),
        "config": cfg,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "threads": threads or 1,
        "exit_status": status,
        "error": error,
        "outputs": {name: out.digest(name) for name in out.files},
    }
    with out.path("manifest.json") as tmp, open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slowhomog", description="Periodic homogenisation experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON file merged onto the packaged defaults")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for independent cell solves")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    cfg, problems = config.load(args.config)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_INVALID
    return run(args.experiment, cfg, args.out, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
