"""Command-line front end for the mean-field Stackelberg solver and simulator.

Every command reads an optional TOML config, applies flag overrides, runs
one pipeline and writes its files into ``--out-dir``. Failures print a JSON
object ``{"error": category, "message": ...}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import IOFailure, MFStackError, ValidationError
from .model import COND_LIMIT, PSD_RTOL, ModelSpec, TimeGrid, build_model

try:
    import tomllib
except ModuleNotFoundError:   # Python < 3.11
    import tomli as tomllib

EXIT_CODES = {"validation": 2, "non-solvable": 3, "blow-up": 4, "io": 5}
MODEL_SECTIONS = ("leader", "follower", "leader_cost", "follower_cost")
SECTIONS = {"n", "k", "grid", *MODEL_SECTIONS, "simulation", "sweep", "nash", "sticky", "tolerances"}
TOLERANCE_KEYS = {"psd_rtol", "cond_limit", "cert_threshold"}
COMMANDS = ("solve", "simulate", "decay-sweep", "nash-check", "sticky-demo")


# ---------------------------------------------------------------- config

def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as e:
        raise IOFailure(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"malformed config {path}: {e}") from None
    unknown = set(cfg) - SECTIONS
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    for name in SECTIONS - {"n", "k"}:
        if name in cfg and not isinstance(cfg[name], dict):
            raise ValidationError(f"config entry {name!r} must be a table")
    bad = set(cfg.get("tolerances", {})) - TOLERANCE_KEYS
    if bad:
        raise ValidationError(f"unknown tolerances {sorted(bad)}")
    return cfg


def spec_from_config(cfg: dict, steps: Optional[int] = None) -> ModelSpec:
    """Model from the grid and coefficient tables. Absent coefficients are zero."""
    grid_cfg = cfg.get("grid", {})
    bad = set(grid_cfg) - {"t_end", "steps"}
    if bad:
        raise ValidationError(f"unknown grid keys {sorted(bad)}")
    try:
        grid = TimeGrid(float(grid_cfg.get("t_end", 1.0)),
                        int(steps if steps is not None else grid_cfg.get("steps", 100)))
        n, k = int(cfg.get("n", 1)), int(cfg.get("k", 1))
    except (TypeError, ValueError) as e:
        raise ValidationError(f"bad grid or dimensions: {e}") from None
    parts = {s: cfg.get(s, {}) for s in MODEL_SECTIONS}
    try:
        return build_model(grid, n, k, **parts)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"bad model coefficients: {e}") from None


@dataclass
class RunConfig:
    command: str
    config: dict = field(default_factory=dict)
    config_path: Optional[str] = None
    steps: Optional[int] = None
    paths: Optional[int] = None
    n_agents: Optional[int] = None
    seed: int = 0
    out_dir: str = "."
    stride: int = 1
    threads: int = 1
    threshold_cert: Optional[float] = None

    def section(self, name) -> dict:
        return dict(self.config.get(name, {}))

    def tolerances(self) -> dict:
        t = self.section("tolerances")
        return {"psd_rtol": float(t.get("psd_rtol", PSD_RTOL)),
                "cond_limit": float(t.get("cond_limit", COND_LIMIT))}

    def threshold(self) -> float:
        from .solvers import CERT_THRESHOLD
        if self.threshold_cert is not None:
            return self.threshold_cert
        return float(self.section("tolerances").get("cert_threshold", CERT_THRESHOLD))

    def spec(self) -> ModelSpec:
        if self.config_path is None:
            raise ValidationError(f"{self.command} needs --config")
        return spec_from_config(self.config, self.steps)


# ---------------------------------------------------------------- commands

def _out(rc: RunConfig, name: str) -> str:
    return os.path.join(rc.out_dir, name)


def _json(obj, filename):
    from .filtersim import write_summary
    write_summary(obj, filename)


def _solve(rc: RunConfig):
    from .strategy import solve_equilibrium
    return solve_equilibrium(rc.spec(), rc.threshold(), **rc.tolerances())


def cmd_solve(rc: RunConfig) -> list:
    from .solvers import export_path_csv
    eq = _solve(rc)
    files = []
    for name, path in eq.bundle.paths().items():
        files.append(_out(rc, f"{name}.csv"))
        export_path_csv(path, files[-1], name)
    m = eq.means
    means = {"E_xi": m.E_xi, "E_x0": m.E_x0, "Eu0": m.Eu0}
    for name, path in means.items():
        files.append(_out(rc, f"{name}.csv"))
        export_path_csv(path, files[-1], name)
    cert = eq.certificate
    files.append(_out(rc, "certificate.json"))
    _json({"passed": bool(cert.passed), "threshold": cert.threshold,
           "min_singular_value": cert.worst, "worst_time": cert.worst_time,
           "sparsity_violations": [str(v) for v in eq.aug.sparsity_violations()],
           "steps": eq.spec.grid.steps, "t_end": eq.spec.grid.t_end}, files[-1])
    return files


def cmd_simulate(rc: RunConfig) -> list:
    from . import plotting
    from .filtersim import export_trajectories, simulate_population
    sim = rc.section("simulation")
    eq = _solve(rc)
    N = rc.n_agents or int(sim.get("N", 10))
    paths = rc.paths or int(sim.get("paths", 100))
    track = [int(i) for i in sim.get("track", [0])]
    res = simulate_population(eq, N, paths, rc.seed, track=track, threads=rc.threads)
    files = [_out(rc, "summary.json"), _out(rc, "trajectories.csv"), _out(rc, "trajectories.png")]
    summary = res.summary()
    summary["steps"] = eq.spec.grid.steps
    _json(summary, files[0])
    export_trajectories(res, files[1], stride=rc.stride, max_paths=sim.get("max_paths"))
    series = {"x0 (path 0)": res.x0[0, :, 0], "E x0": res.E_x0[:, 0],
              f"x_{track[0] + 1} (path 0)": res.x[0, :, 0, 0], "E x_i": res.E_xi[:, 0]}
    plotting.line_figure(files[2], res.t, series, "Leader and follower state, first component", "state")
    return files


def cmd_decay_sweep(rc: RunConfig) -> list:
    from . import plotting
    from .experiments import DecaySweepConfig, decay_sweep
    sw = rc.section("sweep")
    bad = set(sw) - {"N_list", "paths", "statistics"}
    if bad:
        raise ValidationError(f"unknown sweep keys {sorted(bad)}")
    cfg = DecaySweepConfig(N_list=sw.get("N_list", (8, 16, 32, 64, 128, 256)),
                           paths=rc.paths or int(sw.get("paths", 1000)), seed=rc.seed,
                           statistics=sw.get("statistics", DecaySweepConfig.statistics),
                           threads=rc.threads)
    report = decay_sweep(_solve(rc), cfg)
    files = [_out(rc, "decay_report.json"), _out(rc, "decay_table.csv"), _out(rc, "decay.png")]
    out = report.to_dict()
    out["monotone_violations"] = [list(v) for v in report.monotone_violations()]
    _json(out, files[0])
    report.write_csv(files[1])
    plotting.decay_figure(report, files[2])
    return files


def cmd_nash_check(rc: RunConfig) -> list:
    from . import plotting
    from .experiments import epsilon_nash_check
    nc = rc.section("nash")
    bad = set(nc) - {"N", "paths", "directions", "eps"}
    if bad:
        raise ValidationError(f"unknown nash keys {sorted(bad)}")
    report = epsilon_nash_check(_solve(rc), rc.n_agents or int(nc.get("N", 64)),
                                rc.paths or int(nc.get("paths", 500)), rc.seed,
                                int(nc.get("directions", 20)), float(nc.get("eps", 0.1)),
                                threads=rc.threads)
    files = [_out(rc, "nash_report.json"), _out(rc, "margins.csv"), _out(rc, "margins.png")]
    _json(report.to_dict(), files[0])
    try:
        with open(files[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["direction", "follower_margin", "follower_se", "leader_margin", "leader_se"])
            for d in range(len(report.follower_margins)):
                w.writerow([d] + [repr(float(a[d])) for a in (report.follower_margins, report.follower_se,
                                                                report.leader_margins, report.leader_se)])
    except OSError as e:
        raise IOFailure(f"cannot write {files[1]}: {e}") from None
    plotting.margins_figure(report, files[2])
    return files


def cmd_sticky_demo(rc: RunConfig) -> list:
    from .experiments import StickyPriceParams, sticky_demo
    st = rc.section("sticky")
    control = {k: st.pop(k) for k in ("gap_paths", "gap_N", "enforce_simplex", "steps") if k in st}
    if rc.n_agents:
        st["N"] = rc.n_agents
    params = StickyPriceParams.from_dict(st)
    out = sticky_demo(params, paths=rc.paths or 1, seed=rc.seed, out_dir=rc.out_dir,
                      steps=rc.steps or int(control.get("steps", 500)),
                      gap_N=tuple(control.get("gap_N", (params.N, max(1, params.N // 10)))),
                      gap_paths=int(control.get("gap_paths", 20)), threads=rc.threads,
                      enforce_simplex=bool(control.get("enforce_simplex", False)))
    return sorted(out["files"].values())


HANDLERS = {"solve": cmd_solve, "simulate": cmd_simulate, "decay-sweep": cmd_decay_sweep,
            "nash-check": cmd_nash_check, "sticky-demo": cmd_sticky_demo}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {v}")
    return v


def _positive_float(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file with [grid], model tables and optional run tables")
    common.add_argument("--steps", type=_positive_int, help="time steps on [0, T] (overrides [grid].steps)")
    common.add_argument("--paths", type=_positive_int, help="Monte Carlo paths")
    common.add_argument("--n-agents", type=_positive_int, help="number of followers N")
    common.add_argument("--seed", type=_nonneg_int, default=0, help="root seed of the noise streams (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for output files (created if missing)")
    common.add_argument("--stride", type=_positive_int, default=1, help="time thinning of trajectory CSVs")
    common.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                        help="worker threads (default: available cores)")
    common.add_argument("--threshold-cert", type=_positive_float,
                        help="solvability certificate threshold (overrides [tolerances].cert_threshold)")
    p = _Parser(prog="mfstack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"solve": "solve all Riccati layers; write CSVs and the solvability certificate",
             "simulate": "simulate the N-follower closed loop; write summary, trajectories and a figure",
             "decay-sweep": "sweep N against the limiting system; write the log-log regression report",
             "nash-check": "cost margins under random perturbations of follower 1 and of the leader",
             "sticky-demo": "sticky-price market: five figures, their CSVs and a summary"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return p


def parse_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    cfg = load_config(ns.config) if ns.config else {}
    return RunConfig(ns.command, cfg, ns.config, ns.steps, ns.paths, ns.n_agents, ns.seed,
                     ns.out_dir, ns.stride, ns.threads, ns.threshold_cert)


def run(argv=None) -> int:
    """Run one command; return the process exit status."""
    try:
        rc = parse_args(sys.argv[1:] if argv is None else argv)
        try:
            os.makedirs(rc.out_dir, exist_ok=True)
        except OSError as e:
            raise IOFailure(f"cannot create output directory {rc.out_dir}: {e}") from None
        if not os.access(rc.out_dir, os.W_OK):
            raise IOFailure(f"output directory {rc.out_dir} is not writable")
        files = HANDLERS[rc.command](rc)
    except MFStackError as e:
        json.dump({"error": e.category, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return EXIT_CODES.get(e.category, 1)
    for f in files:
        print(f)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
