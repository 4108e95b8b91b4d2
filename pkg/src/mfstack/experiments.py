"""Verification campaigns (decay sweeps, perturbation margins) and the sticky-price application."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import IOFailure, MFStackError, ValidationError
from .filtersim import (SE_BATCHES, FollowerPerturbation, LeaderPerturbation, limiting_costs,
                        perturbation_cost, simulate_population, write_summary)
from .model import ModelSpec, TimeGrid, batch_standard_error, build_model
from .strategy import Equilibrium, solve_equilibrium

DEGENERATE_RTOL = 1e-12
STATISTICS = ("state_average", "leader_state", "follower_cost", "leader_cost")


# ---------------------------------------------------------------- decay sweep

@dataclass
class DecaySweepConfig:
    N_list: Sequence[int] = (8, 16, 32, 64, 128, 256)
    paths: int = 1000
    seed: int = 0
    statistics: Sequence[str] = STATISTICS
    threads: int = 1

    def __post_init__(self):
        self.N_list = tuple(int(n) for n in self.N_list)
        if len(self.N_list) < 3:
            raise ValidationError("decay sweep needs at least 3 population sizes")
        if any(b <= a for a, b in zip(self.N_list, self.N_list[1:])) or self.N_list[0] < 1:
            raise ValidationError(f"N_list must be positive and strictly increasing, got {self.N_list}")
        if self.paths < 2 * SE_BATCHES:
            raise ValidationError(f"decay sweep needs at least {2 * SE_BATCHES} paths")
        unknown = set(self.statistics) - set(STATISTICS)
        if unknown:
            raise ValidationError(f"unknown statistics {sorted(unknown)}")


@dataclass
class SlopeFit:
    slope: Optional[float]
    intercept: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    degenerate: bool = False
    note: str = ""


def loglog_slope(N, values, floor: float = 0.0, level: float = 0.95) -> SlopeFit:
    """OLS fit of log(values) on log(N) with a t-based confidence interval."""
    N = np.asarray(N, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(N) < 3 or not np.all(np.isfinite(y)):
        return SlopeFit(None, degenerate=True, note="fewer than 3 finite points")
    if np.any(y <= floor):
        return SlopeFit(None, degenerate=True, note="statistic at numerical zero")
    fit = stats.linregress(np.log(N), np.log(y))
    half = stats.t.ppf(0.5 + level / 2, len(N) - 2) * fit.stderr
    return SlopeFit(float(fit.slope), float(fit.intercept),
                    float(fit.slope - half), float(fit.slope + half))


@dataclass
class DecayReport:
    config: DecaySweepConfig
    points: list                      # one dict per N: N, then stat -> value, stat_se -> se
    slopes: dict                      # stat -> SlopeFit
    failures: list = field(default_factory=list)
    limit_costs: dict = field(default_factory=dict)

    def values(self, stat: str):
        ok = [p for p in self.points if stat in p]
        return np.array([p["N"] for p in ok]), np.array([p[stat] for p in ok]), \
            np.array([p[stat + "_se"] for p in ok])

    def monotone_violations(self, k_se: float = 3.0) -> list:
        """Pairs of consecutive N where a statistic grows by more than k_se standard errors."""
        out = []
        for s in self.config.statistics:
            N, v, se = self.values(s)
            for j in range(len(N) - 1):
                if v[j + 1] - v[j] > k_se * np.hypot(se[j], se[j + 1]):
                    out.append((s, int(N[j]), int(N[j + 1])))
        return out

    def to_dict(self) -> dict:
        return {"N_list": list(self.config.N_list), "paths": self.config.paths,
                "seed": self.config.seed, "points": self.points,
                "slopes": {k: asdict(v) for k, v in self.slopes.items()},
                "failures": self.failures, "limit_costs": self.limit_costs}

    def write_csv(self, filename):
        cols = ["N"]
        for s in self.config.statistics:
            cols += [s, s + "_se"]
        cols.append("follower_cost_rms")
        try:
            with open(filename, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for p in self.points:
                    w.writerow([repr(p.get(c, float("nan"))) if c != "N" else p["N"] for c in cols])
        except OSError as e:
            raise IOFailure(f"cannot write {filename}: {e}") from e


def _scale(x) -> float:
    return 1.0 + float(np.max(np.abs(x))) if np.size(x) else 1.0


def _paired_gap(a, b):
    d = a - b
    return abs(float(d.mean())), batch_standard_error(d, SE_BATCHES), float(np.sqrt((d ** 2).mean()))


def _sweep_point(eq: Equilibrium, N: int, cfg: DecaySweepConfig, lim) -> dict:
    res = simulate_population(eq, N, cfg.paths, cfg.seed)
    out = {"N": N}
    want = set(cfg.statistics)
    if "state_average" in want:
        out["state_average"] = res.gaps["avg_vs_discrete_mean"]
        out["state_average_se"] = res.gaps["avg_vs_discrete_mean_se"]
    if "leader_state" in want:
        sq = ((res.x0 - lim.x0) ** 2).sum(axis=-1)
        m = sq.mean(axis=0)
        k = int(np.argmax(m))
        out["leader_state"] = float(m[k])
        out["leader_state_se"] = batch_standard_error(sq[:, k], SE_BATCHES)
    if "follower_cost" in want:
        g, se, rms = _paired_gap(res.follower_samples, lim.follower_samples)
        out["follower_cost"], out["follower_cost_se"], out["follower_cost_rms"] = g, se, rms
    if "leader_cost" in want:
        g, se, _ = _paired_gap(res.leader_samples, lim.leader_samples)
        out["leader_cost"], out["leader_cost_se"] = g, se
    return out


def decay_sweep(eq: Equilibrium, config: DecaySweepConfig) -> DecayReport:
    """Population-size sweep with common random numbers against the limiting system.

    Every N reuses the same per-agent noise streams as the limit run, so the
    cost gaps are paired differences. A point that fails to simulate is kept
    as a failure record and the slopes are fitted on the remaining points.
    """
    lc, fc, lim = limiting_costs(eq, config.paths, config.seed)
    scale_x = _scale(lim.discrete_mean_xi) ** 2
    scale_x0 = _scale(lim.x0) ** 2
    floors = {"state_average": DEGENERATE_RTOL * scale_x, "leader_state": DEGENERATE_RTOL * scale_x0,
              "follower_cost": DEGENERATE_RTOL * (1 + abs(fc.value)),
              "leader_cost": DEGENERATE_RTOL * (1 + abs(lc.value))}

    def run(N):
        try:
            return _sweep_point(eq, N, config, lim)
        except MFStackError as e:
            return {"N": N, "error": e.category, "message": str(e)}

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as ex:
            rows = list(ex.map(run, config.N_list))
    else:
        rows = [run(N) for N in config.N_list]
    points = [r for r in rows if "error" not in r]
    failures = [r for r in rows if "error" in r]
    slopes = {}
    for s in config.statistics:
        N = [p["N"] for p in points]
        slopes[s] = loglog_slope(N, [p[s] for p in points], floors[s])
    return DecayReport(config, points, slopes, failures,
                       {"leader": lc.value, "leader_se": lc.se,
                        "follower": fc.value, "follower_se": fc.se})


# ---------------------------------------------------------------- perturbation margins

def _direction_rng(seed: int, d: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, d)))


def _cosine_series(rng, t, T, dim, modes=3):
    c = rng.standard_normal((modes, dim))
    basis = np.cos(np.pi * np.outer(t / T, np.arange(modes)))    # (len(t), modes)
    return basis @ c


def follower_direction(spec: ModelSpec, seed: int, d: int, eps: float, agent: int = 0):
    """Smooth open-loop term plus a constant feedback on the agent's own filter."""
    g, n, k = spec.grid, spec.n, spec.k
    rng = _direction_rng(seed, d)
    a = _cosine_series(rng, g.times, g.t_end, k)
    b = np.broadcast_to(0.5 * rng.standard_normal((k, n)), (g.steps + 1, k, n)).copy()
    return FollowerPerturbation(eps, a, b, agent)


def leader_direction(spec: ModelSpec, seed: int, d: int, eps: float):
    g, n, k = spec.grid, spec.n, spec.k
    rng = _direction_rng(seed, 10_000 + d)
    Kd = np.broadcast_to(0.5 * rng.standard_normal((k, n)), (g.steps + 1, k, n)).copy()
    m = _cosine_series(rng, g.half_times, g.t_end, k)
    return LeaderPerturbation(eps, Kd, m)


@dataclass
class NashReport:
    N: int
    paths: int
    seed: int
    eps: float
    follower_margins: np.ndarray
    follower_se: np.ndarray
    leader_margins: np.ndarray
    leader_se: np.ndarray
    baseline: dict

    @staticmethod
    def _worst(m, se):
        j = int(np.argmin(m))
        return float(m[j]), float(se[j]), j

    @property
    def worst_follower(self):
        return self._worst(self.follower_margins, self.follower_se)

    @property
    def worst_leader(self):
        return self._worst(self.leader_margins, self.leader_se)

    @property
    def epsilon(self) -> dict:
        """Observed ε_N: the largest cost improvement any direction achieved."""
        return {"follower": max(0.0, -self.worst_follower[0]), "leader": max(0.0, -self.worst_leader[0])}

    def to_dict(self) -> dict:
        wf, wl = self.worst_follower, self.worst_leader
        return {"N": self.N, "paths": self.paths, "seed": self.seed, "eps": self.eps,
                "follower_margins": self.follower_margins.tolist(),
                "follower_se": self.follower_se.tolist(),
                "leader_margins": self.leader_margins.tolist(), "leader_se": self.leader_se.tolist(),
                "worst_follower": {"margin": wf[0], "se": wf[1], "direction": wf[2]},
                "worst_leader": {"margin": wl[0], "se": wl[1], "direction": wl[2]},
                "epsilon": self.epsilon, "baseline": self.baseline}


def epsilon_nash_check(eq: Equilibrium, N: int, paths: int, seed: int, num_directions: int = 20,
                       eps: float = 0.1, direction_seed: Optional[int] = None,
                       threads: int = 1) -> NashReport:
    """Cost margins J(perturbed) − J(equilibrium) of follower 1 and of the leader.

    Each direction is simulated on the same noise as the equilibrium run, so a
    margin is a paired difference. Directions are drawn from ``direction_seed``
    (default: ``seed``), which keeps them identical across N.
    """
    if num_directions < 1:
        raise ValidationError("need at least one perturbation direction")
    dseed = seed if direction_seed is None else direction_seed
    base = simulate_population(eq, N, paths, seed, threads=threads)
    if base.follower_samples is None:
        raise ValidationError("margins need at least 2 paths")
    fm, fse, lm, lse = [], [], [], []
    for d in range(num_directions):
        _, fs = perturbation_cost(eq, N, paths, seed, follower_direction(eq.spec, dseed, d, eps), threads)
        diff = fs - base.follower_samples
        fm.append(diff.mean())
        fse.append(batch_standard_error(diff, SE_BATCHES))
        _, ls = perturbation_cost(eq, N, paths, seed, leader_direction(eq.spec, dseed, d, eps), threads)
        diff = ls - base.leader_samples
        lm.append(diff.mean())
        lse.append(batch_standard_error(diff, SE_BATCHES))
    baseline = {"follower": base.follower_cost.value, "follower_se": base.follower_cost.se,
                "leader": base.leader_cost.value, "leader_se": base.leader_cost.se}
    return NashReport(N, paths, seed, eps, np.array(fm), np.array(fse), np.array(lm), np.array(lse), baseline)


def calibrate_margin_constant(report: NashReport) -> dict:
    """c such that the worst margin at the calibration N equals −c/√N."""
    r = float(np.sqrt(report.N))
    return {"follower": r * max(0.0, -report.worst_follower[0]),
            "leader": r * max(0.0, -report.worst_leader[0])}


def margin_bound_violations(report: NashReport, c: dict, k_se: float = 3.0) -> list:
    """Directions whose margin falls below −(c/√N + k_se·SE)."""
    out = []
    r = np.sqrt(report.N)
    for who, m, se in (("follower", report.follower_margins, report.follower_se),
                       ("leader", report.leader_margins, report.leader_se)):
        for d in np.flatnonzero(m < -(c[who] / r + k_se * se)):
            out.append((who, int(d), float(m[d])))
    return out


# ---------------------------------------------------------------- sticky prices

@dataclass(frozen=True)
class StickyPriceParams:
    N: int = 300
    T: float = 5.0
    s0: float = 3.0
    lambda0: float = 0.5
    a: float = 20.0
    mu0: float = 0.5
    sigma0: float = 0.4
    sigmabar0: float = 0.4
    s: float = 3.0
    lam: float = 0.3
    mu: float = 0.3
    nu: float = 0.3
    sigma: float = 0.4
    sigmabar: float = 0.4
    m0: float = 0.8
    n0: float = 0.8
    delta0: float = 0.8
    m: float = 0.8
    n: float = 0.8
    delta: float = 0.8
    etabar: float = 11.0
    Q0: float = 3.0
    R0: float = 1.0
    w: float = 0.5
    Q: float = 5.0
    R: float = 1.0
    p_i0: float = 8.0
    p_00: float = 14.0

    def simplex_violations(self, tol: float = 1e-12) -> list:
        bad = []
        if abs(self.lambda0 + self.mu0 - 1) > tol:
            bad.append(f"lambda0 + mu0 must equal 1, got {self.lambda0 + self.mu0:.12g}")
        if abs(self.lam + self.mu + self.nu - 1) > tol:
            bad.append(f"lambda + mu + nu must equal 1, got {self.lam + self.mu + self.nu:.12g}")
        return bad

    def check(self, enforce_simplex: bool = True):
        bad = self.simplex_violations() if enforce_simplex else []
        for name in ("lambda0", "mu0", "lam", "mu", "nu", "s0", "s"):
            if getattr(self, name) <= 0:
                bad.append(f"{name} must be positive")
        if not 0 <= self.w <= 1:
            bad.append(f"w must lie in [0, 1], got {self.w}")
        if self.N < 1 or self.T <= 0:
            bad.append("need N >= 1 and T > 0")
        if bad:
            raise ValidationError(bad)

    @classmethod
    def from_dict(cls, d: dict) -> "StickyPriceParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown sticky-price parameters {sorted(unknown)}")
        return cls(**d)


def build_sticky_model(params: StickyPriceParams, steps: int = 500,
                       enforce_simplex: bool = True) -> ModelSpec:
    """Embed the sticky-price market in the general leader-follower model (n = k = 1).

    The default parameter set has lambda + mu + nu = 0.9; building it requires
    ``enforce_simplex=False``.
    """
    p = params
    p.check(enforce_simplex)
    grid = TimeGrid(p.T, steps)
    leader = dict(A0=-p.s0, B0=-p.s0 * p.lambda0, C0=p.s0 * p.mu0, b0=p.s0 * p.lambda0 * p.a,
                  sigma0=p.sigma0, sigmabar0=p.sigmabar0, xi0=p.p_00, H0=p.m0, h0=p.n0, f0=p.delta0)
    follower = dict(A=-p.s, B=-p.s * p.lam, C=p.s * p.mu, F=p.s * p.nu, b=p.s * p.lam * p.a,
                    sigma=p.sigma, sigmabar=p.sigmabar, xi=p.p_i0, H=p.m, h=p.n, f=p.delta)
    # -p q enters as 2<S p, q>, hence S = -1/2
    leader_cost = dict(Q0=p.Q0, R0=p.R0, S0=-0.5, eta0=p.etabar)
    follower_cost = dict(Q=p.Q, R=p.R, S=-0.5, Gamma2=p.w, Gamma3=1 - p.w)
    return build_model(grid, 1, 1, leader=leader, follower=follower,
                       leader_cost=leader_cost, follower_cost=follower_cost)


def sticky_params_from_model(spec: ModelSpec, N: int = 300) -> StickyPriceParams:
    """Inverse of :func:`build_sticky_model` on the dynamic coefficients and weights."""
    if spec.n != 1 or spec.k != 1:
        raise ValidationError("sticky-price models are scalar")
    l, f, lc, fc = spec.leader, spec.follower, spec.leader_cost, spec.follower_cost
    v = lambda path: float(path[0].ravel()[0])
    s0, s = -v(l.A0), -v(f.A)
    lambda0, lam = -v(l.B0) / s0, -v(f.B) / s
    a = v(l.b0) / (s0 * lambda0)
    a_f = v(f.b) / (s * lam)
    if not np.isclose(a, a_f, rtol=1e-12, atol=0):
        raise ValidationError(f"leader and follower demand levels differ ({a} vs {a_f})")
    return StickyPriceParams(
        N=N, T=spec.grid.t_end, s0=s0, lambda0=lambda0, a=a, mu0=v(l.C0) / s0,
        sigma0=v(l.sigma0), sigmabar0=v(l.sigmabar0), s=s, lam=lam, mu=v(f.C) / s, nu=v(f.F) / s,
        sigma=v(f.sigma), sigmabar=v(f.sigmabar), m0=v(l.H0), n0=v(l.h0), delta0=v(l.f0),
        m=v(f.H), n=v(f.h), delta=v(f.f), etabar=v(lc.eta0), Q0=v(lc.Q0), R0=v(lc.R0),
        w=v(fc.Gamma2), Q=v(fc.Q), R=v(fc.R), p_i0=float(f.xi[0]), p_00=float(l.xi0[0]))


def average_price_gap(eq: Equilibrium, N: int, paths: int, seed: int, threads: int = 1):
    """sup_t of the path-averaged |p^(N) − E p̄_i|, with a batch standard error when paths > 1."""
    res = simulate_population(eq, N, paths, seed, costs=False, threads=threads)
    dev = np.abs(res.x_avg - res.E_xi).sum(axis=-1)          # (P, K+1)
    m = dev.mean(axis=0)
    k = int(np.argmax(m))
    se = batch_standard_error(dev[:, k], min(SE_BATCHES, paths)) if paths >= 2 else float("nan")
    return float(m[k]), se


STICKY_FILES = ("follower_controls", "follower_prices", "price_average", "leader_control", "leader_price")


def _write_table(filename, header, columns):
    try:
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in zip(*columns):
                w.writerow([repr(float(x)) for x in row])
    except OSError as e:
        raise IOFailure(f"cannot write {filename}: {e}") from e


def sticky_demo(params: StickyPriceParams, paths: int = 1, seed: int = 0, out_dir: str = ".",
                steps: int = 500, gap_N: Sequence[int] = (300, 30), gap_paths: int = 20,
                threads: int = 1, enforce_simplex: bool = False) -> dict:
    """Full pipeline for the sticky-price market: figures, CSVs and a gap summary.

    Figures show path 0 of an N-follower run. The average-price gap is
    compared across ``gap_N`` on a shared seed family; pass ``gap_paths=0``
    to skip that comparison. Simplex violations are reported in the summary
    rather than raised unless ``enforce_simplex`` is set.
    """
    from . import plotting

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IOFailure(f"cannot create {out_dir}: {e}") from e
    spec = build_sticky_model(params, steps, enforce_simplex)
    eq = solve_equilibrium(spec)
    N = params.N
    res = simulate_population(eq, N, paths, seed, track=range(N), costs=paths >= 2, threads=threads)
    t = res.t
    q, p = res.u[0, :, :, 0].T, res.x[0, :, :, 0].T          # (N, K+1)
    tables = {
        "follower_controls": (["t"] + [f"q_{i + 1}" for i in range(N)], [t, *q]),
        "follower_prices": (["t"] + [f"p_{i + 1}" for i in range(N)], [t, *p]),
        "price_average": (["t", "p_avg", "E_p"], [t, res.x_avg[0, :, 0], res.E_xi[:, 0]]),
        "leader_control": (["t", "q0", "E_q0"], [t, res.u0[0, :, 0], res.Eu0[:, 0]]),
        "leader_price": (["t", "p0", "E_p0"], [t, res.x0[0, :, 0], res.E_x0[:, 0]]),
    }
    files = {}
    for name in STICKY_FILES:
        header, cols = tables[name]
        path = os.path.join(out_dir, name + ".csv")
        _write_table(path, header, cols)
        files[name + ".csv"] = path
    files.update(plotting.sticky_figures(res, out_dir))

    summary = {"N": N, "paths": paths, "seed": seed, "steps": steps, "params": asdict(params),
               "initial_prices": {"follower": float(p[:, 0].min()), "leader": float(res.x0[0, 0, 0])},
               "certificate": {"passed": bool(eq.certificate.passed),
                               "min_singular_value": eq.certificate.worst,
                               "worst_time": eq.certificate.worst_time},
               "warnings": params.simplex_violations(),
               "files": sorted(os.path.basename(v) for v in files.values())}
    if gap_paths:
        gaps = {}
        for n_ in gap_N:
            g, se = average_price_gap(eq, n_, gap_paths, seed, threads)
            gaps[str(n_)] = {"sup_gap": g, "se": se}
        summary["average_price_gap"] = gaps
        summary["gap_paths"] = gap_paths
    path = os.path.join(out_dir, "summary.json")
    write_summary(summary, path)
    files["summary.json"] = path
    return {"files": files, "summary": summary, "equilibrium": eq, "result": res}
