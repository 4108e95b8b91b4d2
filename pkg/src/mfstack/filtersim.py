"""Finite-population Euler–Maruyama simulation with per-agent Kalman–Bucy filters."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import BlowUpError, IOFailure, ValidationError
from .model import (CoefficientPath, Ensemble, ModelSpec, batch_standard_error, follower_cost_samples,
                    leader_cost_samples)
from .rng import LEADER, OBSERVATION, STATE, RngStreams
from .strategy import Equilibrium, FollowerGains, ansatz_adjoint

CHUNK_BUDGET = 4_000_000  # floats of follower noise per source held at once
SE_BATCHES = 10


def _T(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, v):
    return np.einsum("...ab,...b->...a", M, v)


class CostEstimate(NamedTuple):
    value: float
    se: float


# ---------------------------------------------------------------- policies

@dataclass
class FollowerPerturbation:
    """v = u* + eps (a(t) + b(t) x̂) applied to one follower."""

    eps: float
    a: np.ndarray          # (K+1, k)
    b: np.ndarray          # (K+1, k, n)
    agent: int = 0


@dataclass
class LeaderPerturbation:
    """v0 = (K* + eps Kd(t)) (x̌0 − E x0) + E u0* + eps m(t).

    ``m_half`` holds the offset on the half-step grid so the followers'
    response can be recomputed with fourth-order accuracy.
    """

    eps: float
    Kd: np.ndarray         # (K+1, k, n)
    m_half: np.ndarray     # (2K+1, k)


@dataclass
class ClosedLoop:
    """Everything the simulator needs: gains, deterministic means and filter gains."""

    spec: ModelSpec
    fg: FollowerGains
    K_lead: np.ndarray      # (K+1, k, n)
    m_lead: np.ndarray      # (K+1, k)
    E_xi: np.ndarray        # (K+1, n)
    E_x0: np.ndarray        # (K+1, n)
    Kf: np.ndarray          # follower filter gain (K+1, n, n)
    K0f: np.ndarray         # leader filter gain (K+1, n, n)
    fpert: Optional[FollowerPerturbation] = None
    own_mean: Optional[np.ndarray] = None   # perturbed follower's own mean (K+1, n)


def filter_gains(spec: ModelSpec, Pi, Pi0):
    f, l = spec.follower, spec.leader
    Kf = f.sigmabar.values + Pi.values @ _T(f.H.values) @ _T(np.linalg.inv(f.f.values))
    K0f = l.sigmabar0.values + Pi0.values @ _T(l.H0.values) @ _T(np.linalg.inv(l.f0.values))
    return Kf, K0f


def closed_loop(eq: Equilibrium, follower: Optional[FollowerPerturbation] = None,
                leader: Optional[LeaderPerturbation] = None) -> ClosedLoop:
    """Assemble the closed-loop policy, optionally with one perturbed player."""
    spec = eq.spec
    Kf, K0f = filter_gains(spec, eq.bundle.Pi, eq.bundle.Pi0)
    K_lead = eq.leader_gains.K_state
    fg, means = eq.follower_gains, eq.means
    Eu0 = means.Eu0
    if leader is not None:
        e = leader.eps
        K_lead = K_lead + e * leader.Kd
        half = Eu0.half() + e * leader.m_half
        Eu0 = CoefficientPath(spec.grid, half[::2], half=half)
        fg, means = eq.respond(Eu0)
    cl = ClosedLoop(spec, fg, K_lead, Eu0.values, means.E_xi.values, means.E_x0.values, Kf, K0f)
    if follower is not None:
        cl.fpert = follower
        cl.own_mean = _perturbed_mean(cl, follower)
    return cl


def _perturbed_mean(cl: ClosedLoop, p: FollowerPerturbation) -> np.ndarray:
    """Mean of the deviating follower's state; its filter is unbiased so E x̂ matches it."""
    spec, fg = cl.spec, cl.fg
    f = spec.follower
    K, dt = spec.grid.steps, spec.grid.dt
    if p.eps == 0:
        return cl.E_xi
    mu = np.empty_like(cl.E_xi)
    mu[0] = f.xi
    for k in range(K):
        Ev = fg.control(k, mu[k], cl.E_xi[k], cl.E_x0[k]) + p.eps * (p.a[k] + p.b[k] @ mu[k])
        mu[k + 1] = mu[k] + dt * ((f.A[k] + f.Abar[k]) @ mu[k] + f.B[k] @ Ev
                                  + f.C[k] @ cl.E_xi[k] + f.F[k] @ cl.E_x0[k] + f.b[k])
    return mu


# ---------------------------------------------------------------- results

@dataclass
class SimulationResult:
    """Stored paths are indexed (path, time, ...); follower arrays add a tracked-agent axis."""

    t: np.ndarray
    N: int
    paths: int
    seed: int
    mode: str
    tracked: tuple
    x0: np.ndarray
    xc0: np.ndarray
    u0: np.ndarray
    Y0: np.ndarray
    x: np.ndarray
    xh: np.ndarray
    u: np.ndarray
    Y: np.ndarray
    x_avg: np.ndarray
    xh_avg: np.ndarray
    innov0: np.ndarray
    innov: np.ndarray
    E_xi: np.ndarray
    E_x0: np.ndarray
    Eu0: np.ndarray
    follower_cost: Optional[CostEstimate] = None
    leader_cost: Optional[CostEstimate] = None
    follower_samples: Optional[np.ndarray] = None
    leader_samples: Optional[np.ndarray] = None
    gaps: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    discrete_mean_xi: Optional[np.ndarray] = None
    discrete_mean_x0: Optional[np.ndarray] = None

    def ensemble(self) -> Ensemble:
        return Ensemble(self.x0, self.u0, self.x, self.u, self.x_avg)

    def summary(self) -> dict:
        out = {"N": self.N, "paths": self.paths, "seed": self.seed, "mode": self.mode,
               "flags": list(self.flags), "gaps": {k: float(v) for k, v in self.gaps.items()}}
        for name in ("follower_cost", "leader_cost"):
            c = getattr(self, name)
            out[name] = None if c is None else {"value": c.value, "se": c.se}
        return out


def _mean_sq_sup(diff: np.ndarray):
    """sup over t of E|diff|² with a batch standard error at the maximizing time."""
    sq = (diff ** 2).sum(axis=-1)          # (P, K+1)
    m = sq.mean(axis=0)
    kmax = int(np.argmax(m))
    return float(m[kmax]), batch_standard_error(sq[:, kmax], SE_BATCHES)


# ---------------------------------------------------------------- simulation

def _chunk_ranges(paths: int, N: int, steps: int, n: int):
    per = max(1, CHUNK_BUDGET // max(1, steps * N * n))
    return [(s, min(paths, s + per)) for s in range(0, paths, per)]


def _simulate_chunk(cl: ClosedLoop, N: int, p0: int, p1: int, rng: Optional[RngStreams], mode: str,
                    track: Sequence[int], frozen: Optional[np.ndarray] = None):
    """Euler–Maruyama over a path range. ``rng=None`` gives the noise-free run."""
    spec = cl.spec
    l, f = spec.leader, spec.follower
    K, dt, n = spec.grid.steps, spec.grid.dt, spec.n
    P = p1 - p0
    sq = np.sqrt(dt)

    def noise(source, agent):
        if rng is None:
            return np.zeros((K, P, n))
        return rng.normals(source, agent, p0, p1, K, n).transpose(1, 0, 2) * sq

    dW0, dWb0 = noise(STATE, LEADER), noise(OBSERVATION, LEADER)
    dW = np.empty((K, P, N, n))
    dWb = np.empty((K, P, N, n))
    for i in range(N):
        dW[:, :, i] = noise(STATE, i + 1)
        dWb[:, :, i] = noise(OBSERVATION, i + 1)

    Exi, Ex0 = cl.E_xi, cl.E_x0
    z = Exi if frozen is None else frozen
    own = np.broadcast_to(Exi[:, None, :], (K + 1, N, n)).copy()
    fp = cl.fpert
    if fp is not None:
        own[:, fp.agent] = cl.own_mean
    fg = cl.fg
    f0inv = np.linalg.inv(l.f0.values)
    finv = np.linalg.inv(f.f.values)

    x0 = np.broadcast_to(l.xi0, (P, n)).copy()
    xc0 = x0.copy()
    x = np.broadcast_to(f.xi, (P, N, n)).copy()
    xh = x.copy()
    Y0 = np.zeros((P, n))
    Y = np.zeros((P, N, n))
    M = len(track)
    kdim = spec.k
    out = {
        "x0": np.empty((P, K + 1, n)), "xc0": np.empty((P, K + 1, n)), "u0": np.empty((P, K + 1, kdim)),
        "Y0": np.empty((P, K + 1, n)), "x": np.empty((P, K + 1, M, n)), "xh": np.empty((P, K + 1, M, n)),
        "u": np.empty((P, K + 1, M, kdim)), "Y": np.empty((P, K + 1, M, n)),
        "x_avg": np.empty((P, K + 1, n)), "xh_avg": np.empty((P, K + 1, n)),
        "innov0": np.empty((P, K, n)), "innov": np.empty((P, K, M, n)),
    }
    track = list(track)

    def controls(k):
        u = -(xh @ _T(fg.K_hat[k])) + fg.offset(k, Exi[k], Ex0[k])
        if fp is not None and fp.eps != 0:
            u[:, fp.agent] += fp.eps * (fp.a[k] + xh[:, fp.agent] @ fp.b[k].T)
        u0 = (xc0 - Ex0[k]) @ _T(cl.K_lead[k]) + cl.m_lead[k]
        return u, u0

    def record(k, u, u0, xa):
        out["x0"][:, k], out["xc0"][:, k], out["u0"][:, k], out["Y0"][:, k] = x0, xc0, u0, Y0
        out["x"][:, k], out["xh"][:, k] = x[:, track], xh[:, track]
        out["u"][:, k], out["Y"][:, k] = u[:, track], Y[:, track]
        out["x_avg"][:, k], out["xh_avg"][:, k] = xa, xh.mean(axis=1)

    for k in range(K):
        xa = x.mean(axis=1) if mode == "centralized" else np.broadcast_to(z[k], (P, n))
        u, u0 = controls(k)
        record(k, u, u0, xa)
        # leader: true state, observation, innovation, filter
        d0 = (x0 @ l.A0[k].T + u0 @ l.B0[k].T + l.Abar0[k] @ Ex0[k] + xa @ l.C0[k].T + l.b0[k])
        dY0 = (x0 @ l.H0[k].T + l.Hbar0[k] @ Ex0[k] + xa @ l.I0[k].T + l.h0[k]) * dt + dWb0[k] @ l.f0[k].T
        inn0 = (dY0 - (xc0 @ l.H0[k].T + l.Hbar0[k] @ Ex0[k] + l.I0[k] @ Exi[k] + l.h0[k]) * dt) @ f0inv[k].T
        dc0 = (xc0 @ l.A0[k].T + u0 @ l.B0[k].T + l.Abar0[k] @ Ex0[k] + l.C0[k] @ Exi[k] + l.b0[k])
        x0 = x0 + d0 * dt + dW0[k] @ l.sigma0[k].T + dWb0[k] @ l.sigmabar0[k].T
        xc0 = xc0 + dc0 * dt + inn0 @ cl.K0f[k].T
        Y0 = Y0 + dY0
        # followers
        ow = own[k]
        dx = (x @ f.A[k].T + u @ f.B[k].T + ow @ f.Abar[k].T + (xa @ f.C[k].T)[:, None]
              + f.F[k] @ Ex0[k] + f.b[k])
        dY = ((x @ f.H[k].T + ow @ f.Hbar[k].T + (xa @ f.I[k].T)[:, None] + f.h[k]) * dt
              + dWb[k] @ f.f[k].T)
        inn = (dY - (xh @ f.H[k].T + ow @ f.Hbar[k].T + f.I[k] @ Exi[k] + f.h[k]) * dt) @ finv[k].T
        dxh = (xh @ f.A[k].T + u @ f.B[k].T + ow @ f.Abar[k].T + f.C[k] @ Exi[k]
               + f.F[k] @ Ex0[k] + f.b[k])
        x = x + dx * dt + dW[k] @ f.sigma[k].T + dWb[k] @ f.sigmabar[k].T
        xh = xh + dxh * dt + inn @ cl.Kf[k].T
        Y = Y + dY
        out["innov0"][:, k] = inn0
        out["innov"][:, k] = inn[:, track]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x0))):
            bad = np.argwhere(~np.isfinite(x).all(axis=2))
            where = f"path {p0 + bad[0][0]}, agent {bad[0][1] + 1}" if len(bad) else f"path {p0}, leader"
            raise BlowUpError(f"simulation ({where})", (k + 1) * dt)
    xa = x.mean(axis=1) if mode == "centralized" else np.broadcast_to(z[K], (P, n))
    u, u0 = controls(K)
    record(K, u, u0, xa)
    return out


def discrete_means(cl: ClosedLoop) -> dict:
    """Exact expectations of the Euler scheme, from one noise-free run.

    The closed loop is affine and the increments have mean zero, so every
    expectation of the discretized system equals the noise-free trajectory.
    These differ from the ODE means by O(dt).
    """
    base = replace(cl, fpert=None, own_mean=None)
    return _simulate_chunk(base, 1, 0, 1, None, "centralized", (0,))


def simulate_closed_loop(cl: ClosedLoop, N: int, paths: int, seed: int, mode: str = "centralized",
                         track: Sequence[int] = (0,), threads: int = 1,
                         costs: bool = True) -> SimulationResult:
    """Simulate ``paths`` independent realizations of the closed-loop population.

    ``mode="limit"`` replaces the empirical state average by its deterministic
    mean (the representative-agent limiting system), taken from the same Euler
    scheme so that both modes share their discretization. ``track`` lists the
    0-based follower indices whose full trajectories are kept.
    """
    if N < 1:
        raise ValidationError("need at least one follower")
    if paths < 1:
        raise ValidationError("need at least one path")
    if mode not in ("centralized", "limit"):
        raise ValidationError(f"unknown simulation mode {mode!r}")
    track = tuple(int(i) for i in track)
    if any(i < 0 or i >= N for i in track):
        raise ValidationError(f"tracked agents {track} out of range for N={N}")
    spec = cl.spec
    rng = RngStreams(seed)
    chunks = _chunk_ranges(paths, N, spec.grid.steps, spec.n)
    dm = discrete_means(cl)
    zbar = dm["x_avg"][0]
    run = lambda c: _simulate_chunk(cl, N, c[0], c[1], rng, mode, track, zbar)
    if threads > 1 and len(chunks) > 1:
        for src in (STATE, OBSERVATION):   # warm the key cache before sharing
            for a in range(N + 1):
                rng.key(src, a)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    arr = {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}
    res = SimulationResult(spec.grid.times, N, paths, seed, mode, track, E_xi=cl.E_xi, E_x0=cl.E_x0,
                           Eu0=cl.m_lead, **arr)
    res.discrete_mean_xi, res.discrete_mean_x0 = zbar, dm["x0"][0]
    if N == 1 and mode == "centralized":
        res.flags.append("N=1: outside the mean-field regime (state average is the single follower)")
    if costs and paths >= 2:
        fs = follower_cost_samples(spec, res.ensemble(), 0)
        ls = leader_cost_samples(spec, res.ensemble())
        res.follower_samples, res.leader_samples = fs, ls
        res.follower_cost = CostEstimate(float(fs.mean()), batch_standard_error(fs, SE_BATCHES))
        res.leader_cost = CostEstimate(float(ls.mean()), batch_standard_error(ls, SE_BATCHES))
        res.gaps["avg_vs_mean"], res.gaps["avg_vs_mean_se"] = _mean_sq_sup(res.x_avg - cl.E_xi)
        res.gaps["filtered_avg_vs_mean"], res.gaps["filtered_avg_vs_mean_se"] = \
            _mean_sq_sup(res.xh_avg - cl.E_xi)
        res.gaps["avg_vs_discrete_mean"], res.gaps["avg_vs_discrete_mean_se"] = \
            _mean_sq_sup(res.x_avg - zbar)
    return res


def simulate_population(eq: Equilibrium, N: int, paths: int, seed: int, **kw) -> SimulationResult:
    """Closed-loop simulation under the decentralized strategies."""
    return simulate_closed_loop(closed_loop(eq), N, paths, seed, **kw)


def limiting_costs(eq: Equilibrium, paths: int, seed: int, threads: int = 1):
    """Representative-agent costs with the population average replaced by its mean."""
    res = simulate_closed_loop(closed_loop(eq), 1, paths, seed, mode="limit", threads=threads)
    return res.leader_cost, res.follower_cost, res


def perturbation_cost(eq: Equilibrium, N: int, paths: int, seed: int,
                      perturbation, threads: int = 1) -> tuple:
    """Cost of the deviating player, returned with the per-path samples.

    Other agents keep their equilibrium strategies; a leader deviation is
    announced, so the followers re-optimize against it.
    """
    if isinstance(perturbation, FollowerPerturbation):
        cl = closed_loop(eq, follower=perturbation)
        res = simulate_closed_loop(cl, N, paths, seed, track=(perturbation.agent,), threads=threads)
        return res.follower_cost, res.follower_samples
    if isinstance(perturbation, LeaderPerturbation):
        cl = closed_loop(eq, leader=perturbation)
        res = simulate_closed_loop(cl, N, paths, seed, threads=threads)
        return res.leader_cost, res.leader_samples
    raise ValidationError("perturbation must be a FollowerPerturbation or LeaderPerturbation")


# ---------------------------------------------------------------- diagnostics

@dataclass
class FilterCheck:
    gap: float                  # sup-t |x̂_discrete − x̂|
    innovation_lag1: float      # max over components of lag-1 autocorrelation
    innovation_state_corr: float
    steps: int

    @property
    def white_noise_band(self) -> float:
        return 3.0 / np.sqrt(self.steps)


def discrete_kalman(spec: ModelSpec, u, dY, own_mean, E_xi, E_x0):
    """One-step predictor for the Euler-discretized follower state/observation pair."""
    f = spec.follower
    K, dt, n = spec.grid.steps, spec.grid.dt, spec.n
    I = np.eye(n)
    xh = np.empty((K + 1, n))
    xh[0] = f.xi
    Pm = np.zeros((n, n))
    for k in range(K):
        Fd = I + f.A[k] * dt
        Hd = f.H[k] * dt
        drift = (f.B[k] @ u[k] + f.Abar[k] @ own_mean[k] + f.C[k] @ E_xi[k] + f.F[k] @ E_x0[k] + f.b[k]) * dt
        d_obs = (f.Hbar[k] @ own_mean[k] + f.I[k] @ E_xi[k] + f.h[k]) * dt
        S = Hd @ Pm @ Hd.T + f.f[k] @ f.f[k].T * dt
        C = Fd @ Pm @ Hd.T + f.sigmabar[k] @ f.f[k].T * dt
        G = C @ np.linalg.inv(S)
        e = dY[k] - Hd @ xh[k] - d_obs
        xh[k + 1] = Fd @ xh[k] + drift + G @ e
        Pm = (Fd @ Pm @ Fd.T + (f.sigma[k] @ f.sigma[k].T + f.sigmabar[k] @ f.sigmabar[k].T) * dt
              - G @ S @ G.T)
        Pm = 0.5 * (Pm + Pm.T)
    return xh


def filter_consistency_check(spec: ModelSpec, result: SimulationResult, path: int = 0,
                             agent: int = 0) -> FilterCheck:
    """Compare a tracked follower's filter with an independent discrete Kalman filter."""
    if result.Y is None or agent >= len(result.tracked):
        raise ValidationError("observation path for this agent was not stored")
    dY = np.diff(result.Y[path, :, agent], axis=0)
    u = result.u[path, :, agent]
    xh = result.xh[path, :, agent]
    kal = discrete_kalman(spec, u, dY, result.E_xi, result.E_xi, result.E_x0)
    gap = float(np.abs(kal - xh).max())
    inn = result.innov[path, :, agent] / np.sqrt(spec.grid.dt)   # (K, n)
    lag1, corr = 0.0, 0.0
    for c in range(spec.n):
        z = inn[:, c]
        if np.std(z) == 0:
            continue
        lag1 = max(lag1, abs(float(np.corrcoef(z[:-1], z[1:])[0, 1])))
        s = xh[:-1, c]
        if np.std(s) > 0:
            corr = max(corr, abs(float(np.corrcoef(z, s)[0, 1])))
    return FilterCheck(gap, lag1, corr, spec.grid.steps)


def filtered_adjoint_path(eq: Equilibrium, result: SimulationResult, path: int = 0,
                          agent: int = 0) -> np.ndarray:
    """Forward Euler integration of the filtered adjoint driven by the stored innovations.

    Starts from the ansatz value at t=0; the mean of the adjoint follows its
    own deterministic equation.
    """
    spec, b = eq.spec, eq.bundle
    f, fc = spec.follower, spec.follower_cost
    K, dt, n = spec.grid.steps, spec.grid.dt, spec.n
    In = np.eye(n)
    Ri = np.linalg.inv(fc.R.values)
    S, B, Q = fc.S.values, f.B.values, fc.Q.values
    SRB = _T(S) @ Ri @ _T(B)
    SRS = _T(S) @ Ri @ S
    Gb2 = fc.Gammabar2.values
    GT2 = eq.derived.GammaT2
    GT3 = eq.derived.GammaT3
    a_p = _T(f.A.values) - SRB
    a_E = _T(f.Abar.values) + _T(Gb2) @ SRB
    c_x = Q - SRS
    c_E = GT2 + SRS @ Gb2 + _T(Gb2) @ SRS @ (In - Gb2) + (_T(Gb2) - In) @ Q @ fc.Gamma2.values
    c_0 = GT3 - Q @ fc.Gamma3.values
    c_c = _mv((_T(Gb2) - In) @ Q, fc.eta2.values)
    Kf, _ = filter_gains(spec, b.Pi, b.Pi0)
    qt = b.P1.values @ Kf
    Exi, Ex0 = result.E_xi, result.E_x0
    xh = result.xh[path, :, agent]
    dWt = result.innov[path, :, agent]
    start = ansatz_adjoint(b, eq.means, xh[:1])[0]
    Ep = np.empty((K + 1, n))
    ph = np.empty((K + 1, n))
    Ep[0] = ansatz_adjoint(b, eq.means, Exi[:1])[0]
    ph[0] = start
    for k in range(K):
        common = a_E[k] @ Ep[k] + c_E[k] @ Exi[k] + c_0[k] @ Ex0[k] + c_c[k]
        Ep[k + 1] = Ep[k] - dt * (a_p[k] @ Ep[k] + c_x[k] @ Exi[k] + common)
        ph[k + 1] = ph[k] - dt * (a_p[k] @ ph[k] + c_x[k] @ xh[k] + common) + qt[k] @ dWt[k]
    return ph


# ---------------------------------------------------------------- export

def export_trajectories(result: SimulationResult, filename, stride: int = 1, max_paths: Optional[int] = None):
    """CSV with one row per (time, path, agent); agent 0 is the leader."""
    n = result.x0.shape[-1]
    k = result.u0.shape[-1]
    P = result.paths if max_paths is None else min(result.paths, max_paths)
    head = (["t", "path", "agent"] + [f"x{i}" for i in range(n)] + [f"xhat{i}" for i in range(n)]
            + [f"u{i}" for i in range(k)] + [f"Y{i}" for i in range(n)])
    fmt = lambda a: [repr(float(v)) for v in a]
    try:
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for ti in range(0, len(result.t), max(1, stride)):
                t = repr(float(result.t[ti]))
                for p in range(P):
                    w.writerow([t, p, 0] + fmt(result.x0[p, ti]) + fmt(result.xc0[p, ti])
                               + fmt(result.u0[p, ti]) + fmt(result.Y0[p, ti]))
                    for m, a in enumerate(result.tracked):
                        w.writerow([t, p, a + 1] + fmt(result.x[p, ti, m]) + fmt(result.xh[p, ti, m])
                                   + fmt(result.u[p, ti, m]) + fmt(result.Y[p, ti, m]))
    except OSError as e:
        raise IOFailure(f"cannot write {filename}: {e}") from None


def write_summary(summary: dict, filename):
    try:
        with open(filename, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise IOFailure(f"cannot write {filename}: {e}") from None
