"""Model data types, validation and centralized cost functionals.

Vectors are stored as 1-d arrays, matrices as 2-d arrays. Time-dependent
coefficients are :class:`CoefficientPath` objects sampled on a uniform grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

PSD_RTOL = 1e-10
COND_LIMIT = 1e12


@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    steps: int
    t0: float = 0.0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValidationError(f"grid needs at least 2 steps, got {self.steps}")
        if not (np.isfinite(self.t_end) and self.t_end > self.t0):
            raise ValidationError(f"grid horizon must be positive, got {self.t_end}")
        if self.t0 != 0.0:
            raise ValidationError("grid must start at t0=0")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def half_times(self) -> np.ndarray:
        return self.t0 + 0.5 * self.dt * np.arange(2 * self.steps + 1)

    def half_index(self, t: float) -> int:
        """Index of ``t`` on the half-step grid (spacing dt/2)."""
        j = int(round(2.0 * (t - self.t0) / self.dt))
        return min(max(j, 0), 2 * self.steps)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_end, self.steps * factor, self.t0)


class CoefficientPath:
    """A matrix- or vector-valued function sampled on a grid.

    Between grid points the path is piecewise linear. When derivative samples
    are attached (solver outputs) evaluation uses cubic Hermite interpolation,
    which keeps chained RK4 integrations fourth order.
    """

    def __init__(self, grid: TimeGrid, values, derivs=None, half=None):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.steps + 1:
            raise ValidationError(
                f"path has {values.shape[0]} samples, grid needs {grid.steps + 1}")
        self.grid = grid
        self.values = values
        self.derivs = None if derivs is None else np.asarray(derivs, dtype=float)
        self._half = None if half is None else np.asarray(half, dtype=float)
        self.values.setflags(write=False)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "CoefficientPath":
        value = np.asarray(value, dtype=float)
        vals = np.broadcast_to(value, (grid.steps + 1,) + value.shape).copy()
        return cls(grid, vals, derivs=np.zeros_like(vals))

    @property
    def shape(self):
        return self.values.shape[1:]

    def __getitem__(self, k):
        return self.values[k]

    def half(self) -> np.ndarray:
        """Samples on the half-step grid t = j*dt/2, j = 0..2K."""
        if self._half is None:
            v = self.values
            out = np.empty((2 * len(v) - 1,) + v.shape[1:])
            out[0::2] = v
            mid = 0.5 * (v[:-1] + v[1:])
            if self.derivs is not None:
                mid = mid + (self.grid.dt / 8.0) * (self.derivs[:-1] - self.derivs[1:])
            out[1::2] = mid
            self._half = out
            self._half.setflags(write=False)
        return self._half

    def __call__(self, t: float) -> np.ndarray:
        g = self.grid
        s = (t - g.t0) / g.dt
        k = int(np.clip(np.floor(s), 0, g.steps - 1))
        th = s - k
        v0, v1 = self.values[k], self.values[k + 1]
        if self.derivs is None:
            return (1 - th) * v0 + th * v1
        d0, d1 = self.derivs[k] * g.dt, self.derivs[k + 1] * g.dt
        h00 = 2 * th**3 - 3 * th**2 + 1
        h10 = th**3 - 2 * th**2 + th
        h01 = -2 * th**3 + 3 * th**2
        h11 = th**3 - th**2
        return h00 * v0 + h10 * d0 + h01 * v1 + h11 * d1

    def __repr__(self):
        return f"CoefficientPath(shape={self.shape}, steps={self.grid.steps})"


def as_path(grid: TimeGrid, value, shape) -> CoefficientPath:
    """Coerce a constant, a per-grid-point table or a path to a CoefficientPath."""
    if isinstance(value, CoefficientPath):
        path = value
    else:
        arr = np.asarray(value, dtype=float)
        K1 = grid.steps + 1
        if arr.ndim >= 1 and arr.shape[0] == K1 and arr.size == K1 * int(np.prod(shape)) \
                and (arr.ndim == len(shape) + 1 or int(np.prod(shape)) == 1):
            path = CoefficientPath(grid, arr.reshape((K1,) + tuple(shape)))
        else:
            if arr.size == 1 and int(np.prod(shape)) == 1:
                arr = arr.reshape(shape)
            path = CoefficientPath.constant(grid, arr)
    if path.shape != tuple(shape):
        raise ValidationError(f"expected shape {tuple(shape)}, got {path.shape}")
    if not np.all(np.isfinite(path.values)):
        raise ValidationError("coefficient path has non-finite entries")
    return path


# field name -> (kind, shape code) ; kind 'p' = path, 'c' = constant
_LEADER_DYN = {
    "A0": "nn", "Abar0": "nn", "C0": "nn", "B0": "nk", "b0": "n",
    "sigma0": "nn", "sigmabar0": "nn", "H0": "nn", "Hbar0": "nn", "I0": "nn",
    "h0": "n", "f0": "nn",
}
_FOLLOWER_DYN = {
    "A": "nn", "Abar": "nn", "C": "nn", "F": "nn", "B": "nk", "b": "n",
    "sigma": "nn", "sigmabar": "nn", "H": "nn", "Hbar": "nn", "I": "nn",
    "h": "n", "f": "nn",
}
_LEADER_COST = {
    "Q0": "nn", "R0": "kk", "S0": "kn", "Gamma0": "nn", "Gammabar0": "nn",
    "eta0": "n",
}
_LEADER_TERMINAL = {"G0": "nn", "Gamma1": "nn", "Gammabar1": "nn", "eta1": "n"}
_FOLLOWER_COST = {
    "Q": "nn", "R": "kk", "S": "kn", "Gamma2": "nn", "Gammabar2": "nn",
    "Gamma3": "nn", "Gammabar3": "nn", "eta2": "n",
}
_FOLLOWER_TERMINAL = {
    "G": "nn", "Gamma4": "nn", "Gammabar4": "nn", "Gamma5": "nn",
    "Gammabar5": "nn", "eta4": "n",
}
_IDENTITY_DEFAULTS = {"f0", "f", "R0", "R"}


def _shape(code, n, k):
    return tuple({"n": n, "k": k}[c] for c in code)


@dataclass(frozen=True)
class LeaderDynamics:
    A0: CoefficientPath
    Abar0: CoefficientPath
    C0: CoefficientPath
    B0: CoefficientPath
    b0: CoefficientPath
    sigma0: CoefficientPath
    sigmabar0: CoefficientPath
    xi0: np.ndarray
    H0: CoefficientPath
    Hbar0: CoefficientPath
    I0: CoefficientPath
    h0: CoefficientPath
    f0: CoefficientPath


@dataclass(frozen=True)
class FollowerDynamics:
    A: CoefficientPath
    Abar: CoefficientPath
    C: CoefficientPath
    F: CoefficientPath
    B: CoefficientPath
    b: CoefficientPath
    sigma: CoefficientPath
    sigmabar: CoefficientPath
    xi: np.ndarray
    H: CoefficientPath
    Hbar: CoefficientPath
    I: CoefficientPath
    h: CoefficientPath
    f: CoefficientPath


@dataclass(frozen=True)
class LeaderCost:
    Q0: CoefficientPath
    R0: CoefficientPath
    S0: CoefficientPath
    Gamma0: CoefficientPath
    Gammabar0: CoefficientPath
    eta0: CoefficientPath
    G0: np.ndarray
    Gamma1: np.ndarray
    Gammabar1: np.ndarray
    eta1: np.ndarray


@dataclass(frozen=True)
class FollowerCost:
    Q: CoefficientPath
    R: CoefficientPath
    S: CoefficientPath
    Gamma2: CoefficientPath
    Gammabar2: CoefficientPath
    Gamma3: CoefficientPath
    Gammabar3: CoefficientPath
    eta2: CoefficientPath
    G: np.ndarray
    Gamma4: np.ndarray
    Gammabar4: np.ndarray
    Gamma5: np.ndarray
    Gammabar5: np.ndarray
    eta4: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    grid: TimeGrid
    n: int
    k: int
    leader: LeaderDynamics
    follower: FollowerDynamics
    leader_cost: LeaderCost
    follower_cost: FollowerCost

    def with_grid(self, grid: TimeGrid) -> "ModelSpec":
        """Resample every coefficient onto a new grid (linear interpolation)."""
        def conv(obj):
            out = {}
            for f_ in fields(obj):
                v = getattr(obj, f_.name)
                if isinstance(v, CoefficientPath):
                    lin = CoefficientPath(v.grid, v.values)
                    v = CoefficientPath(grid, np.stack([lin(t) for t in grid.times]))
                out[f_.name] = v
            return replace(obj, **out)
        return replace(self, grid=grid, leader=conv(self.leader),
                       follower=conv(self.follower),
                       leader_cost=conv(self.leader_cost),
                       follower_cost=conv(self.follower_cost))


def build_model(grid: TimeGrid, n: int, k: int, leader=None, follower=None,
                leader_cost=None, follower_cost=None) -> ModelSpec:
    """Assemble a ModelSpec from plain dictionaries.

    Missing coefficients default to zero, except ``f``, ``f0``, ``R`` and
    ``R0`` which default to the identity. Each value may be a scalar (1x1
    shapes only), a constant array, a table with one entry per grid point, or
    a :class:`CoefficientPath`. Unknown keys raise :class:`ValidationError`.
    """
    leader, follower = dict(leader or {}), dict(follower or {})
    leader_cost, follower_cost = dict(leader_cost or {}), dict(follower_cost or {})

    def default(name, shape):
        if name in _IDENTITY_DEFAULTS:
            return np.eye(shape[0])
        return np.zeros(shape)

    def paths(src, table, section):
        out = {}
        for name, code in table.items():
            shape = _shape(code, n, k)
            val = src.pop(name, None)
            try:
                out[name] = as_path(grid, default(name, shape) if val is None else val, shape)
            except ValidationError as e:
                raise ValidationError(f"{section}.{name}: {e}") from None
        return out

    def consts(src, table, section):
        out = {}
        for name, code in table.items():
            shape = _shape(code, n, k)
            val = src.pop(name, None)
            arr = np.asarray(default(name, shape) if val is None else val, dtype=float)
            if arr.size == 1 and int(np.prod(shape)) == 1:
                arr = arr.reshape(shape)
            if arr.shape != shape:
                raise ValidationError(f"{section}.{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{section}.{name}: non-finite entries")
            arr.setflags(write=False)
            out[name] = arr
        return out

    ld = paths(leader, _LEADER_DYN, "leader")
    ld.update(consts(leader, {"xi0": "n"}, "leader"))
    fd = paths(follower, _FOLLOWER_DYN, "follower")
    fd.update(consts(follower, {"xi": "n"}, "follower"))
    lc = paths(leader_cost, _LEADER_COST, "leader_cost")
    lc.update(consts(leader_cost, _LEADER_TERMINAL, "leader_cost"))
    fc = paths(follower_cost, _FOLLOWER_COST, "follower_cost")
    fc.update(consts(follower_cost, _FOLLOWER_TERMINAL, "follower_cost"))
    for section, rest in (("leader", leader), ("follower", follower),
                          ("leader_cost", leader_cost), ("follower_cost", follower_cost)):
        if rest:
            raise ValidationError(f"{section}: unknown keys {sorted(rest)}")
    return ModelSpec(grid, int(n), int(k), LeaderDynamics(**ld), FollowerDynamics(**fd),
                     LeaderCost(**lc), FollowerCost(**fc))


def scale_costs(spec: ModelSpec, leader: float = 1.0, follower: float = 1.0) -> ModelSpec:
    """Multiply every weight matrix of each cost functional by a positive factor."""
    def sc(path, lam):
        return CoefficientPath(path.grid, path.values * lam)
    lc, fc = spec.leader_cost, spec.follower_cost
    lc = replace(lc, Q0=sc(lc.Q0, leader), R0=sc(lc.R0, leader), S0=sc(lc.S0, leader),
                 G0=lc.G0 * leader)
    fc = replace(fc, Q=sc(fc.Q, follower), R=sc(fc.R, follower), S=sc(fc.S, follower),
                 G=fc.G * follower)
    return replace(spec, leader_cost=lc, follower_cost=fc)


# ---------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def raise_if_invalid(self):
        if self.violations:
            raise ValidationError(self.violations)


def _check_dims(spec: ModelSpec):
    n, k = spec.n, spec.k
    tables = ((spec.leader, {**_LEADER_DYN, "xi0": "n"}),
              (spec.follower, {**_FOLLOWER_DYN, "xi": "n"}),
              (spec.leader_cost, {**_LEADER_COST, **_LEADER_TERMINAL}),
              (spec.follower_cost, {**_FOLLOWER_COST, **_FOLLOWER_TERMINAL}))
    for obj, table in tables:
        for name, code in table.items():
            v = getattr(obj, name)
            shape = v.shape if isinstance(v, CoefficientPath) else np.shape(v)
            if tuple(shape) != _shape(code, n, k):
                raise ValidationError(
                    f"dimension mismatch: {name} has shape {tuple(shape)}, expected {_shape(code, n, k)}")
            if isinstance(v, CoefficientPath) and v.grid.steps != spec.grid.steps:
                raise ValidationError(f"dimension mismatch: {name} sampled on a different grid")


def _min_sym_eig(M):
    S = 0.5 * (M + np.swapaxes(M, -1, -2))
    return np.linalg.eigvalsh(S)[..., 0]


def _tol(M, rtol=PSD_RTOL):
    return rtol * (1.0 + np.linalg.norm(M, ord=2, axis=(-2, -1)))


def validate_model(spec: ModelSpec, cond_limit: float = COND_LIMIT,
                   psd_rtol: float = PSD_RTOL) -> ValidationReport:
    """Check the standing assumptions on the weights and observation noise.

    Returns every violation found, each with the first offending grid time.
    Dimension problems raise :class:`ValidationError` instead.
    """
    _check_dims(spec)
    t = spec.grid.times
    out = []

    def first(mask):
        return float(t[int(np.argmax(mask))])

    def psd(name, M):
        lam = _min_sym_eig(M)
        bad = lam < -_tol(M, psd_rtol)
        if np.any(bad):
            out.append(f"{name} not PSD at t={first(bad):.6g} (min eigenvalue {lam[bad][0]:.6g})")

    def pd(name, M):
        lam = _min_sym_eig(M)
        bad = lam <= _tol(M, psd_rtol)
        if np.any(bad):
            out.append(f"{name} not positive definite at t={first(bad):.6g} "
                       f"(min eigenvalue {lam[bad][0]:.6g})")
            return False
        return True

    def sym(name, M):
        asym = np.abs(M - np.swapaxes(M, -1, -2)).max(axis=(-2, -1))
        bad = asym > _tol(M, psd_rtol)
        if np.any(bad):
            out.append(f"{name} not symmetric at t={first(bad):.6g}")

    def invertible(name, M):
        c = np.linalg.cond(M)
        bad = ~np.isfinite(c) | (c > cond_limit)
        if np.any(bad):
            out.append(f"{name} not invertible at t={first(bad):.6g} (condition number {c[bad][0]:.6g})")

    for label, Q, R, S, G in (
            ("", spec.follower_cost.Q.values, spec.follower_cost.R.values,
             spec.follower_cost.S.values, spec.follower_cost.G),
            ("0", spec.leader_cost.Q0.values, spec.leader_cost.R0.values,
             spec.leader_cost.S0.values, spec.leader_cost.G0)):
        for nm, M in ((f"Q{label}", Q), (f"R{label}", R)):
            sym(nm, M)
        psd(f"Q{label}", Q)
        if pd(f"R{label}", R):
            St = np.swapaxes(S, -1, -2)
            psd(f"Q{label} − S{label}ᵀR{label}⁻¹S{label}", Q - St @ np.linalg.solve(R, S))
        sym(f"G{label}", G[None])
        psd(f"G{label}", G[None])
    invertible("f", spec.follower.f.values)
    invertible("f0", spec.leader.f0.values)
    return ValidationReport(out)


# ------------------------------------------------------ derived coefficients

@dataclass(frozen=True)
class DerivedCoefficients:
    """Tilde weight combinations; path-valued ones are (K+1, n, n) arrays."""

    GammaT2: np.ndarray
    GammaT3: np.ndarray
    GammaT4: np.ndarray
    GammaT5: np.ndarray
    GammaT0: np.ndarray
    GammaT1: np.ndarray


def _T(M):
    return np.swapaxes(M, -1, -2)


def tilde_sym(Gb, W):
    """Γ̄ᵀWΓ̄ − WΓ̄ − Γ̄ᵀW."""
    return _T(Gb) @ W @ Gb - W @ Gb - _T(Gb) @ W


def tilde_cross(Gb, W, Gm, Gmb):
    """Γ̄ᵀW(Γ + Γ') − WΓ'."""
    return _T(Gb) @ W @ (Gm + Gmb) - W @ Gmb


def derive_coefficients(spec: ModelSpec) -> DerivedCoefficients:
    _check_dims(spec)
    fc, lc = spec.follower_cost, spec.leader_cost
    Q, Q0 = fc.Q.values, lc.Q0.values
    return DerivedCoefficients(
        GammaT2=tilde_sym(fc.Gammabar2.values, Q),
        GammaT3=tilde_cross(fc.Gammabar2.values, Q, fc.Gamma3.values, fc.Gammabar3.values),
        GammaT4=tilde_sym(fc.Gammabar4, fc.G),
        GammaT5=tilde_cross(fc.Gammabar4, fc.G, fc.Gamma5, fc.Gammabar5),
        GammaT0=tilde_sym(lc.Gammabar0.values, Q0),
        GammaT1=tilde_sym(lc.Gammabar1, lc.G0),
    )


# ------------------------------------------------------------------ costs

@dataclass
class Ensemble:
    """Monte Carlo paths of the finite population.

    Arrays are indexed (path, time, ...). ``x`` and ``u`` hold the tracked
    followers along axis 2. ``x_avg`` is the full-population state average;
    when omitted it is taken as the mean of ``x`` over the agent axis, which
    is only right if every follower is tracked.
    """

    x0: np.ndarray
    u0: np.ndarray
    x: np.ndarray
    u: np.ndarray
    x_avg: Optional[np.ndarray] = None

    @property
    def paths(self) -> int:
        return self.x0.shape[0]

    def state_average(self) -> np.ndarray:
        return self.x_avg if self.x_avg is not None else self.x.mean(axis=2)


def _check_ensemble(spec: ModelSpec, ens: Ensemble):
    if ens.paths < 2:
        raise ValidationError("cost estimate needs at least 2 Monte Carlo paths")
    K1 = spec.grid.steps + 1
    for name in ("x0", "u0", "x", "u"):
        if getattr(ens, name).shape[1] != K1:
            raise ValidationError(f"grid mismatch: {name} has {getattr(ens, name).shape[1]} "
                                  f"time samples, grid has {K1}")


def _quad(v, M):
    """<M v, v> for stacks: v (P, K+1, a), M (K+1, a, a) -> (P, K+1)."""
    return np.einsum("pka,kab,pkb->pk", v, M, v)


def _apply(M, v):
    return np.einsum("kab,pkb->pka", M, v)


def _trapz(y, dt):
    return dt * (y[:, 1:-1].sum(axis=1) + 0.5 * (y[:, 0] + y[:, -1]))


def follower_cost_samples(spec: ModelSpec, ens: Ensemble, i: int = 0) -> np.ndarray:
    """Per-path realized cost of tracked follower ``i``; mean-field terms use sample means."""
    _check_ensemble(spec, ens)
    fc = spec.follower_cost
    x, u = ens.x[:, :, i], ens.u[:, :, i]
    xa, x0 = ens.state_average(), ens.x0
    Ex, Ex0 = x.mean(axis=0, keepdims=True), x0.mean(axis=0, keepdims=True)
    e = (x - _apply(fc.Gamma2.values, xa) - _apply(fc.Gammabar2.values, Ex)
         - _apply(fc.Gamma3.values, x0) - _apply(fc.Gammabar3.values, Ex0) - fc.eta2.values)
    run = (_quad(e, fc.Q.values) + _quad(u, fc.R.values)
           + 2 * np.einsum("pka,pka->pk", _apply(fc.S.values, x - _apply(fc.Gammabar2.values, Ex)), u))
    eT = (x[:, -1] - xa[:, -1] @ fc.Gamma4.T - Ex[:, -1] @ fc.Gammabar4.T
          - x0[:, -1] @ fc.Gamma5.T - Ex0[:, -1] @ fc.Gammabar5.T - fc.eta4)
    term = np.einsum("pa,ab,pb->p", eT, fc.G, eT)
    return 0.5 * (_trapz(run, spec.grid.dt) + term)


def leader_cost_samples(spec: ModelSpec, ens: Ensemble) -> np.ndarray:
    _check_ensemble(spec, ens)
    lc = spec.leader_cost
    x0, u0, xa = ens.x0, ens.u0, ens.state_average()
    Ex0 = x0.mean(axis=0, keepdims=True)
    c = x0 - _apply(lc.Gamma0.values, xa) - _apply(lc.Gammabar0.values, Ex0)
    e = c - lc.eta0.values
    run = (_quad(e, lc.Q0.values) + _quad(u0, lc.R0.values)
           + 2 * np.einsum("pka,pka->pk", _apply(lc.S0.values, c), u0))
    eT = x0[:, -1] - xa[:, -1] @ lc.Gamma1.T - Ex0[:, -1] @ lc.Gammabar1.T - lc.eta1
    term = np.einsum("pa,ab,pb->p", eT, lc.G0, eT)
    return 0.5 * (_trapz(run, spec.grid.dt) + term)


def centralized_follower_cost(spec: ModelSpec, ens: Ensemble, i: int = 0) -> float:
    """Monte Carlo estimate of the i-th tracked follower's cost."""
    return float(follower_cost_samples(spec, ens, i).mean())


def centralized_leader_cost(spec: ModelSpec, ens: Ensemble) -> float:
    return float(leader_cost_samples(spec, ens).mean())


def batch_standard_error(samples: np.ndarray, batches: int = 10) -> float:
    """Standard error of the mean from contiguous batch means."""
    samples = np.asarray(samples, dtype=float)
    nb = min(batches, len(samples))
    if nb < 2:
        return float("nan")
    means = np.array([c.mean() for c in np.array_split(samples, nb)])
    return float(means.std(ddof=1) / np.sqrt(nb))


__all__ = [
    "TimeGrid", "CoefficientPath", "LeaderDynamics", "FollowerDynamics", "LeaderCost",
    "FollowerCost", "ModelSpec", "DerivedCoefficients", "ValidationReport", "Ensemble",
    "build_model", "as_path", "scale_costs", "validate_model", "derive_coefficients",
    "follower_cost_samples", "leader_cost_samples", "centralized_follower_cost",
    "centralized_leader_cost", "batch_standard_error",
]
