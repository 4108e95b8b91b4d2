"""Fixed-step RK4 integration of the Riccati, filtering and auxiliary equations.

Every problem is expressed as dX/dt = F(t, X) with a boundary value at
t=0 (forward) or t=T (backward). Coefficients are looked up on the
half-step grid, which is exactly where classical RK4 samples them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Optional

import numpy as np

from .errors import BlowUpError, NonSolvableError, ValidationError, IOFailure
from .model import COND_LIMIT, CoefficientPath, DerivedCoefficients, ModelSpec, TimeGrid, tilde_cross, tilde_sym

CERT_THRESHOLD = 1e-8


def _T(M):
    return np.swapaxes(M, -1, -2)


def _sym(X):
    return 0.5 * (X + X.T)


@dataclass(frozen=True)
class MatrixOdeProblem:
    """dX/dt = rhs(t, X) with ``boundary`` imposed at t=0 or t=T."""

    rhs: Callable[[float, np.ndarray], np.ndarray]
    boundary: np.ndarray
    direction: str = "backward"
    symmetric: bool = False
    name: str = "ode"

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, not {self.direction!r}")


def integrate_matrix_ode(problem: MatrixOdeProblem, grid: TimeGrid) -> CoefficientPath:
    """Classical RK4 on the grid; the result carries derivative samples for Hermite lookups."""
    K, dt = grid.steps, grid.dt
    X = np.array(problem.boundary, dtype=float)
    f = problem.rhs
    vals = np.empty((K + 1,) + X.shape)
    ders = np.empty_like(vals)
    backward = problem.direction == "backward"
    order = range(K, 0, -1) if backward else range(K)
    h = -dt if backward else dt
    vals[K if backward else 0] = X
    for k in order:
        t = k * dt
        k1 = f(t, X)
        k2 = f(t + h / 2, X + (h / 2) * k1)
        k3 = f(t + h / 2, X + (h / 2) * k2)
        k4 = f(t + h, X + h * k3)
        Xn = X + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if problem.symmetric:
            Xn = _sym(Xn)
        if not np.all(np.isfinite(Xn)):
            raise BlowUpError(problem.name, t + h)
        ders[k] = k1
        X = Xn
        vals[k - 1 if backward else k + 1] = X
    kl = 0 if backward else K
    ders[kl] = f(kl * dt, X)
    if not np.all(np.isfinite(ders[kl])):
        raise BlowUpError(problem.name, kl * dt)
    return CoefficientPath(grid, vals, derivs=ders)


def ode_residual(problem: MatrixOdeProblem, path: CoefficientPath) -> np.ndarray:
    """Max-norm of centered difference minus the right-hand side at interior points."""
    g = path.grid
    X = path.values
    fd = (X[2:] - X[:-2]) / (2 * g.dt)
    rhs = np.stack([problem.rhs(k * g.dt, X[k]) for k in range(1, g.steps)])
    return np.abs(fd - rhs).reshape(g.steps - 1, -1).max(axis=1)


# ---------------------------------------------------------------- tables

def _inverse(M: np.ndarray, name: str, cond_limit: float = COND_LIMIT) -> np.ndarray:
    c = np.linalg.cond(M)
    bad = ~np.isfinite(c) | (c > cond_limit)
    if np.any(bad):
        raise ValidationError(f"{name} nearly singular (condition number {c[bad][0]:.3g})")
    return np.linalg.inv(M)


def coefficient_tables(spec: ModelSpec) -> SimpleNamespace:
    """All base coefficients and cached inverses on the half-step grid."""
    ns = SimpleNamespace(grid=spec.grid, n=spec.n, k=spec.k, In=np.eye(spec.n))
    for obj in (spec.leader, spec.follower, spec.leader_cost, spec.follower_cost):
        for name, v in vars(obj).items():
            setattr(ns, name, v.half() if isinstance(v, CoefficientPath) else v)
    ns.Rinv = _inverse(ns.R, "R")
    ns.R0inv = _inverse(ns.R0, "R0")
    ns.finv = _inverse(ns.f, "f")
    ns.f0inv = _inverse(ns.f0, "f0")
    ns.BRB = ns.B @ ns.Rinv @ _T(ns.B)
    ns.GT2 = tilde_sym(ns.Gammabar2, ns.Q)
    ns.GT3 = tilde_cross(ns.Gammabar2, ns.Q, ns.Gamma3, ns.Gammabar3)
    ns.GT0 = tilde_sym(ns.Gammabar0, ns.Q0)
    ns.GT4 = tilde_sym(ns.Gammabar4, ns.G)
    ns.GT5 = tilde_cross(ns.Gammabar4, ns.G, ns.Gamma5, ns.Gammabar5)
    ns.GT1 = tilde_sym(ns.Gammabar1, ns.G0)
    I_Gb2 = ns.In - ns.Gammabar2
    # A + Abar − BR⁻¹S(I − Γ̄2): the part shared by the P2/P3 and φ equations
    ns.X2 = ns.A + ns.Abar - ns.B @ ns.Rinv @ ns.S @ I_Gb2
    ns.Q1a = (ns.Q + ns.GT2 + (_T(ns.Gammabar2) - ns.In) @ ns.Q @ ns.Gamma2
              - _T(I_Gb2) @ _T(ns.S) @ ns.Rinv @ ns.S @ I_Gb2)
    ns.Q1b = ns.GT3 - ns.Q @ ns.Gamma3
    ns.c_phi = (_T(ns.Gammabar2) - ns.In) @ ns.Q @ ns.eta2[..., None]
    ns.c_phi = ns.c_phi[..., 0]
    return ns


# ---------------------------------------------------------------- problems

def p1_problem(spec: ModelSpec, tab=None) -> MatrixOdeProblem:
    tab = tab or coefficient_tables(spec)
    g = spec.grid
    A, B, S, Q, Ri = tab.A, tab.B, tab.S, tab.Q, tab.Rinv

    def rhs(t, P):
        j = g.half_index(t)
        L = P @ B[j] + S[j].T
        return -(P @ A[j] + A[j].T @ P - L @ Ri[j] @ L.T + Q[j])

    return MatrixOdeProblem(rhs, np.array(tab.G), "backward", True, "P1")


def p2p3_blocks(spec: ModelSpec, tab=None) -> SimpleNamespace:
    """Block coefficients of the joint equation for P = [P2, P3].

    The equation reads dP/dt = −(P H1 + H2 P − P I1 P + Q1), P(T) = G1.
    """
    tab = tab or coefficient_tables(spec)
    n = spec.n
    J = 2 * spec.grid.steps + 1
    H1 = np.zeros((J, 2 * n, 2 * n))
    H1[:, :n, :n] = tab.X2 + tab.C
    H1[:, :n, n:] = tab.F
    H1[:, n:, :n] = tab.C0
    H1[:, n:, n:] = tab.A0 + tab.Abar0
    I1 = np.zeros((J, 2 * n, n))
    I1[:, :n] = tab.BRB
    Q1 = np.concatenate([tab.Q1a, tab.Q1b], axis=2)
    G1 = np.concatenate([tab.G + tab.GT4 + (tab.Gammabar4.T - tab.In) @ tab.G @ tab.Gamma4,
                         tab.GT5 - tab.G @ tab.Gamma5], axis=1)
    return SimpleNamespace(H1=H1, H2=_T(tab.X2), I1=I1, Q1=Q1, G1=G1)


def riccati_problem(grid: TimeGrid, H1, H2, I1, Q1, terminal, name, symmetric=False):
    """Generic backward Riccati dP/dt = −(P H1 + H2 P − P I1 P + Q1) on half-grid tables."""
    def rhs(t, P):
        j = grid.half_index(t)
        return -(P @ H1[j] + H2[j] @ P - P @ I1[j] @ P + Q1[j])

    return MatrixOdeProblem(rhs, np.array(terminal, dtype=float), "backward", symmetric, name)


def p2p3_problem(spec: ModelSpec, tab=None) -> MatrixOdeProblem:
    b = p2p3_blocks(spec, tab)
    return riccati_problem(spec.grid, b.H1, b.H2, b.I1, b.Q1, b.G1, "P2/P3")


def phi_problem(spec: ModelSpec, P2: CoefficientPath, P3: CoefficientPath, Eu0,
                tab=None) -> MatrixOdeProblem:
    """Backward linear equation for φ given the leader's mean control."""
    tab = tab or coefficient_tables(spec)
    g = spec.grid
    P2h, P3h = P2.half(), P3.half()
    Euh = Eu0.half() if isinstance(Eu0, CoefficientPath) else np.asarray(Eu0)
    M = (_T(tab.A) + _T(tab.Abar) - P2h @ tab.BRB
         - _T(tab.In - tab.Gammabar2) @ _T(tab.S) @ tab.Rinv @ _T(tab.B))
    drive = (np.einsum("jab,jb->ja", P3h @ tab.B0, Euh)
             + np.einsum("jab,jb->ja", P2h, tab.b)
             + np.einsum("jab,jb->ja", P3h, tab.b0) + tab.c_phi)

    def rhs(t, phi):
        j = g.half_index(t)
        return -(M[j] @ phi + drive[j])

    terminal = (tab.Gammabar4.T - tab.In) @ tab.G @ tab.eta4
    return MatrixOdeProblem(rhs, terminal, "backward", False, "phi")


def filter_problem(spec: ModelSpec, leader: bool = False, tab=None) -> MatrixOdeProblem:
    tab = tab or coefficient_tables(spec)
    g = spec.grid
    if leader:
        A, sig, sigb, H, finv = tab.A0, tab.sigma0, tab.sigmabar0, tab.H0, tab.f0inv
    else:
        A, sig, sigb, H, finv = tab.A, tab.sigma, tab.sigmabar, tab.H, tab.finv
    noise = sig @ _T(sig) + sigb @ _T(sigb)
    HtFt = _T(H) @ _T(finv)

    def rhs(t, Pi):
        j = g.half_index(t)
        Kg = sigb[j] + Pi @ HtFt[j]
        return A[j] @ Pi + Pi @ A[j].T - Kg @ Kg.T + noise[j]

    return MatrixOdeProblem(rhs, np.zeros((spec.n, spec.n)), "forward", True,
                            "Pi0" if leader else "Pi")


# ---------------------------------------------------------------- solvability

@dataclass(frozen=True)
class SolvabilityCertificate:
    """Non-singularity test for a Riccati equation via its linear Hamiltonian lift."""

    theta_path: CoefficientPath
    min_singular_value: np.ndarray
    threshold: float
    passed: bool

    @property
    def pass_(self) -> bool:
        return self.passed

    @property
    def worst(self) -> float:
        return float(self.min_singular_value.min())

    @property
    def worst_time(self) -> float:
        return float(self.theta_path.grid.times[int(np.argmin(self.min_singular_value))])


def riccati_certificate(grid: TimeGrid, H1, H2, I1, Q1, terminal,
                        threshold: float = CERT_THRESHOLD, name="riccati") -> SolvabilityCertificate:
    """Integrate Θ' = HΘ, Θ(T)=I with H = [[H1, −I1], [−Q1, −H2]].

    With U(t) = [I, 0] Θ(t) [I; P(T)], the Riccati solution exists on the
    whole horizon iff U(t) stays non-singular, in which case P = V U⁻¹.
    """
    c = H1.shape[-1]
    r = H2.shape[-1]
    Hm = np.block([[H1, -I1], [-Q1, -H2]])

    def rhs(t, Th):
        return Hm[grid.half_index(t)] @ Th

    theta = integrate_matrix_ode(MatrixOdeProblem(rhs, np.eye(c + r), "backward", False,
                                                  f"{name} certificate"), grid)
    top = np.concatenate([np.eye(c), np.asarray(terminal, dtype=float)], axis=0)
    U = theta.values[:, :c, :] @ top
    sv = np.linalg.svd(U, compute_uv=False)
    smin = sv[:, -1]
    rel = smin / (1.0 + sv[:, 0])
    return SolvabilityCertificate(theta, smin, threshold, bool(np.all(rel > threshold)))


# ---------------------------------------------------------------- solves

@dataclass
class RiccatiBundle:
    P1: CoefficientPath
    P2: CoefficientPath
    P3: CoefficientPath
    Pi: CoefficientPath
    Pi0: CoefficientPath
    certificate: SolvabilityCertificate
    phi: Optional[CoefficientPath] = None
    Sigma1: Optional[CoefficientPath] = None
    Sigma2: Optional[CoefficientPath] = None
    psi: Optional[CoefficientPath] = None

    def paths(self) -> dict:
        names = ("P1", "P2", "P3", "phi", "Pi", "Pi0", "Sigma1", "Sigma2", "psi")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}


def solve_p1(spec: ModelSpec, derived: Optional[DerivedCoefficients] = None, tab=None):
    return integrate_matrix_ode(p1_problem(spec, tab), spec.grid)


def solve_p2_p3(spec: ModelSpec, derived: Optional[DerivedCoefficients] = None,
                threshold: float = CERT_THRESHOLD, tab=None):
    """Solve the coupled P2/P3 system after checking its solvability certificate."""
    tab = tab or coefficient_tables(spec)
    b = p2p3_blocks(spec, tab)
    n = spec.n
    try:
        cert = riccati_certificate(spec.grid, b.H1, b.H2, b.I1, b.Q1, b.G1, threshold, "P2/P3")
    except BlowUpError as e:
        raise NonSolvableError(f"P2/P3 certificate integration diverged at t={e.t:.6g}", t=e.t) from None
    if not cert.passed:
        raise NonSolvableError(
            f"P2/P3 certificate failed: min singular value {cert.worst:.3g} at t={cert.worst_time:.6g}",
            t=cert.worst_time, min_singular=cert.worst)
    try:
        P = integrate_matrix_ode(riccati_problem(spec.grid, b.H1, b.H2, b.I1, b.Q1, b.G1, "P2/P3"),
                                 spec.grid)
    except BlowUpError as e:
        raise NonSolvableError(str(e), t=e.t) from None
    P2 = CoefficientPath(spec.grid, P.values[:, :, :n], P.derivs[:, :, :n])
    P3 = CoefficientPath(spec.grid, P.values[:, :, n:], P.derivs[:, :, n:])
    return P2, P3, cert


def solve_phi(spec: ModelSpec, derived, P2, P3, Eu0, tab=None) -> CoefficientPath:
    return integrate_matrix_ode(phi_problem(spec, P2, P3, Eu0, tab), spec.grid)


def solve_filter_covariances(spec: ModelSpec, tab=None):
    tab = tab or coefficient_tables(spec)
    Pi = integrate_matrix_ode(filter_problem(spec, False, tab), spec.grid)
    Pi0 = integrate_matrix_ode(filter_problem(spec, True, tab), spec.grid)
    return Pi, Pi0


def sigma1_blocks(aug):
    H1 = aug.A0 + aug.B0 @ aug.Bc0
    H2 = _T(aug.A0) + aug.S0 @ aug.Bc1
    I1 = -(aug.B0 @ aug.Bc1)
    Q1 = aug.Q0 + aug.S0 @ aug.Bc0
    return H1, H2, I1, Q1, aug.G0


def sigma2_blocks(aug):
    H1 = aug.A0 + aug.Abar0 + aug.B0 @ (aug.Bc0 + aug.Bcbar0)
    H2 = _T(aug.A0) + _T(aug.Abar0) + (aug.Bbar0 + aug.S0) @ aug.Bc1
    I1 = -(aug.C0 + aug.B0 @ aug.Bc1)
    Q1 = aug.Q0 + aug.Qbar0 + (aug.Bbar0 + aug.S0) @ (aug.Bc0 + aug.Bcbar0)
    # Φ(T) = 𝔾0 X̌(T) + 𝔾1 E X(T) + 𝔾2, so the mean block ends at 𝔾0 + 𝔾1
    return H1, H2, I1, Q1, aug.G0 + aug.G1


def sigma1_problem(aug) -> MatrixOdeProblem:
    return riccati_problem(aug.grid, *sigma1_blocks(aug), "Sigma1")


def sigma2_problem(aug) -> MatrixOdeProblem:
    return riccati_problem(aug.grid, *sigma2_blocks(aug), "Sigma2")


def psi_problem(aug, Sigma2: CoefficientPath) -> MatrixOdeProblem:
    g = aug.grid
    S2 = Sigma2.half()
    Mt = (_T(aug.A0) + _T(aug.Abar0) + S2 @ aug.C0 + S2 @ aug.B0 @ aug.Bc1
          + (aug.Bbar0 + aug.S0) @ aug.Bc1)
    drive = np.einsum("jab,jb->ja", S2, aug.D0) + aug.Dbar0

    def rhs(t, psi):
        j = g.half_index(t)
        return -(Mt[j] @ psi + drive[j])

    return MatrixOdeProblem(rhs, np.array(aug.G2), "backward", False, "psi")


def sigma_certificates(aug, threshold: float = CERT_THRESHOLD) -> dict:
    """Optional solvability diagnostic for the two leader Riccati equations."""
    out = {}
    for label, blocks in (("Sigma1", sigma1_blocks), ("Sigma2", sigma2_blocks)):
        try:
            out[label] = riccati_certificate(aug.grid, *blocks(aug), threshold, label)
        except BlowUpError:
            out[label] = None
    return out


def solve_sigma_psi(spec: ModelSpec, derived, aug):
    """Solve the two leader Riccati equations and the linear ψ equation."""
    out = []
    try:
        for build in (sigma1_problem, sigma2_problem):
            out.append(integrate_matrix_ode(build(aug), spec.grid))
        out.append(integrate_matrix_ode(psi_problem(aug, out[1]), spec.grid))
    except BlowUpError as e:
        raise NonSolvableError(str(e), t=e.t) from None
    return tuple(out)


# ---------------------------------------------------------------- export

def export_path_csv(path: CoefficientPath, filename, name: str = "X"):
    """Write t followed by the row-major entries of each sample."""
    vals = path.values.reshape(path.grid.steps + 1, -1)
    shape = path.shape
    if len(shape) == 1:
        cols = [f"{name}[{i}]" for i in range(shape[0])]
    else:
        cols = [f"{name}[{i},{j}]" for i in range(shape[0]) for j in range(shape[1])]
    try:
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + cols)
            for t, row in zip(path.grid.times, vals):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    except OSError as e:
        raise IOFailure(f"cannot write {filename}: {e}") from None
