"""Decentralized feedback strategies for the leader and the followers.

Block layout of the augmented leader state is [x0; E x_i; γ], with the
matching adjoint [y0; y; φ]. Block arrays live on the half-step grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError
from .model import CoefficientPath, DerivedCoefficients, ModelSpec, derive_coefficients, validate_model
from .solvers import (CERT_THRESHOLD, MatrixOdeProblem, RiccatiBundle, SolvabilityCertificate,
                      coefficient_tables, integrate_matrix_ode, solve_filter_covariances, solve_p1,
                      solve_p2_p3, solve_phi, solve_sigma_psi)


def _T(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, v):
    return np.einsum("...ab,...b->...a", M, v)


@dataclass
class AugmentedLeaderSystem:
    """Coefficients of the 3n-dimensional leader problem on the half-step grid."""

    grid: object
    n: int
    A0: np.ndarray
    Abar0: np.ndarray
    C0: np.ndarray
    B0: np.ndarray
    D0: np.ndarray
    Bbar0: np.ndarray
    Q0: np.ndarray
    Qbar0: np.ndarray
    Dbar0: np.ndarray
    S0: np.ndarray
    G0: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    Xi0: np.ndarray
    A2: np.ndarray
    Bc0: np.ndarray
    Bcbar0: np.ndarray
    Bc1: np.ndarray
    sigma_t0: Optional[np.ndarray] = None

    def on_grid(self, name: str) -> np.ndarray:
        """Block values at the grid points."""
        v = getattr(self, name)
        return v[::2] if v.ndim and v.shape[0] == 2 * self.grid.steps + 1 else v

    # zero pattern per block, as (row block, col block) pairs that must be zero
    ZERO_BLOCKS = {
        "A0": [(i, j) for i in range(3) for j in range(3) if (i, j) != (0, 0)],
        "Abar0": [(0, 2), (1, 2), (2, 0), (2, 1)],
        "C0": [(i, j) for i in range(3) for j in range(3) if (i, j) not in ((1, 2), (2, 1))],
        "Q0": [(i, j) for i in range(3) for j in range(3) if (i, j) != (0, 0)],
        "Qbar0": [(0, 2), (1, 2), (2, 0), (2, 1), (2, 2)],
        "G0": [(i, j) for i in range(3) for j in range(3) if (i, j) != (0, 0)],
        "G1": [(0, 2), (1, 2), (2, 0), (2, 1), (2, 2)],
        "B0": [(1, 0), (2, 0)],
        "S0": [(1, 0), (2, 0)],
        "D0": [(2,)],
        "Xi0": [(2,)],
        "Bc0": [(0, 1), (0, 2)],
        "Bc1": [(0, 1), (0, 2)],
    }

    def sparsity_violations(self) -> list:
        n = self.n
        bad = []
        for name, blocks in self.ZERO_BLOCKS.items():
            v = getattr(self, name)
            for blk in blocks:
                if len(blk) == 1:
                    sl = v[..., blk[0] * n:(blk[0] + 1) * n]
                elif name in ("B0", "S0"):
                    sl = v[..., blk[0] * n:(blk[0] + 1) * n, :]
                elif name in ("Bc0", "Bc1"):
                    sl = v[..., :, blk[1] * n:(blk[1] + 1) * n]
                else:
                    sl = v[..., blk[0] * n:(blk[0] + 1) * n, blk[1] * n:(blk[1] + 1) * n]
                if np.any(sl != 0):
                    bad.append(f"{name} block {blk} not zero")
        return bad


def build_augmented_system(spec: ModelSpec, derived: Optional[DerivedCoefficients], P2: CoefficientPath,
                           P3: CoefficientPath, Pi0: Optional[CoefficientPath] = None,
                           tab=None) -> AugmentedLeaderSystem:
    tab = tab or coefficient_tables(spec)
    n, k = spec.n, spec.k
    J = 2 * spec.grid.steps + 1
    P2h, P3h = P2.half(), P3.half()
    if P2h.shape != (J, n, n) or P3h.shape != (J, n, n):
        raise ValidationError("P2/P3 dimension mismatch with the model")
    In = tab.In
    s1, s2, s3 = slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n)
    BRB = tab.BRB
    BRS = tab.B @ tab.Rinv @ tab.S @ (In - tab.Gammabar2)
    A2 = tab.A + tab.Abar - BRB @ P2h - BRS
    A2phi = tab.A + tab.Abar - BRB @ _T(P2h) - BRS

    def z(*shape):
        return np.zeros((J,) + shape)

    A0 = z(3 * n, 3 * n)
    A0[:, s1, s1] = tab.A0
    Abar0 = z(3 * n, 3 * n)
    Abar0[:, s1, s1] = tab.Abar0
    Abar0[:, s1, s2] = tab.C0
    Abar0[:, s2, s1] = tab.F - BRB @ P3h
    Abar0[:, s2, s2] = A2 + tab.C
    Abar0[:, s3, s3] = A2phi
    C0 = z(3 * n, 3 * n)
    C0[:, s2, s3] = -BRB
    C0[:, s3, s2] = BRB
    B0 = z(3 * n, k)
    B0[:, s1] = tab.B0
    D0 = z(3 * n)
    D0[:, s1] = tab.b0
    D0[:, s2] = tab.b
    S0t = _T(tab.S0)
    Bbar0 = z(3 * n, k)
    Bbar0[:, s1] = -_T(tab.Gammabar0) @ S0t
    Bbar0[:, s2] = -_T(tab.Gamma0) @ S0t
    Bbar0[:, s3] = P3h @ tab.B0
    S0 = z(3 * n, k)
    S0[:, s1] = S0t
    Q0 = z(3 * n, 3 * n)
    Q0[:, s1, s1] = tab.Q0
    Qbar0 = z(3 * n, 3 * n)
    Qbar0[:, s1, s1] = tab.GT0
    Qbar0[:, s1, s2] = (_T(tab.Gammabar0) - In) @ tab.Q0 @ tab.Gamma0
    Qbar0[:, s2, s1] = _T(tab.Gamma0) @ tab.Q0 @ (tab.Gammabar0 - In)
    Qbar0[:, s2, s2] = _T(tab.Gamma0) @ tab.Q0 @ tab.Gamma0
    Dbar0 = z(3 * n)
    Dbar0[:, s1] = _mv((_T(tab.Gammabar0) - In) @ tab.Q0, tab.eta0)
    Dbar0[:, s2] = _mv(_T(tab.Gamma0) @ tab.Q0, tab.eta0)
    Dbar0[:, s3] = _mv(P2h, tab.b) + _mv(P3h, tab.b0) + tab.c_phi
    G0 = np.zeros((3 * n, 3 * n))
    G0[s1, s1] = tab.G0
    G1 = np.zeros((3 * n, 3 * n))
    G1[s1, s1] = tab.GT1
    G1[s1, s2] = (tab.Gammabar1.T - In) @ tab.G0 @ tab.Gamma1
    G1[s2, s1] = tab.Gamma1.T @ tab.G0 @ (tab.Gammabar1 - In)
    G1[s2, s2] = tab.Gamma1.T @ tab.G0 @ tab.Gamma1
    G2 = np.zeros(3 * n)
    G2[s1] = (tab.Gammabar1.T - In) @ tab.G0 @ tab.eta1
    G2[s2] = tab.Gamma1.T @ tab.G0 @ tab.eta1
    G2[s3] = (tab.Gammabar4.T - In) @ tab.G @ tab.eta4
    Xi0 = np.concatenate([tab.xi0, tab.xi, np.zeros(n)])
    R0i = tab.R0inv
    Bc0 = z(k, 3 * n)
    Bc0[:, :, s1] = -R0i @ tab.S0
    Bcbar0 = z(k, 3 * n)
    Bcbar0[:, :, s1] = R0i @ tab.S0 @ tab.Gammabar0
    Bcbar0[:, :, s2] = R0i @ tab.S0 @ tab.Gamma0
    Bcbar0[:, :, s3] = R0i @ _T(tab.B0) @ _T(P3h)
    Bc1 = z(k, 3 * n)
    Bc1[:, :, s1] = -R0i @ _T(tab.B0)
    sig_t = None
    if Pi0 is not None:
        sig_t = z(3 * n, n)
        sig_t[:, s1] = tab.sigmabar0 + Pi0.half() @ _T(tab.H0) @ _T(tab.f0inv)
    return AugmentedLeaderSystem(spec.grid, n, A0, Abar0, C0, B0, D0, Bbar0, Q0, Qbar0, Dbar0,
                                 S0, G0, G1, G2, Xi0, A2, Bc0, Bcbar0, Bc1, sig_t)


# ---------------------------------------------------------------- gains

@dataclass
class LeaderGains:
    """u0 = L_check X̌0 + L_mean E X0 + L_aff; arrays indexed by grid point."""

    L_check: np.ndarray
    L_mean: np.ndarray
    L_aff: np.ndarray

    def control(self, k: int, X_check, EX):
        return _mv(self.L_check[k], X_check) + self.L_mean[k] @ EX + self.L_aff[k]

    @property
    def K_state(self) -> np.ndarray:
        """Feedback on the leader's own filtered state deviation, (K+1, k, n)."""
        n = self.L_check.shape[-1] // 3
        return self.L_check[..., :n]


@dataclass
class FollowerGains:
    """u_i = −K_hat x̂_i − K_mean E x_i − K_leader E x0 − K_aff."""

    K_hat: np.ndarray
    K_mean: np.ndarray
    K_leader: np.ndarray
    K_aff: np.ndarray

    def control(self, k: int, xhat, Exi, Ex0):
        return -(_mv(self.K_hat[k], xhat) + self.K_mean[k] @ Exi
                 + self.K_leader[k] @ Ex0 + self.K_aff[k])

    def offset(self, k: int, Exi, Ex0):
        """The deterministic part of the control."""
        return -(self.K_mean[k] @ Exi + self.K_leader[k] @ Ex0 + self.K_aff[k])


@dataclass
class MeanFieldTrajectories:
    E_xi: CoefficientPath
    E_x0: CoefficientPath
    Eu0: CoefficientPath
    phi: CoefficientPath
    E_X0: Optional[CoefficientPath] = None

    @property
    def gamma(self) -> Optional[np.ndarray]:
        if self.E_X0 is None:
            return None
        n = self.E_xi.shape[0]
        return self.E_X0.values[:, 2 * n:]


def leader_mean_problem(aug: AugmentedLeaderSystem, Sigma2: CoefficientPath,
                        psi: CoefficientPath) -> MatrixOdeProblem:
    S2, ps = Sigma2.half(), psi.half()
    drift = aug.A0 + aug.Abar0 + aug.C0 @ S2 + aug.B0 @ (aug.Bc0 + aug.Bcbar0 + aug.Bc1 @ S2)
    aff = _mv(aug.C0 + aug.B0 @ aug.Bc1, ps) + aug.D0
    g = aug.grid

    def rhs(t, X):
        j = g.half_index(t)
        return drift[j] @ X + aff[j]

    return MatrixOdeProblem(rhs, aug.Xi0, "forward", False, "E_X0")


def compute_leader_layer(spec: ModelSpec, derived, aug: AugmentedLeaderSystem,
                         Sigma1: CoefficientPath, Sigma2: CoefficientPath, psi: CoefficientPath):
    """Leader gains, the augmented mean path and the leader's mean control."""
    S1, S2, ps = Sigma1.half(), Sigma2.half(), psi.half()
    Lc = aug.Bc0 + aug.Bc1 @ S1
    Lm = aug.Bcbar0 + aug.Bc1 @ (S2 - S1)
    La = _mv(aug.Bc1, ps)
    gains = LeaderGains(Lc[::2], Lm[::2], La[::2])
    EX = integrate_matrix_ode(leader_mean_problem(aug, Sigma2, psi), spec.grid)
    Eu0_half = _mv(Lc + Lm, EX.half()) + La
    Eu0 = CoefficientPath(spec.grid, Eu0_half[::2], half=Eu0_half)
    return gains, EX, Eu0


def follower_mean_problem(spec: ModelSpec, P2, P3, phi, Eu0, tab=None) -> MatrixOdeProblem:
    """Joint forward equation for [E x0; E x_i]."""
    tab = tab or coefficient_tables(spec)
    n = spec.n
    P2h, P3h, ph = P2.half(), P3.half(), phi.half()
    Euh = Eu0.half()
    BRB = tab.BRB
    A2 = tab.A + tab.Abar - BRB @ P2h - tab.B @ tab.Rinv @ tab.S @ (tab.In - tab.Gammabar2)
    M = np.block([[tab.A0 + tab.Abar0, tab.C0], [tab.F - BRB @ P3h, A2 + tab.C]])
    aff = np.concatenate([_mv(tab.B0, Euh) + tab.b0, -_mv(BRB, ph) + tab.b], axis=1)
    g = spec.grid

    def rhs(t, Y):
        j = g.half_index(t)
        return M[j] @ Y + aff[j]

    return MatrixOdeProblem(rhs, np.concatenate([tab.xi0, tab.xi]), "forward", False, "E_x")


def compute_follower_layer(spec: ModelSpec, derived, P1, P2, P3, Eu0, tab=None):
    """Follower gains and mean-field paths for a given leader mean control."""
    tab = tab or coefficient_tables(spec)
    n = spec.n
    phi = solve_phi(spec, derived, P2, P3, Eu0, tab)
    Y = integrate_matrix_ode(follower_mean_problem(spec, P2, P3, phi, Eu0, tab), spec.grid)
    E_x0 = CoefficientPath(spec.grid, Y.values[:, :n], Y.derivs[:, :n])
    E_xi = CoefficientPath(spec.grid, Y.values[:, n:], Y.derivs[:, n:])
    fc, fd = spec.follower_cost, spec.follower
    Ri = np.linalg.inv(fc.R.values)
    Bt = _T(fd.B.values)
    P1v, P2v, P3v = P1.values, P2.values, P3.values
    gains = FollowerGains(
        K_hat=Ri @ (Bt @ P1v + fc.S.values),
        K_mean=Ri @ (Bt @ (P2v - P1v) - fc.S.values @ fc.Gammabar2.values),
        K_leader=Ri @ Bt @ P3v,
        K_aff=_mv(Ri @ Bt, phi.values),
    )
    return gains, MeanFieldTrajectories(E_xi, E_x0, Eu0, phi)


def decoupling_residual(spec: ModelSpec, bundle: RiccatiBundle, means: MeanFieldTrajectories,
                        xhat, phat) -> float:
    """Sup-norm gap between a filtered adjoint path and the linear ansatz in x̂."""
    xhat, phat = np.asarray(xhat, float), np.asarray(phat, float)
    if xhat.shape[0] != spec.grid.steps + 1 or phat.shape != xhat.shape:
        raise ValidationError("grid mismatch in decoupling residual inputs")
    return float(np.abs(phat - ansatz_adjoint(bundle, means, xhat)).max())


def ansatz_adjoint(bundle: RiccatiBundle, means: MeanFieldTrajectories, xhat) -> np.ndarray:
    Exi, Ex0 = means.E_xi.values, means.E_x0.values
    return (_mv(bundle.P1.values, xhat - Exi) + _mv(bundle.P2.values, Exi)
            + _mv(bundle.P3.values, Ex0) + means.phi.values)


# ---------------------------------------------------------------- pipeline

@dataclass
class Equilibrium:
    """Everything needed to run the decentralized strategies."""

    spec: ModelSpec
    derived: DerivedCoefficients
    bundle: RiccatiBundle
    aug: AugmentedLeaderSystem
    leader_gains: LeaderGains
    follower_gains: FollowerGains
    means: MeanFieldTrajectories
    tables: object

    @property
    def certificate(self) -> SolvabilityCertificate:
        return self.bundle.certificate

    def respond(self, Eu0: CoefficientPath):
        """Follower best response (gains and means) to a different leader mean control."""
        return compute_follower_layer(self.spec, self.derived, self.bundle.P1, self.bundle.P2,
                                      self.bundle.P3, Eu0, self.tables)


def solve_equilibrium(spec: ModelSpec, threshold: float = CERT_THRESHOLD,
                      validate: bool = True, **tolerances) -> Equilibrium:
    """Validate, solve every Riccati layer and assemble both players' strategies.

    ``tolerances`` (``psd_rtol``, ``cond_limit``) are forwarded to the validator.
    """
    if validate:
        validate_model(spec, **tolerances).raise_if_invalid()
    tab = coefficient_tables(spec)
    derived = derive_coefficients(spec)
    P1 = solve_p1(spec, derived, tab)
    P2, P3, cert = solve_p2_p3(spec, derived, threshold, tab)
    Pi, Pi0 = solve_filter_covariances(spec, tab)
    aug = build_augmented_system(spec, derived, P2, P3, Pi0, tab)
    S1, S2, psi = solve_sigma_psi(spec, derived, aug)
    lgains, EX, Eu0 = compute_leader_layer(spec, derived, aug, S1, S2, psi)
    fgains, means = compute_follower_layer(spec, derived, P1, P2, P3, Eu0, tab)
    means.E_X0 = EX
    bundle = RiccatiBundle(P1, P2, P3, Pi, Pi0, cert, means.phi, S1, S2, psi)
    return Equilibrium(spec, derived, bundle, aug, lgains, fgains, means, tab)
