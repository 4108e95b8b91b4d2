"""Independent reference computations used by the tests.

The quadratic-program oracles minimize the discretized cost of one player
directly over its whole control sequence (Euler dynamics, left-point
quadrature), with no Riccati equations involved. Their answers converge to
the feedback solution at O(dt).
"""

import numpy as np

from mfstack.model import TimeGrid, build_model


def rand_model(K, n=2, k=2, seed=0, T=1.0):
    r = np.random.default_rng(seed)
    M = lambda s=0.3: s * r.standard_normal((n, n))

    def pd(m, s=1.0):
        X = r.standard_normal((m, m))
        return s * (X @ X.T / m + np.eye(m))

    S = 0.2 * r.standard_normal((k, n))
    S0 = 0.2 * r.standard_normal((k, n))
    R, R0 = pd(k), pd(k)
    Q = pd(n) + S.T @ np.linalg.solve(R, S)
    Q0 = pd(n) + S0.T @ np.linalg.solve(R0, S0)
    v = lambda: 0.5 * r.standard_normal(n)
    return build_model(
        TimeGrid(T, K), n, k,
        leader=dict(A0=M(), Abar0=M(), C0=M(), B0=r.standard_normal((n, k)), b0=v(), xi0=v()),
        follower=dict(A=M(), Abar=M(), C=M(), F=M(), B=r.standard_normal((n, k)), b=v(), xi=v()),
        leader_cost=dict(Q0=Q0, R0=R0, S0=S0, Gamma0=M(), Gammabar0=M(), eta0=v(), G0=pd(n, .5),
                         Gamma1=M(), Gammabar1=M(), eta1=v()),
        follower_cost=dict(Q=Q, R=R, S=S, Gamma2=M(), Gammabar2=M(), Gamma3=M(), Gammabar3=M(),
                           eta2=v(), G=pd(n, .5), Gamma4=M(), Gammabar4=M(), Gamma5=M(),
                           Gammabar5=M(), eta4=v()))


def qp_min(fun, nvar, nvar_extra):
    """Minimizer of a quadratic given only as a batched evaluator ``fun(U) -> costs``.

    The gradient and Hessian are recovered exactly from finitely many
    evaluations (a quadratic is determined by its values on ±e_i and e_i+e_j).
    The trailing ``nvar_extra`` variables are pinned to zero.
    """
    full = fun
    fun = lambda U: full(np.vstack([U, np.zeros((nvar_extra, U.shape[1]))]))
    c0 = fun(np.zeros((nvar, 1)))[0]
    E = np.eye(nvar)
    plus, minus = fun(E), fun(-E)
    g = (plus - minus) / 2
    H = np.zeros((nvar, nvar))
    for i in range(nvar):
        H[i] = fun(E + E[:, [i]]) - plus - plus[i] + c0
    H = 0.5 * (H + H.T)
    return np.concatenate([np.linalg.solve(H, -g), np.zeros(nvar_extra)])


def _T(M):
    return np.swapaxes(M, -1, -2)


def _quad(e, W):
    return np.einsum("kam,kab,kbm->km", e, W, e)


def leader_oracle(eq):
    """Leader's optimal mean control when the followers respond through their mean-field layer."""
    spec = eq.spec
    K, dt, n, k = spec.grid.steps, spec.grid.dt, spec.n, spec.k
    P2, P3 = eq.bundle.P2.values, eq.bundle.P3.values
    f, l, fc, lc = spec.follower, spec.leader, spec.follower_cost, spec.leader_cost
    Ri = np.linalg.inv(fc.R.values)
    BRB = f.B.values @ Ri @ _T(f.B.values)
    In = np.eye(n)
    Gb2 = fc.Gammabar2.values
    BRS = f.B.values @ Ri @ fc.S.values @ (In - Gb2)
    A2 = f.A.values + f.Abar.values - BRB @ P2 - BRS
    Mphi = _T(f.A.values + f.Abar.values - BRB @ _T(P2) - BRS)
    cphi = np.einsum("kab,kb->ka", (_T(Gb2) - In) @ fc.Q.values, fc.eta2.values)

    def fun(U):
        m = U.shape[1]
        u = U.reshape(K + 1, k, m)
        phi = np.zeros((K + 1, n, m))
        phi[K] = ((fc.Gammabar4.T - In) @ fc.G @ fc.eta4)[:, None]
        for j in range(K, 0, -1):
            dr = (Mphi[j] @ phi[j] + P3[j] @ l.B0.values[j] @ u[j]
                  + (P2[j] @ f.b.values[j] + P3[j] @ l.b0.values[j] + cphi[j])[:, None])
            phi[j - 1] = phi[j] + dt * dr
        x0 = np.zeros((K + 1, n, m))
        xi = np.zeros((K + 1, n, m))
        x0[0], xi[0] = l.xi0[:, None], f.xi[:, None]
        for j in range(K):
            x0[j + 1] = x0[j] + dt * ((l.A0.values[j] + l.Abar0.values[j]) @ x0[j] + l.C0.values[j] @ xi[j]
                                      + l.B0.values[j] @ u[j] + l.b0.values[j][:, None])
            xi[j + 1] = xi[j] + dt * ((A2[j] + f.C.values[j]) @ xi[j]
                                      + (f.F.values[j] - BRB[j] @ P3[j]) @ x0[j]
                                      - BRB[j] @ phi[j] + f.b.values[j][:, None])
        c = x0 - lc.Gamma0.values @ xi - lc.Gammabar0.values @ x0
        e = c - lc.eta0.values[:, :, None]
        run = (_quad(e, lc.Q0.values) + _quad(u, lc.R0.values)
               + 2 * np.einsum("kam,kab,kbm->km", u, lc.S0.values, c))
        w = np.full(K + 1, dt)
        w[-1] = 0.0
        eT = x0[K] - lc.Gamma1 @ xi[K] - lc.Gammabar1 @ x0[K] - lc.eta1[:, None]
        return 0.5 * (w @ run + np.einsum("am,ab,bm->m", eT, lc.G0, eT))

    return qp_min(fun, K * k, k).reshape(K + 1, k)


def follower_oracle(eq):
    """Representative follower's optimal control with the mean fields frozen."""
    spec = eq.spec
    K, dt, n, k = spec.grid.steps, spec.grid.dt, spec.n, spec.k
    f, fc = spec.follower, spec.follower_cost
    z, x0 = eq.means.E_xi.values, eq.means.E_x0.values

    def fun(U):
        m = U.shape[1]
        u = U.reshape(K + 1, k, m)
        x = np.zeros((K + 1, n, m))
        x[0] = f.xi[:, None]
        for j in range(K):
            x[j + 1] = x[j] + dt * ((f.A.values[j] + f.Abar.values[j]) @ x[j] + f.B.values[j] @ u[j]
                                    + (f.C.values[j] @ z[j] + f.F.values[j] @ x0[j] + f.b.values[j])[:, None])
        e = (x - fc.Gamma2.values @ z[:, :, None] - fc.Gammabar2.values @ x
             - fc.Gamma3.values @ x0[:, :, None] - fc.Gammabar3.values @ x0[:, :, None]
             - fc.eta2.values[:, :, None])
        run = (_quad(e, fc.Q.values) + _quad(u, fc.R.values)
               + 2 * np.einsum("kam,kab,kbm->km", u, fc.S.values, x - fc.Gammabar2.values @ x))
        w = np.full(K + 1, dt)
        w[-1] = 0.0
        eT = (x[K] - fc.Gamma4 @ z[K][:, None] - fc.Gammabar4 @ x[K] - fc.Gamma5 @ x0[K][:, None]
              - fc.Gammabar5 @ x0[K][:, None] - fc.eta4[:, None])
        return 0.5 * (w @ run + np.einsum("am,ab,bm->m", eT, fc.G, eT))

    return qp_min(fun, K * k, k).reshape(K + 1, k)


def follower_control_direct(spec, P1, P2, P3, phi, xhat, Exi, Ex0):
    """Term-by-term transcription of the follower feedback law at one time point."""
    f, fc = spec.follower, spec.follower_cost
    B, R, S, Gb2 = f.B, fc.R, fc.S, fc.Gammabar2
    bracket = ((B.T @ P1 + S) @ xhat + (B.T @ (P2 - P1) - S @ Gb2) @ Exi
               + B.T @ P3 @ Ex0 + B.T @ phi)
    return -np.linalg.solve(R, bracket)


def rk4_scalar(fun, y_T, T, steps):
    """Plain backward RK4 for a scalar ODE y' = fun(t, y), used as a cross-check."""
    h = -T / steps
    t, y = T, y_T
    out = [y]
    for _ in range(steps):
        k1 = fun(t, y)
        k2 = fun(t + h / 2, y + h / 2 * k1)
        k3 = fun(t + h / 2, y + h / 2 * k2)
        k4 = fun(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
        out.append(y)
    return np.array(out[::-1])
