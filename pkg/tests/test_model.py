import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scalar_model, zero_model
from mfstack.errors import ValidationError
from mfstack.model import (CoefficientPath, Ensemble, TimeGrid, as_path, batch_standard_error,
                           build_model, centralized_follower_cost, centralized_leader_cost,
                           derive_coefficients, follower_cost_samples, scale_costs, tilde_cross,
                           tilde_sym, validate_model)


def const_ensemble(spec, x0=0.0, u0=0.0, x=0.0, u=0.0, paths=2, M=1):
    K1, n, k = spec.grid.steps + 1, spec.n, spec.k
    return Ensemble(np.full((paths, K1, n), x0), np.full((paths, K1, k), u0),
                    np.full((paths, K1, M, n), x), np.full((paths, K1, M, k), u))


def random_ensemble(spec, rng, paths=6, M=3):
    K1, n, k = spec.grid.steps + 1, spec.n, spec.k
    return Ensemble(rng.standard_normal((paths, K1, n)), rng.standard_normal((paths, K1, k)),
                    rng.standard_normal((paths, K1, M, n)), rng.standard_normal((paths, K1, M, k)))


# ---------------------------------------------------------------- grid and paths

def test_grid_rejects_single_step():
    with pytest.raises(ValidationError):
        TimeGrid(1.0, 1)


def test_grid_half_index_roundtrip():
    g = TimeGrid(2.0, 40)
    assert all(g.half_index(t) == j for j, t in enumerate(g.half_times))


def test_path_linear_and_hermite_evaluation():
    g = TimeGrid(1.0, 10)
    t = g.times
    lin = CoefficientPath(g, t[:, None] ** 2)
    assert np.isclose(lin(0.05)[0], 0.5 * (0.0 + 0.01))
    herm = CoefficientPath(g, t[:, None] ** 3, derivs=3 * t[:, None] ** 2)
    assert np.isclose(herm(0.537)[0], 0.537 ** 3, atol=1e-14)     # cubic reproduced exactly
    assert np.allclose(herm.half()[1::2, 0], (g.half_times[1::2]) ** 3, atol=1e-14)


def test_as_path_accepts_constants_and_tables():
    g = TimeGrid(1.0, 4)
    p = as_path(g, 2.0, (1, 1))
    assert p.shape == (1, 1) and np.all(p.values == 2.0)
    q = as_path(g, [0, 1, 2, 3, 4], (1, 1))                # scalar table per grid point
    assert np.array_equal(q.values[:, 0, 0], np.arange(5.0))
    with pytest.raises(ValidationError):
        as_path(g, [1, 2, 3], (1, 1))


def test_build_model_rejects_unknown_keys_and_bad_shapes():
    g = TimeGrid(1.0, 10)
    with pytest.raises(ValidationError, match="unknown keys"):
        build_model(g, 1, 1, follower=dict(Z=1))
    with pytest.raises(ValidationError):
        build_model(g, 2, 1, follower=dict(A=[[1, 0, 0]]))


# ---------------------------------------------------------------- validation

def _scalar(**fc):
    return build_model(TimeGrid(1.0, 10), 1, 1, follower_cost=fc)


def test_validate_clean_model_has_empty_report():
    assert validate_model(_scalar(Q=1, R=1)).violations == []


def test_validate_reports_singular_R():
    rep = validate_model(_scalar(Q=1, R=0))
    assert any("R not positive definite at t=0" in v for v in rep.violations)


def test_validate_reports_cross_term_violation():
    rep = validate_model(_scalar(Q=1, R=1, S=2))
    assert any("Q − SᵀR⁻¹S not PSD" in v for v in rep.violations)


def test_validate_flags_dimension_mismatch():
    spec = scalar_model(steps=10)
    from dataclasses import replace
    bad = replace(spec, follower=replace(spec.follower, B=CoefficientPath.constant(spec.grid, np.ones((2, 1)))))
    with pytest.raises(ValidationError, match="dimension mismatch"):
        validate_model(bad)


def test_validate_tolerance_is_configurable():
    spec = _scalar(Q=-1e-9, R=1)
    assert not validate_model(spec).ok
    assert validate_model(spec, psd_rtol=1e-8).ok


@settings(max_examples=25, deadline=None)
@given(q=st.floats(-2, 2), r=st.floats(-1, 2), s=st.floats(-2, 2))
def test_validate_is_idempotent_and_pure(q, r, s):
    spec = _scalar(Q=q, R=r, S=s)
    a, b = validate_model(spec), validate_model(spec)
    assert a.violations == b.violations
    assert validate_model(spec).violations == a.violations


# ---------------------------------------------------------------- derived coefficients

def test_tilde_examples():
    spec = build_model(TimeGrid(1.0, 4), 1, 1,
                       follower_cost=dict(Q=5, Gamma3=0.5), leader_cost=dict(G0=1, Gammabar1=1))
    d = derive_coefficients(spec)
    assert np.all(d.GammaT2 == 0)
    assert np.all(d.GammaT3 == 0)
    assert d.GammaT1[0, 0] == -1.0


def test_derived_regeneration_is_exact(rng):
    from oracles import rand_model
    spec = rand_model(20, n=3, k=2, seed=3)
    d1, d2 = derive_coefficients(spec), derive_coefficients(spec)
    for name in ("GammaT0", "GammaT1", "GammaT2", "GammaT3", "GammaT4", "GammaT5"):
        assert np.array_equal(getattr(d1, name), getattr(d2, name))
    fc = spec.follower_cost
    Gb, Q = fc.Gammabar2.values[0], fc.Q.values[0]
    assert np.allclose(d1.GammaT2[0], Gb.T @ Q @ Gb - Q @ Gb - Gb.T @ Q, atol=1e-14)
    assert np.array_equal(tilde_cross(fc.Gammabar4, fc.G, fc.Gamma5, fc.Gammabar5), d1.GammaT5)
    assert np.array_equal(tilde_sym(fc.Gammabar4, fc.G), d1.GammaT4)


# ---------------------------------------------------------------- costs

def test_costs_vanish_at_zero():
    spec = zero_model(steps=10)
    ens = const_ensemble(spec)
    assert centralized_follower_cost(spec, ens) == 0.0
    assert centralized_leader_cost(spec, ens) == 0.0


def test_follower_cost_hand_integral():
    spec = zero_model(steps=10, follower_cost=dict(Q=2))
    assert np.isclose(centralized_follower_cost(spec, const_ensemble(spec, x=1.0)), 1.0, rtol=1e-14)


def test_leader_cost_hand_integral():
    spec = zero_model(steps=10, leader_cost=dict(S0=1, Q0=0, R0=0))
    assert np.isclose(centralized_leader_cost(spec, const_ensemble(spec, x0=1.0, u0=1.0)), 1.0, rtol=1e-14)


def test_cost_rejects_grid_mismatch():
    spec = zero_model(steps=10)
    ens = const_ensemble(zero_model(steps=12))
    with pytest.raises(ValidationError):
        follower_cost_samples(spec, ens)


def test_costs_nonnegative_without_cross_terms(rng):
    from oracles import rand_model
    spec = rand_model(30, n=2, k=2, seed=5)
    from dataclasses import replace
    z = lambda p: CoefficientPath(p.grid, np.zeros_like(p.values))
    lc = replace(spec.leader_cost, S0=z(spec.leader_cost.S0), eta0=z(spec.leader_cost.eta0),
                 eta1=np.zeros(2))
    fc = replace(spec.follower_cost, S=z(spec.follower_cost.S), eta2=z(spec.follower_cost.eta2),
                 eta4=np.zeros(2))
    spec = replace(spec, leader_cost=lc, follower_cost=fc)
    assert validate_model(spec).ok
    for _ in range(5):
        ens = random_ensemble(spec, rng)
        assert centralized_follower_cost(spec, ens) >= -1e-12
        assert centralized_leader_cost(spec, ens) >= -1e-12


@settings(max_examples=20, deadline=None)
@given(lam=st.floats(0.01, 100), seed=st.integers(0, 10_000))
def test_cost_homogeneity(lam, seed):
    spec = scalar_model(steps=20)
    ens = random_ensemble(spec, np.random.default_rng(seed))
    for who, f in (("follower", centralized_follower_cost), ("leader", centralized_leader_cost)):
        scaled = scale_costs(spec, **{who: lam})
        assert np.isclose(f(scaled, ens), lam * f(spec, ens), rtol=1e-12, atol=1e-14)


def test_batch_standard_error():
    x = np.arange(100.0)
    assert batch_standard_error(np.ones(50)) == 0.0
    assert np.isnan(batch_standard_error(np.ones(1)))
    means = x.reshape(10, 10).mean(axis=1)
    assert np.isclose(batch_standard_error(x), means.std(ddof=1) / np.sqrt(10))
