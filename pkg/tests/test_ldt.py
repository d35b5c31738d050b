import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaleseer.errors import ConvergenceError, DomainError
from scaleseer.ldt import (
    FOUR_OVER_9PI,
    TwoLayerLDTConfig,
    a_sigma_sq,
    action_S,
    beta_outlier_profile,
    has_side_minima,
    log_z1,
    mc_t_star_general,
    mean_predictor_ty,
    plateau,
    plateau_d2,
    profile_curvature,
    solve_t_star,
    two_layer_sampler,
)
from scaleseer.numerics import RngStream


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50))
def test_plateau_bounded(beta):
    assert 0 <= plateau(beta) < 1 / 8


def test_plateau_second_derivative():
    b = np.linspace(-3, 3, 31)
    h = 1e-4
    num = (plateau(b + h) - 2 * plateau(b) + plateau(b - h)) / h ** 2
    np.testing.assert_allclose(plateau_d2(b), num, atol=1e-5)


def test_neuron_overlap_matches_quadrature():
    # unit-norm residual direction: averaging over it turns erf(beta z1 + z2) into erf(beta z1 / sqrt(3))
    from scaleseer.numerics import hermite_normalized
    from scipy.special import erf
    x, w = np.polynomial.hermite_e.hermegauss(120)
    w = w / w.sum()
    for beta in (0.3, 1.0, 2.5):
        inner = np.sum(w * erf(beta * x / math.sqrt(3)) * hermite_normalized(3, x))
        # coefficient of He_3 / 3! is the unit-norm overlap divided by sqrt(6)
        assert abs(inner ** 2 / 6 - a_sigma_sq(beta)) < 1e-12


def test_config_validation():
    with pytest.raises(DomainError):
        TwoLayerLDTConfig(d=10, N=10, alpha=1.5)
    with pytest.raises(DomainError):
        TwoLayerLDTConfig(d=10, N=10, alpha=0.0)
    with pytest.raises(DomainError):
        TwoLayerLDTConfig(d=10, N=10, m=1)
    TwoLayerLDTConfig(d=10, N=10, alpha=1.0)


def test_log_z1_zero_at_origin_and_increasing():
    cfg = TwoLayerLDTConfig(d=20, N=20)
    assert log_z1(0.0, cfg) == 0.0
    vals = [log_z1(t, cfg) for t in (10.0, 100.0, 500.0)]
    assert 0 < vals[0] < vals[1] < vals[2]


def test_log_z1_small_tilt_matches_direct_quadrature():
    from scipy.integrate import quad
    cfg = TwoLayerLDTConfig(d=5, N=5)
    t = 30.0
    ref, _ = quad(lambda b: math.sqrt(cfg.d / (2 * math.pi)) * math.exp(-0.5 * cfg.d * action_S(b, t, cfg)),
                  -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12)
    assert abs(log_z1(t, cfg) - math.log(ref)) < 1e-9


@pytest.mark.parametrize("d", [10, 40])
def test_saddle_properties(d):
    cfg = TwoLayerLDTConfig(d=d, N=d, alpha=0.9, kappa=0.5, k_factor=2.0)
    r = solve_t_star(cfg)
    assert r.t_star >= 18 * math.pi * cfg.alpha
    assert r.stationarity_residual < 1e-8 and r.fixed_point_residual < 1e-8
    assert abs(r.energy - (r.t_star * cfg.alpha - cfg.N * log_z1(r.t_star, cfg))) < 1e-8 * r.energy
    assert r.p_star == pytest.approx(2 * cfg.kappa * r.energy / cfg.k_factor)
    # the Legendre objective is maximal at t*
    for t in (0.9 * r.t_star, 1.1 * r.t_star):
        assert t * cfg.alpha - cfg.N * log_z1(t, cfg) < r.energy
    prof = beta_outlier_profile(r)
    assert prof.shape[1] == 2 and 0 <= prof[:, 1].min() < 1e-3 * prof[:, 1].max()
    assert set(r.to_json()) >= {"t_star", "energy", "p_star"}


def test_energy_increases_with_alignment():
    e = [solve_t_star(TwoLayerLDTConfig(d=20, N=20, alpha=a)).energy for a in (0.3, 0.6, 0.9)]
    assert e[0] < e[1] < e[2]


def test_profile_curvature_formula():
    r = solve_t_star(TwoLayerLDTConfig(d=30, N=30))
    b = np.linspace(0.2, 2.0, 7)
    h = 1e-4
    H = lambda x: 0.5 * 30 * x ** 2 - 2 * r.t_star ** 2 / (9 * math.pi * 30) * plateau(x)
    num = (H(b + h) - 2 * H(b) + H(b - h)) / h ** 2
    np.testing.assert_allclose(profile_curvature(r, b), num, rtol=1e-5, atol=1e-4)


def test_monte_carlo_fixed_point_agrees_at_weak_tilt():
    cfg = TwoLayerLDTConfig(d=4, N=4, alpha=0.02)
    exact = solve_t_star(cfg).t_star
    mc = mc_t_star_general(two_layer_sampler(4, 4), 0.02, 200_000, RngStream(0), 4)
    assert abs(mc.t_star - exact) < 4 * mc.stderr


def test_monte_carlo_reports_heavy_tails():
    with pytest.raises(ConvergenceError):
        mc_t_star_general(two_layer_sampler(40, 40), 0.9, 20_000, RngStream(0), 40)
    with pytest.raises(DomainError):
        mc_t_star_general(two_layer_sampler(4, 4), 0.5, 100, RngStream(0), 4)


def test_mean_predictor_fixed_point():
    cfg = TwoLayerLDTConfig(d=10, N=10, kappa=0.5)
    t = mean_predictor_ty(cfg)
    from scaleseer.ldt import _TiltedNeuron
    g = _TiltedNeuron(cfg, t).mean_g()
    assert abs(t * (cfg.kappa + FOUR_OVER_9PI * g) - 1) < 1e-7
