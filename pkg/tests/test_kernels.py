import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaleseer.errors import ContractError, DomainError
from scaleseer.kernels import (
    ActivationKind,
    FeatureBasis,
    GFLConfig,
    KernelMatrix,
    SpikeConfig,
    empirical_kernel,
    kernel_expectation,
    loglog_slope,
    nngp_closed_form,
    readout_overlap_sq,
    rkhs_norm,
    run_gfl_propagation,
    run_spike_experiment,
    sherman_morrison_rkhs,
)
from scaleseer.numerics import RngStream


@pytest.mark.parametrize("act", ["erf", "relu"])
@pytest.mark.parametrize("cov", [(1.0, 0.3, 2.0), (0.5, -0.4, 0.5), (2.0, 1.9, 2.0)])
def test_nngp_closed_form_against_monte_carlo(act, cov):
    s11, s12, s22 = cov
    C = np.array([[s11, s12], [s12, s22]])
    z = np.random.default_rng(0).multivariate_normal(np.zeros(2), C, size=400_000)
    f = ActivationKind(act)
    prod = f(z[:, 0]) * f(z[:, 1])
    se = prod.std() / math.sqrt(len(prod))
    assert abs(prod.mean() - nngp_closed_form(act, s11, s12, s22)) < 4 * se


def test_nngp_closed_form_domain():
    with pytest.raises(DomainError):
        nngp_closed_form("erf", 1.0, 2.0, 1.0)
    with pytest.raises(DomainError):
        nngp_closed_form("erf", 0.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        nngp_closed_form("tanh", 1.0, 0.0, 1.0)


def test_activation_derivatives():
    x = np.linspace(-2, 2, 9) + 0.05
    for act in ActivationKind:
        num = (act(x + 1e-6) - act(x - 1e-6)) / 2e-6
        np.testing.assert_allclose(act.derivative(x), num, atol=1e-6)


def test_kernel_matrix_rejects_non_psd():
    with pytest.raises(ContractError):
        KernelMatrix(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ContractError):
        KernelMatrix(np.eye(2), provenance="guess")


def test_sample_measure_conventions():
    F = np.random.default_rng(1).normal(size=(30, 12))
    K = empirical_kernel(F, variance_scale=2.0)
    np.testing.assert_allclose(K.values, 2.0 / 30 * F.T @ F)
    phi = np.random.default_rng(2).normal(size=12)
    assert abs(kernel_expectation(K, phi) - phi @ K.values @ phi / 144) < 1e-12
    assert abs(rkhs_norm(K, phi) - phi @ np.linalg.solve(K.values, phi)) < 1e-8 * rkhs_norm(K, phi)


def test_feature_basis_modes_are_orthonormal_under_sample_measure():
    F = np.random.default_rng(3).normal(size=(50, 20))
    K = empirical_kernel(F)
    basis = FeatureBasis.from_kernel(K)
    modes = np.stack([basis.mode(i) for i in range(20)])
    np.testing.assert_allclose(modes @ modes.T / 20, np.eye(20), atol=1e-10)
    assert basis.eigenvalue(0) >= basis.eigenvalue(1) >= basis.eigenvalue(19)
    # operator K / P' applied to a mode returns eigenvalue * mode
    np.testing.assert_allclose(K.values @ modes[0] / 20, basis.eigenvalue(0) * modes[0], atol=1e-9)
    coords = basis.project("m3", modes[3])
    assert abs(coords[3] - 1.0) < 1e-10
    with pytest.raises(DomainError):
        basis.mode(20)


def test_sherman_morrison_limits():
    assert sherman_morrison_rkhs(2.0, 0.0) == 2.0
    assert abs(sherman_morrison_rkhs(1e3, 1e6) - 1e-6) < 1e-12
    with pytest.raises(DomainError):
        sherman_morrison_rkhs(0.0, 1.0)
    with pytest.raises(DomainError):
        sherman_morrison_rkhs(1.0, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(0, 1e3))
def test_sherman_morrison_is_monotone_and_bounded(R, c):
    out = sherman_morrison_rkhs(R, c)
    assert 0 < out <= R
    assert out <= 1 / c + 1e-12 if c > 0 else True


def test_readout_overlap_against_stein_identity():
    # <erf(w.x), x1> = w1 * (2/sqrt(pi)) / sqrt(1 + 2|w|^2) for x ~ N(0, I)
    d, n = 10, 20000
    mean, se = readout_overlap_sq("erf", 1, d, 1.0, n, RngStream(4))
    w = np.random.default_rng(5).normal(size=(200_000, d)) / math.sqrt(d)
    ref = w[:, 0] ** 2 * 4 / (math.pi * (1 + 2 * np.sum(w * w, axis=1)))
    ref_se = ref.std() / math.sqrt(len(ref))
    assert abs(mean - ref.mean()) < 4 * math.hypot(se, ref_se)


def test_spike_rkhs_equals_width_ratio():
    for M in (1, 2, 4, 8):
        row = run_spike_experiment(SpikeConfig(d=16, N=120, M=M, Pprime=400))
        assert abs(row["rkhs_of_sigma_phi"] / row["predicted"] - 1) < 1e-6


def test_gfl_rows_and_expectation_bound():
    rows = run_gfl_propagation(GFLConfig(d=12, N1=80, N2=80, Pprime=200, D_list=(1, 4, 16)))
    assert [r["D"] for r in rows] == [1, 4, 16]
    for r in rows:
        # Cauchy-Schwarz on the sample: <g,K^-1,g> <g,K,g> >= <g,g>^2 = 1
        assert r["rkhs_phi2"] * (1 / r["inv_expectation"]) >= 1 - 1e-8
    with pytest.raises(DomainError):
        run_gfl_propagation(GFLConfig(d=4, N1=8, N2=8, Pprime=10, D_list=(0.5,)))


def test_gfl_is_seed_deterministic():
    cfg = GFLConfig(d=8, N1=40, N2=40, Pprime=100, D_list=(1, 8))
    assert run_gfl_propagation(cfg) == run_gfl_propagation(cfg)


def test_loglog_slope_exact_power():
    xs = np.array([1, 2, 4, 8.0])
    assert abs(loglog_slope(xs, 3 * xs ** -1.7) + 1.7) < 1e-12
