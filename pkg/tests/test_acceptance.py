"""Acceptance suite: one test per numbered criterion.

Fast criteria run by default; the two Langevin ensemble criteria need
``--slow``. The terminal summary prints one PASS/FAIL/SKIP line per criterion.
"""

import json
import math
import time

import numpy as np
import pytest

from scaleseer.cli import main
from scaleseer.kernels import (
    GFLConfig,
    KernelMatrix,
    loglog_slope,
    rkhs_norm,
    run_gfl_propagation,
    sherman_morrison_rkhs,
)
from scaleseer.ldt import TwoLayerLDTConfig, beta_outlier_profile, profile_curvature, solve_t_star
from scaleseer.numerics import RngStream
from scaleseer.scalecalc import (
    ArchitectureSpec,
    PatternKind,
    build_budget,
    canonical_candidates,
    extract_exponent,
    select_winner,
)
from scaleseer.sgldlab import NetworkSpec, TrainConfig, langevin, potential_and_grad
from scaleseer.sgldlab.ensemble import run_ensemble
from scaleseer.sgldlab.measure import alignment_from_values, xent_mc_oracle, xent_second_order_coeff
from scaleseer.kernels import nngp_closed_form
from scaleseer.numerics import hermite_normalized

EXP_TOL = 0.01
PIVOTS = [1e4, 1e6, 1e8]


def _fix(value):
    return (value, 0)


def _fit(arch, patterns, relation):
    return extract_exponent(build_budget(arch, patterns), relation, PIVOTS)


def _predict(tmp_path, *argv):
    t0 = time.perf_counter()
    code = main(["--out", str(tmp_path), "--quiet", "--no-figures", "predict", *argv])
    elapsed = time.perf_counter() - t0
    run = sorted(p for p in tmp_path.iterdir() if p.is_dir())[-1]
    return code, json.loads((run / "results.json").read_text()), elapsed


@pytest.mark.criterion(1, "three-layer pattern table (exponents 3, 1, 1; minimizer scalings)")
def test_three_layer_table(tmp_path):
    code, res, elapsed = _predict(tmp_path, "--arch", "fcn3", "--m", "3", "--relation", "N1=N2=d", "--d", "1e6")
    assert code == 0 and elapsed < 1.0
    exps = {r["pattern"]: r["exponent"] for r in res["rows"]}
    assert abs(exps["GP-GP"] - 3) <= EXP_TOL
    assert abs(exps["GP-Sp"] - 1) <= EXP_TOL
    assert abs(exps["Sp-Mag"] - 1) <= EXP_TOL

    arch = ArchitectureSpec("fcn3", ("hermite", 3))
    cands = canonical_candidates(arch)
    # M2 = sqrt(N2 / d): exponent +1/2 in N2 and -1/2 in d
    m2_n2 = _fit(arch, cands["GP-Sp"], {"N2": (1, 1), "d": _fix(1e3), "N1": _fix(1e3)}).minimizer_exponents["M2"]
    m2_d = _fit(arch, cands["GP-Sp"], {"d": (1, 1), "N2": _fix(1e6), "N1": _fix(1e6)}).minimizer_exponents["M2"]
    assert abs(m2_n2 - 0.5) <= EXP_TOL and abs(m2_d + 0.5) <= EXP_TOL
    # M1 = (N1 N2 / d^2)^(1/3)
    for rel, expected in (({"N1": (1, 1), "N2": _fix(1e3), "d": _fix(1e3)}, 1 / 3),
                          ({"N2": (1, 1), "N1": _fix(1e3), "d": _fix(1e3)}, 1 / 3),
                          ({"d": (1, 1), "N1": _fix(1e6), "N2": _fix(1e6)}, -2 / 3)):
        m1 = _fit(arch, cands["Sp-Mag"], rel).minimizer_exponents["M1"]
        assert abs(m1 - expected) <= EXP_TOL


@pytest.mark.criterion(2, "two-layer pattern energies and the lazy winner at N = d^10")
@pytest.mark.parametrize("m", [1, 3])
def test_two_layer_energies(m):
    t0 = time.perf_counter()
    arch = ArchitectureSpec("fcn2", ("hermite", m))
    P = PatternKind
    along_d = {"d": (1, 1), "N": _fix(1e4)}
    along_N = {"N": (1, 1), "d": _fix(1e2)}
    assert abs(_fit(arch, [P.gp()], along_d).exponent - m) <= EXP_TOL
    gfl_d = _fit(arch, [P.gfl()], along_d)
    gfl_N = _fit(arch, [P.gfl()], along_N)
    assert abs(gfl_d.exponent - m / (m + 1)) <= EXP_TOL
    assert abs(gfl_N.exponent - m / (m + 1)) <= EXP_TOL
    # D = (d^m / N)^(1/(m+1))
    assert abs(gfl_d.minimizer_exponents["D"] - m / (m + 1)) <= EXP_TOL
    assert abs(gfl_N.minimizer_exponents["D"] + 1 / (m + 1)) <= EXP_TOL
    sp_d = _fit(arch, [P.mspec()], along_d)
    sp_N = _fit(arch, [P.mspec()], along_N)
    assert abs(sp_d.exponent - 0.5) <= EXP_TOL and abs(sp_N.exponent - 0.5) <= EXP_TOL
    assert abs(sp_d.minimizer_exponents["M"] + 0.5) <= EXP_TOL
    assert abs(sp_N.minimizer_exponents["M"] - 0.5) <= EXP_TOL

    cands = list(canonical_candidates(arch).values())
    d = 30.0
    lazy = select_winner(arch, cands, {"d": d, "N": d ** 10})[0]
    assert lazy.label == "GP"
    if m == 3:
        assert select_winner(arch, cands, {"d": d, "N": d})[0].label != "GP"
    assert time.perf_counter() - t0 < 1.0


@pytest.mark.criterion(3, "convolutional and mean-field scalings")
def test_cnn_and_mean_field(tmp_path):
    code, res, _ = _predict(tmp_path, "--arch", "cnn", "--m", "3", "--relation", "N=Nw=S")
    assert code == 0
    exps = {r["pattern"]: r["exponent"] for r in res["rows"]}
    assert abs(exps["MSpec"] - 1.5) <= EXP_TOL
    # with P* proportional to the energy and S = d^(1/2) patches of size d^(1/2), P* ~ d^(3/4)
    assert abs(exps["MSpec"] / 2 - 0.75) <= EXP_TOL

    arch = ArchitectureSpec("fcn2", ("hermite", 3), regime="mean_field")
    sp = [PatternKind.mspec()]
    along_d = _fit(arch, sp, {"d": (1, 1), "N": _fix(1e8), "chi": _fix(1e8)})
    along_N = _fit(arch, sp, {"N": (1, 1), "chi": (1, 1), "d": _fix(1e2)})
    assert abs(along_d.exponent - 0.5) <= EXP_TOL and abs(along_N.exponent - 1.0) <= EXP_TOL
    assert abs(along_d.minimizer_exponents["M"] + 0.5) <= EXP_TOL
    assert abs(along_N.minimizer_exponents["M"] - 1.0) <= EXP_TOL


@pytest.mark.criterion(4, "attention scalings and the lazy/specialized boundary near H = sqrt(L d^3)")
def test_attention():
    arch = ArchitectureSpec("attention", ("attention_cubic",))
    gp, sp = [PatternKind.gp()], [PatternKind.mspec()]
    assert abs(_fit(arch, gp, {"L": (1, 1), "d": _fix(10), "H": _fix(2)}).exponent - 1) <= EXP_TOL
    assert abs(_fit(arch, gp, {"d": (1, 1), "L": _fix(10), "H": _fix(2)}).exponent - 3) <= EXP_TOL
    assert abs(_fit(arch, sp, {"H": (1, 1), "L": _fix(1e3), "d": _fix(10)}).exponent - 0.5) <= EXP_TOL
    assert abs(_fit(arch, sp, {"L": (1, 1), "H": _fix(2), "d": _fix(10)}).exponent - 0.5) <= EXP_TOL
    assert abs(_fit(arch, sp, {"d": (1, 1), "H": _fix(2), "L": _fix(10)}).exponent - 1.5) <= EXP_TOL

    L, d = 100.0, 10.0
    boundary = math.sqrt(L * d ** 3)
    cands = list(canonical_candidates(arch).values())

    def winner(H):
        return select_winner(arch, cands, {"L": L, "d": d, "H": H})[0].label

    assert winner(boundary / 10) != "GP"
    above = winner(boundary * 10)
    assert above == "GP", f"winner at H = 10 sqrt(L d^3) = {boundary * 10:.0f} is {above}"


@pytest.mark.criterion(5, "large-deviation saddle: stationarity and P* slope in d")
def test_ldt_solver():
    t0 = time.perf_counter()
    ds = [20, 40, 80, 160]
    results = [solve_t_star(TwoLayerLDTConfig(d=d, N=d, alpha=0.9)) for d in ds]
    for r in results:
        assert r.fixed_point_residual <= 1e-4
    slope = loglog_slope(ds, [r.p_star for r in results])
    assert abs(slope - 1.0) <= 0.15
    assert time.perf_counter() - t0 < 30


@pytest.mark.criterion(6, "beta profile has symmetric side minima near P*")
def test_beta_profile_side_minima():
    r = solve_t_star(TwoLayerLDTConfig(d=40, N=40, alpha=0.9))
    prof = beta_outlier_profile(r)
    beta, H = prof[:, 0], prof[:, 1]
    np.testing.assert_allclose(H, H[::-1], atol=1e-9 * H.max())
    interior = np.flatnonzero((H[1:-1] < H[:-2]) & (H[1:-1] < H[2:])) + 1
    side = beta[interior][np.abs(beta[interior]) > 0.05]
    assert side.size >= 2 and np.any(side > 0) and np.any(side < 0)
    assert abs(side.max() + side.min()) < 2 * (beta[1] - beta[0])
    b_side = side.max()
    # curvature changes sign between the origin and the side minimum
    curv = profile_curvature(r, np.linspace(1e-3, b_side, 400))
    assert curv[0] > 0 and curv.min() < 0 and profile_curvature(r, b_side) > 0


@pytest.mark.criterion(7, "rank-one RKHS update and pseudo-inverse against dense inverses")
def test_sherman_morrison_cases():
    g = np.random.default_rng(20261016)
    for case in range(100):
        rank = 8 if case % 2 == 0 else int(g.integers(2, 8))
        A = g.normal(size=(8, rank))
        K0 = A @ A.T
        phi = A @ g.normal(size=rank)  # in the support of K0
        c = float(np.exp(g.uniform(-3, 3)))
        K1 = K0 + c * np.outer(phi, phi)
        R0 = rkhs_norm(KernelMatrix(K0), phi)
        R1 = rkhs_norm(KernelMatrix(K1), phi)
        inv = np.linalg.inv if rank == 8 else np.linalg.pinv
        oracle0 = float(phi @ inv(K0) @ phi)
        oracle1 = float(phi @ inv(K1) @ phi)
        assert abs(R0 - oracle0) <= 1e-9 * oracle0
        assert abs(R1 - oracle1) <= 1e-9 * oracle1
        assert abs(sherman_morrison_rkhs(R0, c) - oracle1) <= 1e-9 * oracle1


@pytest.mark.criterion(8, "GFL propagation slope and inverse-expectation match at desk scale")
def test_gfl_propagation_desk_scale():
    t0 = time.perf_counter()
    rows = run_gfl_propagation(GFLConfig(d=60, N1=500, N2=500, Pprime=1500, D_list=(1, 2, 4, 8, 16, 32, 40)))
    assert time.perf_counter() - t0 < 300
    D = [r["D"] for r in rows]
    rk = [r["rkhs_phi2"] for r in rows]
    slope = loglog_slope(D, rk)
    mismatch = max(abs(r["rkhs_phi2"] - r["inv_expectation"]) / r["rkhs_phi2"] for r in rows)
    assert -2.5 <= slope <= -1.5, f"slope {slope:.3f}"
    assert mismatch <= 0.5, f"max relative mismatch {mismatch:.3f}"


def _nngp_alignment_variance(X, y):
    """Prior variance of the test alignment for a two-layer erf network with unit variances."""
    d = X.shape[1]
    G = X @ X.T / d
    diag = np.diag(G)
    K = nngp_closed_form("erf", diag[:, None], G, diag[None, :])
    n = y.size
    return float(y @ K @ y) / n ** 2 / np.mean(y * y) ** 2


@pytest.mark.criterion(9, "data-free chains reproduce prior variances and GP alignment spread")
def test_prior_calibration():
    t0 = time.perf_counter()
    d, N, R = 4, 50, 400
    net = NetworkSpec("fcn2", d, N1=N)
    cfg = TrainConfig(P=0, n_steps=5000, burn_in=3000, thin=500)
    theta = [np.zeros((R,) + s) for s in net.param_shapes()]

    def grad_fn(th):
        return potential_and_grad(th, net, None, cfg)

    noise = [RngStream(9, 3 * k + 1) for k in range(R)]
    res = langevin(grad_fn, theta, 1e-3, cfg.n_steps, cfg.burn_in, cfg.thin, noise, list(net.prior_variances))
    W = np.stack([s[0] for s in res.samples])
    a = np.stack([s[1] for s in res.samples])
    assert abs(W.var() * d - 1) <= 0.05
    assert abs(a.var() * N - 1) <= 0.05

    X = RngStream(9, 1 << 40).normal((4096, d))
    y = hermite_normalized(3, X[:, 0])
    A = []
    for Ws, As in zip(W, a):
        f = np.einsum("rn,rpn->rp", As, net.activation(np.einsum("pd,rnd->rpn", X, Ws)))
        A.append(alignment_from_values(f, y)[0])
    A = np.concatenate(A)
    predicted = _nngp_alignment_variance(X, y)
    assert abs(A.var() / predicted - 1) <= 0.15
    assert time.perf_counter() - t0 < 300


@pytest.mark.criterion(10, "specialized-neuron count grows like sqrt(N) (slow tier)")
@pytest.mark.slow
def test_specialized_count_scaling():
    res = run_ensemble("two_layer_width_scan", {"d": 24, "P_per_d": 40, "kappa": 0.25, "N1": [24, 96, 384],
                                                "replicas": 50})
    summary = res.summary()
    assert all(s["n_ok"] == 50 for s in summary)
    N = [s["N1"] for s in summary]
    counts = [s["spec_count_l1_mean"] for s in summary]
    slope = loglog_slope(N, counts)
    assert abs(slope - 0.5) <= 0.2, f"counts {counts}, slope {slope:.3f}"


@pytest.mark.criterion(11, "three-layer transition from first- to second-layer specialization (slow tier)")
@pytest.mark.slow
def test_three_layer_transition():
    res = run_ensemble("three_layer_N1_scan", {"d": 10, "N2": 10, "N1": [10, 80, 640], "replicas": 20})
    summary = sorted(res.summary(), key=lambda s: s["N1"])
    assert all(s["n_ok"] == 20 for s in summary)
    l1 = [s["spec_count_l1_mean"] for s in summary]
    l2 = [s["spec_count_l2_mean"] for s in summary]
    assert l1[0] > 0 and l1[1] > 0, f"first-layer counts {l1}"
    initial = math.log(l1[1] / l1[0]) / math.log(80 / 10)
    assert abs(initial - 1 / 3) <= 0.15, f"first-layer counts {l1}, initial slope {initial:.3f}"
    assert l2[-1] > l1[-1], f"at N1=640: second-layer {l2[-1]}, first-layer {l1[-1]}"


@pytest.mark.criterion(12, "Gaussian cross-entropy: entropic leading term plus second-order correction")
@pytest.mark.parametrize("d_o", [2, 10])
def test_xent_expansion(d_o):
    P, s2 = 1, 0.01
    mc, se = xent_mc_oracle([s2] * d_o, 10_000_000, RngStream(12, d_o))
    predicted = P * math.log(d_o) + xent_second_order_coeff(d_o) * d_o * s2
    assert abs(mc - predicted) <= 3 * se
    # the correction vanishes relative to P log d_o as the variance shrinks
    rel = []
    for v in (1e-1, 1e-2, 1e-3):
        m, _ = xent_mc_oracle([v] * d_o, 1_000_000, RngStream(13, d_o))
        rel.append(abs(m - P * math.log(d_o)) / (P * math.log(d_o)))
    assert rel[0] > rel[1] > rel[2] and rel[2] < 1e-2
