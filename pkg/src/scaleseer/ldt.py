"""Large-deviation sample complexity of a two-layer erf network.

The target is the cubic Hermite feature of ``w*.x`` with Gaussian inputs;
a neuron's contribution is its squared ``He_3/3!`` coefficient, which
depends on the teacher overlap ``beta = w.w*`` only, and the prior probability of reaching alignment
``alpha`` decays as ``exp(-E(alpha))`` with

    E(alpha) = max_t [t alpha - N log Z1(t)],
    Z1(t) = int dbeta sqrt(d/2pi) exp(-(d/2) S(beta; t)),
    S(beta; t) = beta^2 - 4 t^2 / (9 pi N d) * g(beta),
    g(beta) = (beta / sqrt(3 + 2 beta^2))^6.

The sample complexity lower bound is ``P* = 2 kappa E(alpha) / k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, DivergentIntegralError, DomainError, NoSaddleError
from .numerics import QuadratureSpec, RngStream, integrate_1d, maximize_concave_1d

FOUR_OVER_9PI = 4.0 / (9.0 * math.pi)
PROFILE_POINTS = 2001
_REL_TOL = 1e-11


@dataclass(frozen=True)
class TwoLayerLDTConfig:
    d: int
    N: int
    alpha: float = 0.9
    kappa: float = 1.0
    k_factor: float = 1.0
    m: int = 3

    def __post_init__(self):
        if self.d < 1 or self.N < 1:
            raise DomainError("d and N must be >= 1")
        # alpha = 1 is admitted for the mean-predictor comparison.
        if not 0 < self.alpha <= 1:
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.kappa > 0:
            raise DomainError("kappa must be positive")
        if not self.k_factor > 0:
            raise DomainError("k_factor must be positive")
        if self.m != 3:
            raise DomainError("the closed form covers the cubic Hermite target only (m = 3)")


def plateau(beta):
    """``(beta / sqrt(3 + 2 beta^2))^6``, bounded by 1/8."""
    b2 = np.square(beta)
    return b2 ** 3 / (3.0 + 2.0 * b2) ** 3


def plateau_d2(beta):
    """Second derivative of ``plateau``."""
    b2 = np.square(beta)
    return 54.0 * b2 * b2 * (5.0 - 2.0 * b2) / (3.0 + 2.0 * b2) ** 5


def a_sigma_sq(beta):
    """Squared cubic Hermite coefficient of one erf neuron, ``<erf(w.x), He_3(w*.x) / 3!>^2``.

    This is ``1/6`` of the squared overlap with the unit-norm target ``He_3 / sqrt(6)``.
    """
    return FOUR_OVER_9PI * plateau(beta)


def action_S(beta, t: float, cfg: TwoLayerLDTConfig):
    return np.square(beta) - 4.0 * t * t / (9.0 * math.pi * cfg.N * cfg.d) * plateau(beta)


def _tilt(t: float, cfg: TwoLayerLDTConfig) -> float:
    # coefficient of g(beta) in (d/2) S
    return 2.0 * t * t / (9.0 * math.pi * cfg.N)


@dataclass
class _TiltedNeuron:
    """The single-neuron measure ``exp(-(d/2) S(beta; t))`` on a window ``[-B, B]``."""

    cfg: TwoLayerLDTConfig
    t: float
    window: float = 0.0
    h_min: float = 0.0
    side_beta: float = 0.0
    _cache: dict = field(default_factory=dict)
    _side_candidate: float = 0.0

    def __post_init__(self):
        d = self.cfg.d
        self.tau = _tilt(self.t, self.cfg)
        B = 6.0 / math.sqrt(d) + 3.0
        for _ in range(60):
            self._locate_min(B)
            tail = self._tail(B)
            if tail < 1e-12 * self.integral(0):
                break
            B *= 1.5
            self._cache.clear()
        else:
            raise DivergentIntegralError(f"integrand does not decay within |beta| <= {B:.3g}")
        self.window = B

    def h_raw(self, beta):
        return 0.5 * self.cfg.d * np.square(beta) - self.tau * plateau(beta)

    def h(self, beta):
        return self.h_raw(beta) - self.h_min

    def _locate_min(self, B):
        grid = np.linspace(0.0, B, 4001)
        vals = self.h_raw(grid)
        i = int(np.argmin(vals))
        if i == 0:
            self.h_min, self.side_beta, self._side_candidate = 0.0, 0.0, 0.0
            return
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        b, neg = maximize_concave_1d(lambda x: -float(self.h_raw(x)), (lo, hi), tol=1e-12 * max(B, 1.0))
        self.h_min = min(-neg, 0.0)
        self.side_beta = b if -neg < 0 else 0.0
        self._side_candidate = b

    def _tail(self, B):
        hB = float(self.h(B))
        slope = self.cfg.d * B - self.tau * 18 * B ** 5 / (3 + 2 * B * B) ** 4
        return math.exp(-hB) / max(slope, 1e-300)

    def integral(self, power: int = 0) -> float:
        """``int_{-B}^{B} g^power exp(-h)`` (``h`` shifted to zero minimum)."""
        if power in self._cache:
            return self._cache[power]
        B = self.window if self.window else 6.0 / math.sqrt(self.cfg.d) + 3.0
        d, tau, hm = self.cfg.d, self.tau, self.h_min

        def f(b):
            b2 = b * b
            g = b2 ** 3 / (3.0 + 2.0 * b2) ** 3
            return g ** power * math.exp(-(0.5 * d * b2 - tau * g) + hm)

        # Rough trapezoid scale sets a relative tolerance.
        grid = np.linspace(0.0, B, 2001)
        gg = plateau(grid)
        rough = float(np.trapezoid(gg ** power * np.exp(-(self.h_raw(grid) - hm)), grid))
        scale = max(rough, 1e-300)
        breaks = [0.5 / math.sqrt(d), 2.0 / math.sqrt(d)]
        sb = self._side_candidate
        if sb > 0:
            breaks += [0.5 * sb, sb, 1.5 * sb]
        val, _ = integrate_1d(f, QuadratureSpec(0.0, B, _REL_TOL * scale, 50), breakpoints=breaks)
        val *= 2.0
        self._cache[power] = val
        return val

    def log_z1(self) -> float:
        return 0.5 * math.log(self.cfg.d / (2 * math.pi)) - self.h_min + math.log(self.integral(0))

    def mean_g(self) -> float:
        return self.integral(1) / self.integral(0)

    def var_g(self) -> float:
        m = self.mean_g()
        return max(self.integral(2) / self.integral(0) - m * m, 0.0)


def log_z1(t: float, cfg: TwoLayerLDTConfig) -> float:
    """Log of the normalized single-neuron partition function; zero at ``t = 0``."""
    if t == 0:
        return 0.0
    return _TiltedNeuron(cfg, abs(t)).log_z1()


@dataclass
class SaddleResult:
    cfg: TwoLayerLDTConfig
    t_star: float
    energy: float
    p_star: float
    beta_grid: np.ndarray  # columns: beta, H(beta)
    stationarity_residual: float
    fixed_point_residual: float
    window: float

    def to_json(self) -> dict:
        c = self.cfg
        return {
            "cfg": {"d": c.d, "N": c.N, "alpha": c.alpha, "kappa": c.kappa, "k_factor": c.k_factor, "m": c.m},
            "t_star": self.t_star, "energy": self.energy, "p_star": self.p_star,
            "stationarity_residual": self.stationarity_residual,
            "fixed_point_residual": self.fixed_point_residual,
        }


def _profile(neuron: _TiltedNeuron) -> np.ndarray:
    beta = np.linspace(-neuron.window, neuron.window, PROFILE_POINTS)
    H = np.maximum(neuron.h(beta), 0.0)
    return np.column_stack([beta, H])


def solve_t_star(cfg: TwoLayerLDTConfig) -> SaddleResult:
    """Legendre maximization ``E(alpha) = max_t [t alpha - N log Z1(t)]``."""
    alpha, N = cfg.alpha, cfg.N
    cache = {}

    def neuron(t):
        if t not in cache:
            cache[t] = _TiltedNeuron(cfg, t)
        return cache[t]

    def objective(t):
        return t * alpha - N * (neuron(t).log_z1() if t > 0 else 0.0)

    def slope(t):
        return alpha - FOUR_OVER_9PI * t * (neuron(t).mean_g() if t > 0 else 0.0)

    def curvature(t):
        nt = neuron(t)
        return -FOUR_OVER_9PI * (nt.mean_g() + 4 * t * t / (9 * math.pi * N) * nt.var_g())

    # The tilted mean of g never exceeds 1/8, so the maximizer is at least 18 pi alpha.
    hi = 18.0 * math.pi * alpha * 2.0
    while slope(hi) >= 0:
        hi *= 2.0
        if hi > 1e12:
            raise NoSaddleError(f"alignment {alpha} is not reachable: objective increases without bound")
    t_star, energy = maximize_concave_1d(objective, (0.0, hi), tol=1e-9 * hi, dg=slope, d2g=curvature)
    if t_star <= 0:
        raise NoSaddleError("maximizer at t = 0")
    nt = neuron(t_star)
    stationarity = abs(slope(t_star))
    fixed_point = (9 * math.pi * alpha / 4) * nt.integral(0) / nt.integral(1)
    return SaddleResult(
        cfg=cfg, t_star=t_star, energy=energy,
        p_star=2.0 * cfg.kappa * energy / cfg.k_factor,
        beta_grid=_profile(nt),
        stationarity_residual=stationarity,
        fixed_point_residual=abs(fixed_point - t_star) / t_star,
        window=nt.window,
    )


def beta_outlier_profile(result: SaddleResult) -> np.ndarray:
    """``(beta, H(beta))`` rows of the tilted single-neuron action at ``t*``."""
    return result.beta_grid


def profile_curvature(result: SaddleResult, beta) -> np.ndarray:
    """Analytic ``d^2 H / d beta^2`` at the solved tilt."""
    return result.cfg.d - _tilt(result.t_star, result.cfg) * plateau_d2(beta)


def has_side_minima(result: SaddleResult, upper: float = 2.0) -> bool:
    """True when the profile's curvature turns negative somewhere on ``(0, upper)``."""
    beta = np.linspace(1e-6, upper, 4001)
    return bool(np.any(profile_curvature(result, beta) < 0))


@dataclass
class McTStar:
    t_star: float
    stderr: float
    ess: float
    iterations: int


def two_layer_sampler(d: int, N: int) -> Callable[[int, RngStream], np.ndarray]:
    """Prior samples of ``A^2 = sum_i A_sigma,i^2`` for the two-layer erf network."""
    def sample(n, rng):
        out = np.zeros(n)
        for start in range(0, n, 65536):
            m = min(65536, n - start)
            beta = rng.normal((m, N)) / math.sqrt(d)
            out[start:start + m] = a_sigma_sq(beta).sum(axis=1)
        return out
    return sample


def _rhs(t, A2, alpha, N, s2):
    logw = s2 * t * t * A2 / (2.0 * N)
    w = np.exp(logw - logw.max())
    return alpha * N * w.sum() / (s2 * (w * A2).sum()), w


def mc_t_star_general(sampler, alpha: float, n_mc: int, rng: RngStream, N_prev: int,
                      sigma_sq: float = 1.0, damping: float = 0.5, rtol: float = 1e-4,
                      max_iter: int = 500, n_batches: int = 20) -> McTStar:
    """Monte-Carlo solution of ``t = alpha N E[e^{s t^2 A^2/2N}] / (s E[A^2 e^{...}])``.

    ``sampler(n, rng)`` returns prior draws of ``A^2``. The error estimate
    combines batch means of the right-hand side at the fixed point with the
    local slope of the map.
    """
    if n_mc < 10_000:
        raise DomainError("n_mc must be at least 10^4")
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    A2 = np.asarray(sampler(n_mc, rng), dtype=float)
    t = alpha * N_prev / (sigma_sq * A2.mean())
    for it in range(1, max_iter + 1):
        r, w = _rhs(t, A2, alpha, N_prev, sigma_sq)
        if not math.isfinite(r):
            raise ConvergenceError("fixed-point map is not finite", best=t)
        t_new = (1 - damping) * t + damping * r
        if abs(t_new - t) <= rtol * t:
            t = t_new
            break
        t = t_new
    else:
        raise ConvergenceError("fixed-point iteration did not converge; importance weights too heavy-tailed",
                               best=t)
    r, w = _rhs(t, A2, alpha, N_prev, sigma_sq)
    ess = float(w.sum() ** 2 / (w * w).sum())
    if ess < 10:
        raise ConvergenceError(f"importance-sampling effective size {ess:.1f} is too small", best=t)
    batches = np.array_split(A2, n_batches)
    vals = np.array([_rhs(t, b, alpha, N_prev, sigma_sq)[0] for b in batches])
    err_rhs = float(vals.std(ddof=1) / math.sqrt(n_batches))
    h = 1e-4 * t
    deriv = (_rhs(t + h, A2, alpha, N_prev, sigma_sq)[0] - _rhs(t - h, A2, alpha, N_prev, sigma_sq)[0]) / (2 * h)
    stderr = err_rhs / max(abs(1 - deriv), 1e-12)
    return McTStar(float(t), stderr, ess, it)


def mean_predictor_ty(cfg: TwoLayerLDTConfig, damping: float = 0.5, tol: float = 1e-8,
                      max_iter: int = 500) -> float:
    """Self-consistent ``t = 1 / (kappa + (4/9pi) <g>_t)`` for the mean predictor.

    ``<g>_t`` is the tilted single-neuron average used by ``solve_t_star``.
    Damped iteration in ``log t``, safeguarded by a bracket on the sign of
    ``t (kappa + (4/9pi) <g>_t) - 1``, which increases with ``t``.
    """
    def rhs(t):
        return 1.0 / (cfg.kappa + FOUR_OVER_9PI * _TiltedNeuron(cfg, t).mean_g())

    lo, hi = 0.0, math.inf
    t = min(1.0 / cfg.kappa, 18.0 * math.pi)
    for _ in range(max_iter):
        r = rhs(t)
        if abs(r - t) <= tol * t:
            return r
        if r > t:
            lo = max(lo, t)
        else:
            hi = min(hi, t)
        t_new = math.exp((1 - damping) * math.log(t) + damping * math.log(r))
        if not lo < t_new < hi:
            t_new = math.sqrt(lo * hi) if lo > 0 and math.isfinite(hi) else (2 * lo if lo > 0 else 0.5 * hi)
        t = t_new
    raise ConvergenceError("mean-predictor fixed point did not converge", best=t)
