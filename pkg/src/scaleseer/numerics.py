"""Deterministic numerical primitives used by the other modules.

Everything here is a pure function of its inputs except ``RngStream``, which
owns a counter-based Philox generator keyed by ``(seed, stream_id)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    ConvergenceError,
    DegenerateKernelError,
    DomainError,
    NumericalError,
)

HERMITE_MAX_DEGREE = 20
_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    """Counter-based random stream.

    Two streams with equal ``(seed, stream_id)`` produce identical draws;
    distinct ``stream_id`` values select disjoint Philox keys, so streams can
    be handed to independent workers without coordination.
    """

    seed: int
    stream_id: int = 0
    _gen: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream_id = int(self.stream_id) & _MASK64

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            key = (self.stream_id << 64) | self.seed
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def child(self, stream_id: int) -> "RngStream":
        """Fresh stream with the same seed and another id."""
        return RngStream(self.seed, stream_id)

    def normal(self, size=None, scale=1.0):
        return self.gen.normal(0.0, scale, size)

    def uniform(self, size=None):
        return self.gen.random(size)

    def choice(self, values, size=None):
        return self.gen.choice(values, size=size)


@dataclass(frozen=True)
class QuadratureSpec:
    lower: float
    upper: float
    abs_tol: float = 1e-10
    max_refinements: int = 40

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise DomainError("quadrature bounds must be finite")
        if not self.lower < self.upper:
            raise DomainError(f"need lower < upper, got [{self.lower}, {self.upper}]")
        if not self.abs_tol > 0:
            raise DomainError("abs_tol must be positive")
        if self.max_refinements < 1:
            raise DomainError("max_refinements must be >= 1")


@dataclass(frozen=True)
class EighResult:
    """Symmetric eigendecomposition with ascending eigenvalues."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def hermite_normalized(m: int, x):
    """Probabilist Hermite polynomial scaled to unit Gaussian norm.

    Returns ``He_m(x) / sqrt(m!)``; ``x`` may be a scalar or an array.
    """
    if isinstance(m, bool) or int(m) != m or m < 0 or m > HERMITE_MAX_DEGREE:
        raise DomainError(f"Hermite degree must be an integer in [0, {HERMITE_MAX_DEGREE}], got {m}")
    m = int(m)
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if m == 0:
        out = prev
    else:
        cur = x.copy()
        for k in range(1, m):
            prev, cur = cur, x * cur - k * prev
        out = cur
    out = out / math.sqrt(math.factorial(m))
    return float(out) if out.ndim == 0 else out


def _checked(f, x):
    y = f(x)
    y = float(y)
    if not math.isfinite(y):
        raise NumericalError(f"integrand is not finite at x={x!r}: {y!r}")
    return y


def integrate_1d(f: Callable[[float], float], spec: QuadratureSpec,
                 breakpoints: Sequence[float] = ()) -> tuple[float, float]:
    """Adaptive Simpson quadrature with interval bisection.

    ``breakpoints`` optionally pre-split the interval (useful when narrow
    features sit at known locations). Returns ``(value, err_estimate)``.
    Raises ``ConvergenceError`` with ``best=(value, err)`` when the tolerance
    is not met within ``spec.max_refinements`` bisection levels.
    """
    a0, b0 = spec.lower, spec.upper
    edges = sorted({a0, b0, *(p for p in breakpoints if a0 < p < b0)})
    total_len = b0 - a0
    # Stack entries: a, b, fa, fm, fb, whole-interval Simpson, depth.
    stack = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = 0.5 * (a + b)
        fa, fm, fb = _checked(f, a), _checked(f, m), _checked(f, b)
        stack.append((a, b, fa, fm, fb, (b - a) * (fa + 4 * fm + fb) / 6.0, 0))

    value = 0.0
    err = 0.0
    converged = True
    while stack:
        a, b, fa, fm, fb, whole, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = _checked(f, lm), _checked(f, rm)
        h = b - a
        left = h * (fa + 4 * flm + fm) / 12.0
        right = h * (fm + 4 * frm + fb) / 12.0
        delta = left + right - whole
        local_tol = spec.abs_tol * h / total_len
        # Depth >= 2 guards against accepting a coarse panel that missed a peak.
        if (depth >= 2 and abs(delta) <= 15.0 * local_tol) or depth >= spec.max_refinements:
            if abs(delta) > 15.0 * local_tol:
                converged = False
            value += left + right + delta / 15.0
            err += abs(delta) / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, depth + 1))
            stack.append((m, b, fm, frm, fb, right, depth + 1))
    if not converged and err > spec.abs_tol:
        raise ConvergenceError(
            f"adaptive Simpson reached {spec.max_refinements} refinements with error {err:.3g}",
            best=(value, err),
        )
    return value, err


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def maximize_concave_1d(g: Callable[[float], float], bracket: tuple[float, float], tol: float = 1e-8,
                        dg: Optional[Callable[[float], float]] = None,
                        d2g: Optional[Callable[[float], float]] = None) -> tuple[float, float]:
    """Maximize a concave function on a closed interval.

    Golden-section search down to ``tol``; if first and second derivatives are
    supplied, a few guarded Newton steps polish the interior maximizer.
    Maxima at an end point are reported exactly at that end point.
    """
    lo, hi = map(float, bracket)
    if not lo < hi:
        raise DomainError(f"need lo < hi, got {bracket}")

    def G(t):
        v = float(g(t))
        if not math.isfinite(v):
            raise NumericalError(f"objective is not finite at t={t!r}")
        return v

    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    gc, gd = G(c), G(d)
    while b - a > tol:
        if gc >= gd:
            b, d, gd = d, c, gc
            c = b - _INV_PHI * (b - a)
            gc = G(c)
        else:
            a, c, gc = c, d, gd
            d = a + _INV_PHI * (b - a)
            gd = G(d)
    x, gx = (c, gc) if gc >= gd else (d, gd)

    g_lo, g_hi = G(lo), G(hi)
    if g_lo >= gx and x - lo <= 2 * tol:
        return lo, g_lo
    if g_hi >= gx and hi - x <= 2 * tol:
        return hi, g_hi

    if dg is not None and d2g is not None:
        for _ in range(20):
            h2 = float(d2g(x))
            if not (math.isfinite(h2) and h2 < 0):
                break
            step = -float(dg(x)) / h2
            x_new = min(max(x + step, lo), hi)
            g_new = G(x_new)
            if g_new < gx - 1e-12 * max(1.0, abs(gx)):
                break
            x, gx = x_new, g_new
            if abs(step) <= 1e-14 * max(1.0, abs(x)):
                break
    return x, gx


def gaussian_expectation_mc(f: Callable[[np.ndarray], np.ndarray], dim: int, n_samples: int,
                            rng: RngStream, chunk: int = 1 << 18) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of ``f(x)``, ``x ~ N(0, I_dim)``.

    ``f`` receives an ``(n, dim)`` array and returns ``n`` values.
    """
    if n_samples < 2:
        raise DomainError("n_samples must be >= 2")
    shift = None
    s1 = s2 = 0.0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        vals = np.asarray(f(rng.normal((n, dim))), dtype=float).reshape(n)
        if not np.all(np.isfinite(vals)):
            raise NumericalError("Monte-Carlo integrand produced non-finite values")
        if shift is None:
            shift = float(vals.mean())
        c = vals - shift
        s1 += float(c.sum())
        s2 += float(c @ c)
        done += n
    mean_c = s1 / n_samples
    var = max(s2 / n_samples - mean_c ** 2, 0.0) * n_samples / (n_samples - 1)
    return shift + mean_c, math.sqrt(var / n_samples)


def eigh(K) -> EighResult:
    """Eigendecomposition of a symmetric matrix, ascending eigenvalues."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {K.shape}")
    scale = float(np.max(np.abs(K))) if K.size else 0.0
    if scale > 0 and float(np.max(np.abs(K - K.T))) > 1e-10 * scale:
        raise ContractError("matrix is not symmetric within 1e-10 relative")
    if not np.all(np.isfinite(K)):
        raise NumericalError("matrix has non-finite entries")
    w, v = np.linalg.eigh(0.5 * (K + K.T))
    return EighResult(w, v)


def pinv_quadform(K, v, rel_cutoff: float = 1e-10, eig: Optional[EighResult] = None) -> float:
    """``v^T K^+ v`` keeping only eigenvalues above ``rel_cutoff * lambda_max``."""
    if not 0 < rel_cutoff < 1:
        raise DomainError("rel_cutoff must lie in (0, 1)")
    if eig is None:
        eig = eigh(K)
    lam = eig.eigenvalues
    lam_max = float(lam[-1]) if lam.size else 0.0
    if not lam_max > 0:
        raise DegenerateKernelError("kernel has no positive eigenvalue")
    keep = lam > rel_cutoff * lam_max
    coords = eig.eigenvectors[:, keep].T @ np.asarray(v, dtype=float)
    return float(np.sum(coords ** 2 / lam[keep]))
