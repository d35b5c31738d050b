"""NNGP kernels, RKHS norms and kernel-propagation experiments.

Functions are represented by their values on a finite sample of ``P'``
inputs. Inner products use the sample measure, ``<f, g> = f.g / P'``, so the
integral operator of a kernel matrix ``K`` is ``K / P'`` and the RKHS norm of
a function ``phi`` is ``phi^T K^+ phi``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, DomainError
from .numerics import EighResult, RngStream, eigh, hermite_normalized, pinv_quadform

DEFAULT_CUTOFF = 1e-10
_SQRT_PI = math.sqrt(math.pi)


class ActivationKind(str, enum.Enum):
    ERF = "erf"
    RELU = "relu"
    POLY1X2 = "poly1x2"  # 1 + x + x^2, propagation experiments only

    def __call__(self, x):
        if self is ActivationKind.ERF:
            return _erf(x)
        if self is ActivationKind.RELU:
            return np.maximum(x, 0.0)
        return 1.0 + x + x * x

    def derivative(self, x):
        if self is ActivationKind.ERF:
            return (2.0 / _SQRT_PI) * np.exp(-np.square(x))
        if self is ActivationKind.RELU:
            return (np.asarray(x) > 0).astype(float)
        return 1.0 + 2.0 * np.asarray(x)

    @classmethod
    def parse(cls, value) -> "ActivationKind":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(a.value for a in cls)
            raise DomainError(f"unknown activation {value!r}; expected one of {names}") from None



def nngp_closed_form(act, s11, s12, s22):
    """Infinite-width kernel ``E[sigma(h) sigma(h')]`` for centered Gaussian ``(h, h')``.

    Accepts scalars or broadcastable arrays of covariance entries.
    """
    act = ActivationKind.parse(act)
    s11, s12, s22 = (np.asarray(v, dtype=float) for v in (s11, s12, s22))
    if np.any(s11 <= 0) or np.any(s22 <= 0):
        raise DomainError("variances must be positive")
    norm = np.sqrt(s11 * s22)
    rho = s12 / norm
    if np.any(np.abs(rho) > 1 + 1e-12):
        raise DomainError("covariance violates |S12| <= sqrt(S11 S22)")
    rho = np.clip(rho, -1.0, 1.0)
    if act is ActivationKind.ERF:
        out = (2 / np.pi) * np.arcsin(2 * s12 / np.sqrt((1 + 2 * s11) * (1 + 2 * s22)))
    elif act is ActivationKind.RELU:
        theta = np.arccos(rho)
        out = norm * (np.sin(theta) + (np.pi - theta) * np.cos(theta)) / (2 * np.pi)
    else:
        raise DomainError("closed form available for erf and relu only")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Finite-sample realization of a kernel; checked symmetric PSD on creation."""

    values: np.ndarray
    points: Optional[np.ndarray] = None
    provenance: str = "empirical"

    def __post_init__(self):
        if self.provenance not in ("closed_form", "empirical"):
            raise ContractError(f"unknown provenance {self.provenance!r}")
        lam = self.eigen.eigenvalues
        if lam.size and lam[0] < -1e-8 * max(lam[-1], 0.0):
            raise ContractError(f"kernel is not PSD: smallest eigenvalue {lam[0]:.3g}")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @cached_property
    def eigen(self) -> EighResult:
        return eigh(self.values)


@dataclass
class FeatureBasis:
    """Mercer decomposition of the operator ``K / P'`` on the sample.

    Modes are unit-norm under the sample measure; index 0 is the top mode.
    """

    eigen: EighResult
    feature_coords: dict = field(default_factory=dict)

    @classmethod
    def from_kernel(cls, K: KernelMatrix, rel_cutoff: float = DEFAULT_CUTOFF) -> "FeatureBasis":
        lam = K.eigen.eigenvalues / K.size
        lam = np.where(lam > rel_cutoff * lam[-1], lam, 0.0)
        return cls(EighResult(lam, K.eigen.eigenvectors))

    @property
    def n_points(self) -> int:
        return self.eigen.eigenvectors.shape[0]

    def eigenvalue(self, index: int) -> float:
        return float(self.eigen.eigenvalues[self._col(index)])

    def mode(self, index: int) -> np.ndarray:
        return math.sqrt(self.n_points) * self.eigen.eigenvectors[:, self._col(index)]

    def project(self, name: str, phi) -> np.ndarray:
        """Coordinates of ``phi`` on the modes (top mode first); cached by name."""
        if name not in self.feature_coords:
            v = self.eigen.eigenvectors[:, ::-1]
            self.feature_coords[name] = v.T @ np.asarray(phi, float) / math.sqrt(self.n_points)
        return self.feature_coords[name]

    def _col(self, index: int) -> int:
        n = self.n_points
        if not 0 <= index < n:
            raise DomainError(f"mode index {index} outside spectrum of size {n}")
        return n - 1 - index


def empirical_kernel(preacts, variance_scale: float = 1.0, points=None) -> KernelMatrix:
    """``(variance_scale / N) F^T F`` for an ``N x P'`` activation matrix ``F``."""
    F = np.atleast_2d(np.asarray(preacts, dtype=float))
    n = F.shape[0]
    if n < 1:
        raise DomainError("need at least one neuron")
    return KernelMatrix((variance_scale / n) * (F.T @ F), points, "empirical")


def rkhs_norm(K: KernelMatrix, phi, rel_cutoff: float = DEFAULT_CUTOFF) -> float:
    """Sample estimate of ``<phi, K^{-1}, phi>`` on the supported subspace."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (K.size,):
        raise ContractError(f"phi has shape {phi.shape}, kernel has {K.size} points")
    return pinv_quadform(K.values, phi, rel_cutoff, eig=K.eigen)


def kernel_expectation(K: KernelMatrix, phi) -> float:
    """``<phi, K, phi>`` with both inner products under the sample measure."""
    phi = np.asarray(phi, dtype=float)
    return float(phi @ K.values @ phi) / K.size ** 2


def sherman_morrison_rkhs(R_A: float, c: float) -> float:
    """RKHS norm after adding the spike ``c u u^T`` to a kernel where ``u`` has norm ``R_A``."""
    if not R_A > 0:
        raise DomainError("R_A must be positive")
    if c < 0:
        raise DomainError("c must be non-negative")
    return R_A / (1.0 + c * R_A)


def readout_overlap_sq(act, m: int, d: int, sigma_w_sq: float, n_weights: int, rng: RngStream,
                       n_quad: int = 80) -> tuple[float, float]:
    """Mean and stderr over ``w ~ N(0, sigma_w_sq I/d)`` of ``<sigma(w.x), He_m(w*.x)>^2``.

    Times the readout variance this is ``<y, K, y>`` for the post-activation
    kernel and a normalized Hermite target. The inner product is exact up to
    quadrature: ``w.x = b z1 + r z2`` with ``b = w.w*`` and ``r = |w_perp|``.
    """
    act = ActivationKind.parse(act)
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_quad)
    weights = weights / weights.sum()
    scale = math.sqrt(sigma_w_sq / d)
    b = rng.normal(n_weights) * scale
    r = np.sqrt(rng.gen.chisquare(d - 1, n_weights)) * scale if d > 1 else np.zeros(n_weights)
    he = hermite_normalized(m, nodes)
    pre = b[:, None, None] * nodes[None, :, None] + r[:, None, None] * nodes[None, None, :]
    inner = np.einsum("kij,i,j,i->k", act(pre), weights, weights, he)
    vals = inner ** 2
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_weights))


def _gaussian_inputs(rng: RngStream, n: int, d: int, data: str) -> np.ndarray:
    x = rng.normal((n, d))
    kind, _, arg = data.partition(":")
    if kind == "iid":
        return x
    if kind == "powerlaw":
        exponent = float(arg) if arg else 1.1
        if not exponent > 1:
            raise DomainError("power-law exponent must exceed 1")
        spec = np.arange(1, d + 1, dtype=float) ** (-exponent)
        spec *= d / spec.sum()  # unit mean variance keeps first-layer preactivations O(1)
        return x * np.sqrt(spec)
    raise DomainError(f"unknown data model {data!r}; expected iid or powerlaw:<exponent>")


@dataclass(frozen=True)
class SpikeConfig:
    d: int = 40
    N: int = 400
    M: int = 20
    Pprime: int = 2000
    act: str = "erf"
    seed: int = 0
    rel_cutoff: float = DEFAULT_CUTOFF


def run_spike_experiment(cfg: SpikeConfig) -> dict:
    """Spike ``M`` of ``N`` neurons onto ``sigma(w*.x)`` and measure its RKHS norm.

    The remaining ``N - M`` rows are random prior neurons. Rows are drawn once
    per seed, so varying ``M`` only swaps prior rows for spiked ones.
    """
    if not 0 <= cfg.M <= cfg.N:
        raise DomainError("need 0 <= M <= N")
    act = ActivationKind.parse(cfg.act)
    rng = RngStream(cfg.seed, 1)
    x = rng.normal((cfg.Pprime, cfg.d))
    w_star = np.zeros(cfg.d)
    w_star[0] = 1.0
    W = rng.normal((cfg.N, cfg.d)) / math.sqrt(cfg.d)
    target = act(x @ w_star)
    F = act(W @ x.T)
    F[: cfg.M] = target
    K = empirical_kernel(F)
    rkhs = rkhs_norm(K, target, cfg.rel_cutoff)
    predicted = cfg.N / cfg.M if cfg.M > 0 else math.inf
    return {"M": cfg.M, "rkhs_of_sigma_phi": rkhs, "predicted": predicted}


@dataclass(frozen=True)
class GFLConfig:
    d: int = 60
    N1: int = 500
    N2: int = 500
    Pprime: int = 1500
    D_list: Sequence[float] = (1, 2, 4, 8, 16, 32, 40)
    mode_index: Optional[int] = None
    act: str = "relu"
    data: str = "iid"
    layer_norm: bool = False
    seed: int = 0
    ridge: float = 1e-8
    rel_cutoff: float = DEFAULT_CUTOFF


GFL_COLUMNS = ("D", "rkhs_phi2", "inv_expectation", "seed", "d", "N1", "N2", "Pprime", "act",
               "data", "layernorm")


def run_gfl_propagation(cfg: GFLConfig) -> list[dict]:
    """Emulate a GFL layer amplifying ``Phi*`` by ``D`` and track ``Phi*^2`` downstream.

    ``Phi*`` is a chosen eigenmode of the first empirical kernel. Second-layer
    weights are drawn with covariance ``I/N1 + (D-1) a a^T / N1`` where ``a``
    is the unit vector reading ``Phi*`` off the first-layer activations.
    """
    if any(D < 1 for D in cfg.D_list):
        raise DomainError("GFL amplification D must be >= 1")
    act = ActivationKind.parse(cfg.act)
    rng = RngStream(cfg.seed, 2)
    x = _gaussian_inputs(rng, cfg.Pprime, cfg.d, cfg.data)
    W1 = rng.normal((cfg.N1, cfg.d)) / math.sqrt(cfg.d)
    F1 = act(W1 @ x.T)
    basis = FeatureBasis.from_kernel(empirical_kernel(F1), cfg.rel_cutoff)
    index = cfg.d // 2 if cfg.mode_index is None else cfg.mode_index
    phi = basis.mode(index)

    a = np.linalg.solve(F1 @ F1.T + cfg.ridge * np.eye(cfg.N1), F1 @ phi)
    a_hat = a / np.linalg.norm(a)

    g = phi ** 2
    g = g - g.mean()
    g = g * math.sqrt(cfg.Pprime) / np.linalg.norm(g)

    Z = rng.normal((cfg.N2, cfg.N1))  # shared across D so the D-dependence is smooth
    Za = Z @ a_hat
    rows = []
    for D in cfg.D_list:
        W2 = (Z + (math.sqrt(D) - 1.0) * np.outer(Za, a_hat)) / math.sqrt(cfg.N1)
        h2 = W2 @ F1
        if cfg.layer_norm:
            h2 = h2 / np.sqrt(np.mean(h2 ** 2, axis=0, keepdims=True))
        K = empirical_kernel(act(h2))
        rows.append({
            "D": D,
            "rkhs_phi2": rkhs_norm(K, g, cfg.rel_cutoff),
            "inv_expectation": 1.0 / kernel_expectation(K, g),
            "seed": cfg.seed, "d": cfg.d, "N1": cfg.N1, "N2": cfg.N2, "Pprime": cfg.Pprime,
            "act": act.value, "data": cfg.data, "layernorm": bool(cfg.layer_norm),
        })
    return rows


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])
