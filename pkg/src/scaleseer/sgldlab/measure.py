"""Alignment, specialized-neuron counts and the Gaussian cross-entropy bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..errors import DomainError
from ..kernels import readout_overlap_sq
from ..numerics import RngStream
from .networks import NetworkSpec, TargetSpec, forward, sample_dataset, target_values

SPEC_THRESHOLD = 3.0


@dataclass
class AlignmentSamples:
    """Arrays of shape ``(n_samples, R)``."""

    alignment: np.ndarray
    stderr: np.ndarray
    mse: np.ndarray
    y_sq: float


def alignment_from_values(f, y) -> tuple:
    """``A = <f, y> / <y, y>`` over the last axis with a delta-method stderr."""
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    yy = np.mean(y * y)
    if not yy > 0:
        raise DomainError("target has zero norm on the test set")
    A = np.mean(f * y, axis=-1) / yy
    resid = f * y - A[..., None] * y * y
    se = resid.std(axis=-1, ddof=1) / (math.sqrt(n) * yy)
    return A, se


def scalar_output(f: np.ndarray, net: NetworkSpec) -> np.ndarray:
    """Regression output, or half the logit margin for two classes."""
    if net.d_out == 1:
        return f
    return 0.5 * (f[..., 1] - f[..., 0])


def test_set(net: NetworkSpec, tgt: TargetSpec, n_test: int, rng: RngStream):
    """Shared test inputs of shape ``(1, n, ...)`` and targets ``(n,)`` (parity as +-1)."""
    data = sample_dataset(net, tgt, n_test, rng)
    y = target_values(net, tgt, data.X[0], None if data.clean is None else data.clean[0])
    return data.X, y


def measure_alignment(samples: list, net: NetworkSpec, tgt: TargetSpec, n_test: int,
                      rng: RngStream = None, test=None) -> AlignmentSamples:
    """Alignment and test MSE of every posterior sample on fresh test draws."""
    if n_test < 1000:
        raise DomainError("n_test must be >= 1000")
    X, y = test if test is not None else test_set(net, tgt, n_test, rng)
    al, se, mse = [], [], []
    for params in samples:
        R = params[0].shape[0]
        Xr = np.broadcast_to(X, (R,) + X.shape[1:])
        f = scalar_output(forward(params, net, Xr), net)
        a, s = alignment_from_values(f, y)
        al.append(a)
        se.append(s)
        mse.append(np.mean((f - y) ** 2, axis=-1))
    return AlignmentSamples(np.array(al), np.array(se), np.array(mse), float(np.mean(y * y)))


def first_layer_overlaps(W1: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """``w_i . u`` for every neuron and direction, shape ``(..., N, k)``."""
    return W1 @ np.atleast_2d(directions).T


def count_specialized(overlaps: np.ndarray, threshold: float) -> np.ndarray:
    """Number of neurons whose overlap magnitude exceeds ``threshold``.

    ``overlaps`` has the neuron axis last; reduce several feature directions
    beforehand, e.g. with ``np.abs(o).max(axis=-1)``.
    """
    return np.sum(np.abs(np.asarray(overlaps, dtype=float)) > threshold, axis=-1)


def layer1_threshold(net: NetworkSpec) -> float:
    """Three prior standard deviations of ``w_i . u`` for a unit ``u``."""
    return SPEC_THRESHOLD * math.sqrt(net.prior_variances[0])


def layer2_linear_overlaps(params: list, net: NetworkSpec, X: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Test-set projection of each second-layer preactivation onto ``phi``, shape ``(R, N2)``."""
    if net.arch != "fcn3":
        raise DomainError("second-layer overlaps need a three-layer network")
    W1, W2, _ = params
    R = W1.shape[0]
    Xr = np.broadcast_to(X, (R,) + X.shape[1:])
    s1 = net.activation(np.matmul(Xr, W1.transpose(0, 2, 1)))
    h2 = np.matmul(s1, W2.transpose(0, 2, 1))
    return np.einsum("rpn,p->rn", h2, phi) / phi.shape[0]


def layer2_threshold(net: NetworkSpec, rng: RngStream, n_weights: int = 20000) -> float:
    """Three NNGP standard deviations of a second-layer overlap with the linear feature."""
    m2, _ = readout_overlap_sq(net.act, 1, net.d, net.sigma_sq[0], n_weights, rng)
    return SPEC_THRESHOLD * math.sqrt(net.sigma_sq[1] * m2)


def xent_second_order_coeff(d_o: int) -> float:
    """Coefficient of ``sum sigma^2`` in the small-variance expansion of ``E[logsumexp(f)]``."""
    return 0.5 * (d_o - 1) / d_o ** 2


def expected_xent_gp(kernel_diags, d_o: int) -> float:
    """Expected cross-entropy with independent centered Gaussian logits.

    ``kernel_diags`` holds ``K_j(x_nu, x_nu)`` with shape ``(P, d_o)`` (or a
    flat array of all variances). Returns ``P log d_o + c2 * sum sigma^2``.
    """
    if int(d_o) != d_o or d_o < 2:
        raise DomainError("d_o must be an integer >= 2")
    s = np.asarray(kernel_diags, dtype=float)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise DomainError("variances must be finite and non-negative")
    if s.ndim == 2:
        if s.shape[1] != d_o:
            raise DomainError(f"expected {d_o} columns, got {s.shape[1]}")
        P = s.shape[0]
    elif s.ndim == 1:
        if s.size % d_o:
            raise DomainError("flat variance array length must be a multiple of d_o")
        P = s.size // d_o
    else:
        raise DomainError("kernel_diags must be 1-D or 2-D")
    return P * math.log(d_o) + xent_second_order_coeff(d_o) * float(s.sum())


def xent_mc_oracle(sigma_sq, n_samples: int, rng: RngStream, chunk: int = 1 << 20) -> tuple[float, float]:
    """Monte-Carlo mean and stderr of ``logsumexp(f)``, ``f ~ N(0, diag(sigma_sq))``."""
    sd = np.sqrt(np.asarray(sigma_sq, dtype=float))
    s1 = s2 = 0.0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        v = logsumexp(rng.normal((n, sd.size)) * sd, axis=1)
        s1 += float(v.sum())
        s2 += float(v @ v)
        done += n
    mean = s1 / n_samples
    var = max(s2 / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(var / n_samples)
