"""Unadjusted Langevin chains over batched replicas."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..errors import DomainError, StepSizeError
from ..numerics import RngStream
from .networks import Dataset, NetworkSpec, TargetSpec, TrainConfig, potential_and_grad, sample_dataset

DIVERGENCE_NORM = 1e6
DRIFT_TOLERANCE = 0.05
AUTO_STEP_CAP = 0.01
AUTO_STEP_FRACTION = 0.1


@dataclass
class ChainResult:
    """Thinned post-burn-in samples for ``R`` replicas.

    ``samples[k]`` is a parameter list whose arrays have the replica axis
    first. ``u_trace`` has one row per step. ``u_drift`` is, per replica, the
    change of mean ``U`` between the third and last quarter of the trace in
    units of the last-quarter standard deviation.
    """

    samples: list
    u_trace: np.ndarray
    eta: np.ndarray
    n_steps: int
    u_drift: np.ndarray

    @property
    def final(self) -> list:
        return self.samples[-1]

    @property
    def stationary(self) -> np.ndarray:
        return self.u_drift < DRIFT_TOLERANCE


def u_drift(u_trace: np.ndarray) -> np.ndarray:
    n = u_trace.shape[0]
    q = n // 4
    if q < 2:
        return np.full(u_trace.shape[1:], np.inf)
    third, last = u_trace[n - 2 * q:n - q], u_trace[n - q:]
    spread = last.std(axis=0)
    diff = np.abs(last.mean(axis=0) - third.mean(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(spread > 0, diff / spread, np.where(diff > 0, np.inf, 0.0))


def _step_table(eta, R: int, n_layers: int) -> np.ndarray:
    """Broadcast a scalar, per-replica or per-(replica, layer) step to ``(R, n_layers)``."""
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None]
    return np.broadcast_to(eta, (R, n_layers)).copy()


def _expand(v, p):
    return v.reshape((-1,) + (1,) * (p.ndim - 1))


def langevin(grad_fn: Callable, theta: list, eta, n_steps: int, burn_in: int, thin: int,
             noise_rngs: list, precond=None, on_sample: Optional[Callable] = None) -> ChainResult:
    """Run ``theta <- theta - eta M grad U + sqrt(2 eta M) xi`` for every replica.

    ``grad_fn(theta)`` returns ``(U, grads)`` with per-replica ``U``. ``M`` is
    a constant positive scalar per parameter array (``precond``; default 1),
    which leaves the stationary law ``exp(-U)`` unchanged. ``eta`` may be a
    scalar, one value per replica or an ``(R, n_arrays)`` table. Each replica draws its noise from its
    own stream, so a replica's trajectory does not depend on which other
    replicas share the batch.
    """
    R = theta[0].shape[0]
    eta = _step_table(eta, R, len(theta))
    if not np.all(eta > 0):
        raise DomainError("step size must be positive")
    if len(noise_rngs) != R:
        raise DomainError("need one noise stream per replica")
    precond = [1.0] * len(theta) if precond is None else [float(m) for m in precond]
    if len(precond) != len(theta) or any(not m > 0 for m in precond):
        raise DomainError("need one positive preconditioner per parameter array")
    theta = [np.array(p, dtype=float) for p in theta]
    drift = [_expand(eta[:, j] * m, p) for j, (m, p) in enumerate(zip(precond, theta))]
    kick = [_expand(np.sqrt(2.0 * eta[:, j] * m), p) for j, (m, p) in enumerate(zip(precond, theta))]
    sizes = [int(np.prod(p.shape[1:])) for p in theta]
    cuts = np.cumsum(sizes)[:-1]
    total = int(sum(sizes))
    trace = np.empty((n_steps, R))
    samples = []
    for step in range(n_steps):
        U, grads = grad_fn(theta)
        trace[step] = U
        noise = np.stack([r.normal(total) for r in noise_rngs])
        for p, g, xi, a, b in zip(theta, grads, np.split(noise, cuts, axis=1), drift, kick):
            p -= a * g
            p += b * xi.reshape(p.shape)
        if (step + 1) % thin == 0 or step == n_steps - 1:
            sq = sum(np.sum(p * p, axis=tuple(range(1, p.ndim))) for p in theta)
            bad = ~np.isfinite(sq) | (sq > DIVERGENCE_NORM ** 2)
            if np.any(bad):
                raise StepSizeError(
                    f"chain diverged at step {step + 1} (replicas {np.flatnonzero(bad).tolist()}); "
                    f"try a step size below {float(eta.min()) / 10:.3g}")
            if step >= burn_in and (step + 1 - burn_in) % thin == 0:
                snap = [p.copy() for p in theta]
                samples.append(snap)
                if on_sample is not None:
                    on_sample(snap)
    if not samples:
        samples.append([p.copy() for p in theta])
    post = trace[burn_in:]
    return ChainResult(samples, trace, eta, n_steps, u_drift(post))


def top_curvature(grad_fn: Callable, theta: list, precond: list, layer: Optional[int] = None,
                  n_iter: int = 30, h: float = 1e-5, seed_rng: Optional[list] = None) -> np.ndarray:
    """Largest Hessian eigenvalue of ``U`` per replica in preconditioned coordinates.

    Power iteration on finite differences of the gradient; with ``layer`` set,
    restricted to that parameter array's diagonal block.
    """
    R = theta[0].shape[0]
    sq = [np.sqrt(m) for m in precond]
    active = set(range(len(theta))) if layer is None else {layer}
    _, g0 = grad_fn(theta)
    g0 = [g * s for g, s in zip(g0, sq)]
    if seed_rng is None:
        v = [np.ones_like(p) for p in theta]
    else:
        v = [np.stack([r.normal(p.shape[1:]) for r in seed_rng]) for p in theta]
    v = [x if j in active else np.zeros_like(x) for j, x in enumerate(v)]
    lam = np.zeros(R)
    for _ in range(n_iter):
        norm = np.sqrt(sum(np.sum(x * x, axis=tuple(range(1, x.ndim))) for x in v))
        norm = np.where(norm > 0, norm, 1.0)
        v = [x / _expand(norm, x) for x in v]
        shifted = [p + h * s * x for p, s, x in zip(theta, sq, v)]
        _, g1 = grad_fn(shifted)
        v = [(a * s - b) / h if j in active else np.zeros_like(b)
             for j, (a, s, b) in enumerate(zip(g1, sq, g0))]
        lam = np.sqrt(sum(np.sum(x * x, axis=tuple(range(1, x.ndim))) for x in v))
    return lam


def auto_step(lam: np.ndarray) -> np.ndarray:
    return np.minimum(AUTO_STEP_CAP, AUTO_STEP_FRACTION / np.maximum(lam, 1e-300))


def auto_step_table(grad_fn: Callable, theta: list, precond: list, seed_rng: Optional[list] = None) -> np.ndarray:
    """Per-replica, per-layer steps from each layer's own top curvature."""
    cols = [auto_step(top_curvature(grad_fn, theta, precond, layer=j, seed_rng=seed_rng))
            for j in range(len(theta))]
    return np.stack(cols, axis=1)


def run_chains(net: NetworkSpec, data: Optional[Dataset], cfg: TrainConfig, noise_rngs: list,
               init_rngs: list, on_sample: Optional[Callable] = None) -> ChainResult:
    """Batched chains from independent prior draws.

    Steps are taken in prior-whitened coordinates (each layer preconditioned
    by its prior variance). Without an explicit ``cfg.step`` each layer gets
    ``min(0.01, 0.1 / lambda_l)`` per replica, with ``lambda_l`` the largest
    whitened eigenvalue of that layer's Hessian block at initialization.
    """
    theta = net.init_params(init_rngs)
    if data is not None and data.n_replicas != len(noise_rngs):
        raise DomainError("dataset replica count does not match the number of streams")
    precond = list(net.prior_variances)

    def grad_fn(th):
        return potential_and_grad(th, net, data, cfg)

    if cfg.step is not None:
        eta = cfg.step
    else:
        eta = auto_step_table(grad_fn, theta, precond, seed_rng=init_rngs)
    return langevin(grad_fn, theta, eta, cfg.n_steps, cfg.burn_in, cfg.thin, noise_rngs, precond, on_sample)


def run_chain(net: NetworkSpec, tgt: TargetSpec, cfg: TrainConfig, rng: RngStream,
              n_replicas: int = 1) -> tuple[ChainResult, Dataset]:
    """Sample the posterior for ``n_replicas`` independent datasets.

    Streams ``3k``, ``3k+1`` and ``3k+2`` of ``rng.seed`` (offset by
    ``rng.stream_id``) drive data, noise and initialization of replica ``k``.
    """
    base = rng.stream_id
    data_rngs = [rng.child(base + 3 * k) for k in range(n_replicas)]
    noise_rngs = [rng.child(base + 3 * k + 1) for k in range(n_replicas)]
    init_rngs = [rng.child(base + 3 * k + 2) for k in range(n_replicas)]
    data = sample_dataset(net, tgt, cfg.P, data_rngs) if cfg.P > 0 else None
    if data is None:
        tgt.check(net)
    return run_chains(net, data, cfg, noise_rngs, init_rngs), data
