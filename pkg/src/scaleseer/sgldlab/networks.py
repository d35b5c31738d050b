"""Network, target and training specifications plus the Langevin potential.

Parameters always carry a leading replica axis ``R`` so that several
independent chains can share one set of array operations. A dataset likewise
holds one draw per replica: inputs ``X`` of shape ``(R, P, d)`` (or
``(R, P, L, d)`` for attention) and targets ``y`` of shape ``(R, P)``; for
cross-entropy ``y`` holds integer class labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

from ..errors import DomainError, NumericalError
from ..kernels import ActivationKind
from ..numerics import RngStream, hermite_normalized

ARCHS = ("fcn2", "fcn3", "attn")
REGIMES = ("standard", "mean_field")
LOSSES = ("mse", "xent")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture, activation and prior.

    ``fcn2`` uses ``d`` and ``N1``; ``fcn3`` adds ``N2``; ``attn`` uses
    ``d``, ``L`` and ``H``. ``sigma_sq`` lists one prior variance per weight
    layer (readout last). ``d_out > 1`` gives a vector readout for
    classification.
    """

    arch: str
    d: int
    N1: int = 0
    N2: int = 0
    L: int = 0
    H: int = 0
    act: str = "erf"
    sigma_sq: tuple = (1.0, 1.0)
    regime: str = "standard"
    chi: float = 1.0
    d_out: int = 1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise DomainError(f"unknown architecture {self.arch!r}; expected one of {', '.join(ARCHS)}")
        if self.regime not in REGIMES:
            raise DomainError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        ActivationKind.parse(self.act)
        object.__setattr__(self, "sigma_sq", tuple(float(s) for s in self.sigma_sq))
        need = {"fcn2": ("d", "N1"), "fcn3": ("d", "N1", "N2"), "attn": ("d", "L", "H")}[self.arch]
        for name in need:
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{self.arch} needs {name} >= 1")
        if self.d_out < 1:
            raise DomainError("d_out must be >= 1")
        if self.arch == "attn" and self.d_out != 1:
            raise DomainError("attention networks have a scalar output")
        n_layers = {"fcn2": 2, "fcn3": 3, "attn": 2}[self.arch]
        if len(self.sigma_sq) != n_layers:
            raise DomainError(f"{self.arch} needs {n_layers} prior variances, got {len(self.sigma_sq)}")
        if any(not s > 0 for s in self.sigma_sq):
            raise DomainError("prior variances must be positive")
        if not self.chi > 0:
            raise DomainError("chi must be positive")
        if self.regime == "mean_field" and self.arch == "attn":
            raise DomainError("mean-field scaling is defined for fully connected networks only")

    @property
    def activation(self) -> ActivationKind:
        return ActivationKind.parse(self.act)

    @property
    def input_shape(self) -> tuple:
        return (self.L, self.d) if self.arch == "attn" else (self.d,)

    @property
    def fan_ins(self) -> tuple:
        """Fan-in of every weight layer; prior variance is ``sigma_sq / fan_in``."""
        if self.arch == "fcn2":
            return (self.d, self.N1)
        if self.arch == "fcn3":
            return (self.d, self.N1, self.N2)
        return (self.d ** 2, self.d * self.H)

    @property
    def prior_variances(self) -> tuple:
        out = [s / f for s, f in zip(self.sigma_sq, self.fan_ins)]
        if self.regime == "mean_field":
            out[-1] /= self.chi
        return tuple(out)

    def param_shapes(self) -> tuple:
        tail = (self.d_out,) if self.d_out > 1 else ()
        if self.arch == "fcn2":
            return ((self.N1, self.d), (self.N1,) + tail)
        if self.arch == "fcn3":
            return ((self.N1, self.d), (self.N2, self.N1), (self.N2,) + tail)
        return ((self.H, self.d, self.d), (self.H, self.d))

    def init_params(self, rngs: list) -> list:
        """One prior draw per replica, stacked along axis 0."""
        out = []
        for shape, var in zip(self.param_shapes(), self.prior_variances):
            out.append(np.stack([r.normal(shape, math.sqrt(var)) for r in rngs]))
        return out


@dataclass(frozen=True)
class TargetSpec:
    """``hermite`` (degree ``m`` along ``w_star``), ``parity`` or ``attention_cubic``."""

    tag: str
    m: int = 3
    w_star: Optional[tuple] = None
    eps: float = 0.0

    def __post_init__(self):
        if self.tag not in ("hermite", "parity", "attention_cubic"):
            raise DomainError(f"unknown target {self.tag!r}; expected hermite, parity or attention_cubic")
        if self.eps < 0:
            raise DomainError("parity input noise must be >= 0")
        if self.w_star is not None:
            w = np.asarray(self.w_star, dtype=float)
            if abs(np.linalg.norm(w) - 1.0) > 1e-9:
                raise DomainError("w_star must have unit norm")
            object.__setattr__(self, "w_star", tuple(w.tolist()))

    def direction(self, d: int) -> np.ndarray:
        if self.w_star is None:
            w = np.zeros(d)
            w[0] = 1.0
            return w
        w = np.asarray(self.w_star)
        if w.shape != (d,):
            raise DomainError(f"w_star has dimension {w.size}, network has d={d}")
        return w

    def feature_directions(self, d: int) -> np.ndarray:
        """Unit input directions whose first-layer overlaps are counted."""
        if self.tag == "parity":
            s = 1 / math.sqrt(2)
            dirs = np.zeros((4, d))
            dirs[0, 0] = dirs[1, 1] = 1.0
            dirs[2, :2] = (s, s)
            dirs[3, :2] = (s, -s)
            return dirs
        return self.direction(d)[None, :]

    def check(self, net: NetworkSpec):
        if (self.tag == "attention_cubic") != (net.arch == "attn"):
            raise DomainError("attention_cubic targets pair with attn networks only")
        if self.tag == "parity":
            if net.d < 2:
                raise DomainError("parity needs d >= 2")
            if net.d_out != 2:
                raise DomainError("parity classification needs d_out = 2")
        elif net.d_out != 1:
            raise DomainError("regression targets need d_out = 1")
        if self.tag == "attention_cubic" and (net.d < 3 or net.L < 2):
            raise DomainError("attention_cubic needs d >= 3 and L >= 2")
        if self.tag == "hermite":
            self.direction(net.d)


@dataclass(frozen=True)
class TrainConfig:
    P: int
    kappa: float = 1.0
    loss: str = "mse"
    step: Optional[float] = None
    n_steps: int = 20000
    burn_in: int = 10000
    thin: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.P < 0:
            raise DomainError("P must be >= 0")
        if not self.kappa > 0:
            raise DomainError("kappa must be positive")
        if self.loss not in LOSSES:
            raise DomainError(f"unknown loss {self.loss!r}; expected mse or xent")
        if self.step is not None and not self.step > 0:
            raise DomainError("step size must be positive")
        if self.n_steps < 1 or self.thin < 1:
            raise DomainError("n_steps and thin must be >= 1")
        if not 0 <= self.burn_in < self.n_steps:
            raise DomainError("need 0 <= burn_in < n_steps")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    clean: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_replicas(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]


def _draw_inputs(net: NetworkSpec, tgt: TargetSpec, P: int, rng: RngStream):
    if tgt.tag == "parity":
        s = rng.choice(np.array([-1.0, 1.0]), size=(P, net.d))
        x = s + rng.normal((P, net.d), math.sqrt(tgt.eps)) if tgt.eps > 0 else s.copy()
        return x, s
    return rng.normal((P,) + net.input_shape), None


def target_values(net: NetworkSpec, tgt: TargetSpec, X: np.ndarray, clean=None) -> np.ndarray:
    """Regression values (hermite, attention) or ``+-1`` labels (parity)."""
    if tgt.tag == "hermite":
        return hermite_normalized(tgt.m, X @ tgt.direction(net.d))
    if tgt.tag == "parity":
        src = X if clean is None else clean
        return np.sign(src[..., 0] * src[..., 1])
    L = X.shape[-2]
    # Sum over ordered pairs a != b, unit second moment.
    x1 = X[..., 0]
    x23 = X[..., 1] * X[..., 2]
    cross = x1.sum(-1) * x23.sum(-1) - (x1 * x23).sum(-1)
    return cross / math.sqrt(L * (L - 1))


def sample_dataset(net: NetworkSpec, tgt: TargetSpec, P: int, rng) -> Dataset:
    """Draw ``P`` training points for each replica.

    ``rng`` is an ``RngStream`` or a list of them (one dataset per replica).
    Parity targets come back as class indices ``0``/``1`` for labels ``-1``/``+1``.
    """
    if P < 0:
        raise DomainError("P must be >= 0")
    tgt.check(net)
    rngs = rng if isinstance(rng, (list, tuple)) else [rng]
    xs, cs = [], []
    for r in rngs:
        x, c = _draw_inputs(net, tgt, P, r)
        xs.append(x)
        cs.append(c)
    X = np.stack(xs)
    clean = np.stack(cs) if tgt.tag == "parity" else None
    y = target_values(net, tgt, X, clean)
    if tgt.tag == "parity":
        y = (y > 0).astype(np.int64)
    return Dataset(X, y, clean)


def _bmm(a, b):
    return np.matmul(a, b)


def _back_to_units(gf, a):
    """``dU/ds`` for the last hidden layer given ``dU/df`` and the readout."""
    if a.ndim == 3:
        return np.einsum("rpo,rno->rpn", gf, a)
    return gf[:, :, None] * a[:, None, :]


def forward(params: list, net: NetworkSpec, X: np.ndarray, keep: bool = False):
    """Network outputs ``(R, P)`` or ``(R, P, d_out)``; with ``keep`` also the cache."""
    act = net.activation
    if net.arch == "fcn2":
        W, a = params
        h = _bmm(X, W.transpose(0, 2, 1))
        s = act(h)
        f = np.einsum("rpn,rn...->rp...", s, a)
        return (f, (h, s)) if keep else f
    if net.arch == "fcn3":
        W1, W2, a = params
        h1 = _bmm(X, W1.transpose(0, 2, 1))
        s1 = act(h1)
        h2 = _bmm(s1, W2.transpose(0, 2, 1))
        s2 = act(h2)
        f = np.einsum("rpn,rn...->rp...", s2, a)
        return (f, (h1, s1, h2, s2)) if keep else f
    A, w = params
    R, P, L, d = X.shape
    f = np.zeros((R, P))
    cache = []
    for h in range(net.H):
        XA = _bmm(X.reshape(R, P * L, d), A[:, h]).reshape(R, P, L, d)
        S = _bmm(XA, X.transpose(0, 1, 3, 2))
        Sm = softmax(S, axis=-1)
        v = np.einsum("rpld,rd->rpl", X, w[:, h])
        o = _bmm(Sm, v[..., None])[..., 0]
        f += o.sum(-1)
        if keep:
            cache.append((Sm, v, o))
    f /= math.sqrt(L)
    return (f, cache) if keep else f


def _data_term(f, y, kappa, loss):
    """Data part of ``U`` and its gradient with respect to ``f``."""
    if loss == "mse":
        r = f - y
        return 0.5 * np.sum(r * r, axis=1) / kappa, r / kappa
    # Standard softmax cross-entropy on the logits.
    lse = logsumexp(f, axis=-1)
    picked = np.take_along_axis(f, y[..., None], axis=-1)[..., 0]
    val = np.sum(lse - picked, axis=1) / (2 * kappa)
    g = softmax(f, axis=-1)
    np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
    return val, g / (2 * kappa)


def effective_kappa(net: NetworkSpec, cfg: TrainConfig) -> float:
    return cfg.kappa / net.chi if net.regime == "mean_field" else cfg.kappa


def potential_and_grad(params: list, net: NetworkSpec, data: Optional[Dataset], cfg: TrainConfig):
    """Per-replica potential ``U`` (shape ``(R,)``) and its gradient.

    ``exp(-U)`` is the posterior density: data misfit over ``2 kappa`` plus
    Gaussian weight decay matching the prior variances.
    """
    R = params[0].shape[0]
    U = np.zeros(R)
    grads = []
    for p, var in zip(params, net.prior_variances):
        U += 0.5 * np.sum(p * p, axis=tuple(range(1, p.ndim))) / var
        grads.append(p / var)
    if data is None or data.P == 0:
        return U, grads
    if cfg.loss == "xent" and net.d_out < 2:
        raise DomainError("cross-entropy needs d_out >= 2")
    if cfg.loss == "mse" and net.d_out != 1:
        raise DomainError("squared loss is implemented for scalar outputs")

    X = data.X
    f, cache = forward(params, net, X, keep=True)
    if not np.all(np.isfinite(f)):
        raise NumericalError("forward pass produced non-finite outputs")
    val, gf = _data_term(f, data.y, effective_kappa(net, cfg), cfg.loss)
    U += val
    act = net.activation

    if net.arch == "fcn2":
        W, a = params
        h, s = cache
        grads[1] = grads[1] + np.einsum("rpn,rp...->rn...", s, gf)
        gs = _back_to_units(gf, a)
        gh = gs * act.derivative(h)
        grads[0] = grads[0] + _bmm(gh.transpose(0, 2, 1), X)
    elif net.arch == "fcn3":
        W1, W2, a = params
        h1, s1, h2, s2 = cache
        grads[2] = grads[2] + np.einsum("rpn,rp...->rn...", s2, gf)
        gh2 = _back_to_units(gf, a) * act.derivative(h2)
        grads[1] = grads[1] + _bmm(gh2.transpose(0, 2, 1), s1)
        gh1 = _bmm(gh2, W2) * act.derivative(h1)
        grads[0] = grads[0] + _bmm(gh1.transpose(0, 2, 1), X)
    else:
        A, w = params
        R_, P, L, d = X.shape
        go = gf / math.sqrt(L)  # dU/do_a, identical for every row a
        gA = np.zeros_like(A)
        gw = np.zeros_like(w)
        for hd, (Sm, v, o) in enumerate(cache):
            gv = go[..., None] * Sm.sum(axis=-2)
            gw[:, hd] = np.einsum("rpl,rpld->rd", gv, X)
            gS = go[..., None, None] * Sm * (v[..., None, :] - o[..., :, None])
            T = _bmm(X.transpose(0, 1, 3, 2), gS)
            gA[:, hd] = _bmm(T, X).sum(axis=1)
        grads[0] = grads[0] + gA
        grads[1] = grads[1] + gw
    return U, grads
