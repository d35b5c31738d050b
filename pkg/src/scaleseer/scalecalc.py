"""Variational energy budgets for feature-learning patterns.

A budget is a posynomial in named scale symbols: bound scales (``d``, ``N``,
...) fixed by the problem, and free parameters (``M``, ``D``, ``beta``, ...)
chosen by the pattern. Minimizing over the free parameters gives the energy
of a pattern, and the smallest energy among candidate patterns predicts how
the network learns and how its sample complexity scales.

Budgets are assembled by tracking, layer by layer, the RKHS norm of the
target's building blocks (the ``FeatureLedger``):

* a lazy (GP) layer keeps existing entries and builds powers multiplicatively,
  ``R(phi^m) = R(phi)^m``, for degrees the activation can express;
* a GFL layer amplifying ``phi`` by ``D`` costs ``N (D - 1) / 2`` and divides
  ``R(phi)`` by ``D``;
* specializing neurons with total squared amplitude ``s`` on ``phi`` cost
  ``s * R(phi)`` and give every feature overlapping ``sigma(phi)`` the norm
  ``N / s`` downstream.

The readout term is the ledger entry of the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ConvergenceError, CrossoverError, DomainError, InfeasiblePatternError

BOUND_SCALES = ("d", "N", "N1", "N2", "S", "Nw", "L", "H", "chi", "kappa")
FREE_PARAMS = ("M", "M1", "M2", "D", "D1", "D2", "beta", "mu2")
MAX_DENOMINATOR = 12


@dataclass(frozen=True)
class ScaleSymbol:
    name: str
    kind: str

    @classmethod
    def of(cls, name: str) -> "ScaleSymbol":
        if name in BOUND_SCALES:
            return cls(name, "bound_scale")
        if name in FREE_PARAMS:
            return cls(name, "free_param")
        raise DomainError(f"unknown scale symbol {name!r}")


def _frac(x) -> Fraction:
    f = Fraction(x).limit_denominator(MAX_DENOMINATOR) if isinstance(x, float) else Fraction(x)
    if f.denominator > MAX_DENOMINATOR:
        raise DomainError(f"exponent {x} needs a denominator above {MAX_DENOMINATOR}")
    return f


@dataclass(frozen=True)
class Monomial:
    """``coeff * prod(symbol ** exponent)`` with a positive coefficient."""

    coeff: float
    exponents: tuple = ()

    def __post_init__(self):
        if not (self.coeff > 0 and math.isfinite(self.coeff)):
            raise DomainError(f"monomial coefficient must be positive and finite, got {self.coeff}")
        clean = {}
        for name, e in dict(self.exponents).items():
            ScaleSymbol.of(name)
            e = _frac(e)
            if e != 0:
                clean[name] = e
        object.__setattr__(self, "coeff", float(self.coeff))
        object.__setattr__(self, "exponents", tuple(sorted(clean.items())))

    @classmethod
    def of(cls, coeff: float = 1.0, **exponents) -> "Monomial":
        return cls(coeff, tuple(exponents.items()))

    @property
    def exps(self) -> dict:
        return dict(self.exponents)

    @property
    def symbols(self) -> frozenset:
        return frozenset(self.exps)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Monomial(self.coeff * other, self.exponents)
        if isinstance(other, Monomial):
            e = self.exps
            for k, v in other.exponents:
                e[k] = e.get(k, 0) + v
            return Monomial(self.coeff * other.coeff, tuple(e.items()))
        if isinstance(other, Posynomial):
            return other * self
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return Monomial(self.coeff / other, self.exponents)
        return self * other ** -1

    def __rtruediv__(self, other):
        return Monomial.of(float(other)) * self ** -1

    def __pow__(self, p):
        p = _frac(p)
        return Monomial(self.coeff ** float(p), tuple((k, v * p) for k, v in self.exponents))

    def __add__(self, other):
        return Posynomial((self,)) + other

    __radd__ = __add__

    def evaluate(self, values: Mapping[str, float]) -> float:
        out = self.coeff
        for k, v in self.exponents:
            out *= float(values[k]) ** float(v)
        return out

    def substitute(self, values: Mapping[str, float]) -> "Monomial":
        """Absorb the symbols present in ``values`` into the coefficient."""
        coeff = self.coeff
        rest = []
        for k, v in self.exponents:
            if k in values:
                coeff *= float(values[k]) ** float(v)
            else:
                rest.append((k, v))
        return Monomial(coeff, tuple(rest))

    def rename(self, mapping: Mapping[str, tuple]) -> "Monomial":
        """Replace ``sym`` by ``new ** power`` for each ``sym: (new, power)``."""
        e = {}
        for k, v in self.exponents:
            new, power = mapping.get(k, (k, 1))
            e[new] = e.get(new, 0) + v * _frac(power)
        return Monomial(self.coeff, tuple(e.items()))

    def to_json(self) -> dict:
        return {"coeff": self.coeff, "exponents": {k: str(v) for k, v in self.exponents}}

    def __str__(self):
        parts = [] if self.coeff == 1 and self.exponents else [f"{self.coeff:.6g}"]
        for k, v in self.exponents:
            parts.append(k if v == 1 else f"{k}^{v}" if v.denominator == 1 and v > 0 else f"{k}^({v})")
        return "*".join(parts)


@dataclass(frozen=True)
class Posynomial:
    """Sum of monomials; like terms are merged."""

    terms: tuple

    def __post_init__(self):
        merged = {}
        for t in self.terms:
            if not isinstance(t, Monomial):
                raise ContractError("posynomial terms must be monomials")
            merged[t.exponents] = merged.get(t.exponents, 0.0) + t.coeff
        if not merged:
            raise ContractError("posynomial needs at least one term")
        object.__setattr__(self, "terms", tuple(Monomial(c, e) for e, c in merged.items()))

    @classmethod
    def of(cls, *terms) -> "Posynomial":
        return cls(tuple(terms))

    @property
    def symbols(self) -> frozenset:
        return frozenset().union(*(t.symbols for t in self.terms))

    def __add__(self, other):
        if isinstance(other, Monomial):
            other = Posynomial((other,))
        if not isinstance(other, Posynomial):
            return NotImplemented
        return Posynomial(self.terms + other.terms)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float, Monomial)):
            return Posynomial(tuple(t * other for t in self.terms))
        return NotImplemented

    __rmul__ = __mul__

    def evaluate(self, values: Mapping[str, float]) -> float:
        return sum(t.evaluate(values) for t in self.terms)

    def substitute(self, values: Mapping[str, float]) -> "Posynomial":
        return Posynomial(tuple(t.substitute(values) for t in self.terms))

    def rename(self, mapping) -> "Posynomial":
        return Posynomial(tuple(t.rename(mapping) for t in self.terms))

    def as_monomial(self) -> Monomial:
        if len(self.terms) != 1:
            raise ContractError(f"expected a single monomial, got {self}")
        return self.terms[0]

    def to_json(self) -> list:
        return [t.to_json() for t in self.terms]

    def __str__(self):
        return " + ".join(str(t) for t in self.terms)


def _as_posy(x) -> Posynomial:
    return x if isinstance(x, Posynomial) else Posynomial((x,))


# Features are Hermite-type functions of the linear teacher feature w*.x:
# ("lin", m) stands for He_m(w*.x).
LINEAR = ("lin", 1)


def hermite_feature(m: int) -> tuple:
    if m < 1:
        raise DomainError("feature degree must be >= 1")
    return ("lin", int(m))


@dataclass(frozen=True)
class PatternKind:
    """Per-layer feature-learning pattern.

    ``param`` is either the name of a free parameter or a fixed positive
    number. ``feature`` is the feature the pattern acts on (``None`` means
    the linear feature; for magnetization, the target).
    """

    tag: str
    param: Union[str, float, None] = None
    feature: Optional[tuple] = None

    TAGS = ("GP", "GFL", "MSpec", "MuSpec", "Magnetization")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise DomainError(f"unknown pattern {self.tag!r}; expected one of {', '.join(self.TAGS)}")
        if self.tag == "GP":
            if self.param is not None:
                raise DomainError("GP takes no parameter")
        elif isinstance(self.param, str):
            if ScaleSymbol.of(self.param).kind != "free_param":
                raise DomainError(f"pattern parameter {self.param!r} must be a free parameter")
        elif not (isinstance(self.param, (int, float)) and self.param > 0):
            raise DomainError(f"{self.tag} needs a free symbol or positive number, got {self.param!r}")

    @classmethod
    def gp(cls):
        return cls("GP")

    @classmethod
    def gfl(cls, D="D", feature=LINEAR):
        return cls("GFL", D, feature)

    @classmethod
    def mspec(cls, M="M", feature=LINEAR):
        return cls("MSpec", M, feature)

    @classmethod
    def muspec(cls, mu2="mu2", feature=LINEAR):
        return cls("MuSpec", mu2, feature)

    @classmethod
    def magnetization(cls, beta="beta", feature=None):
        return cls("Magnetization", beta, feature)

    @property
    def monomial(self) -> Monomial:
        if isinstance(self.param, str):
            return Monomial.of(**{self.param: 1})
        return Monomial.of(float(self.param))

    def label(self) -> str:
        if self.tag == "GP":
            return "GP"
        return f"{self.tag}({self.param})"

    def to_json(self) -> dict:
        return {"tag": self.tag, "param": self.param, "feature": list(self.feature) if self.feature else None}


@dataclass(frozen=True)
class ArchitectureSpec:
    """Architecture, target and scaling regime.

    ``tag`` is one of ``fcn2``, ``fcn3``, ``cnn`` (one hidden layer on
    non-overlapping patches) or ``attention``. ``target`` is
    ``("hermite", m)``, ``("parity", 2)`` or ``("attention_cubic",)``.
    """

    tag: str
    target: tuple = ("hermite", 3)
    act: str = "erf"
    regime: str = "standard"

    WIDTHS = {"fcn2": ("N",), "fcn3": ("N1", "N2"), "cnn": ("N",), "attention": ()}

    def __post_init__(self):
        if self.tag not in self.WIDTHS:
            raise DomainError(f"unknown architecture {self.tag!r}; expected one of {', '.join(self.WIDTHS)}")
        if self.regime not in ("standard", "mean_field"):
            raise DomainError(f"unknown regime {self.regime!r}")
        if self.act not in ("erf", "relu"):
            raise DomainError(f"unknown activation {self.act!r} for budgets")
        kind = self.target[0]
        if self.tag == "attention":
            if kind != "attention_cubic":
                raise DomainError("attention blocks take the attention_cubic target")
        elif kind not in ("hermite", "parity"):
            raise DomainError(f"unknown target {self.target!r}")

    @property
    def widths(self) -> tuple:
        return self.WIDTHS[self.tag]

    @property
    def n_slots(self) -> int:
        return max(len(self.widths), 1)

    @property
    def target_feature(self) -> tuple:
        if self.target[0] == "parity":
            return hermite_feature(int(self.target[1]) if len(self.target) > 1 else 2)
        return hermite_feature(int(self.target[1]))

    def to_json(self) -> dict:
        return {"tag": self.tag, "target": list(self.target), "act": self.act, "regime": self.regime}


@dataclass
class FeatureLedger:
    """RKHS-norm scaling of each tracked feature under the current kernel."""

    entries: dict
    act: str
    max_degree: int

    def get(self, feature) -> Optional[Posynomial]:
        return self.entries.get(tuple(feature))

    def degree_available(self, m: int) -> bool:
        # Dot-product kernels of erf contain only odd powers.
        return self.act != "erf" or m % 2 == 1

    def overlaps(self, spiked: tuple, feature: tuple) -> bool:
        """Whether sigma(spiked) has a component along ``feature``."""
        if self.act == "erf":
            return (spiked[1] - feature[1]) % 2 == 0
        return True

    def lazy(self) -> "FeatureLedger":
        new = dict(self.entries)
        lin = self.entries.get(LINEAR)
        if lin is not None:
            lin_m = lin.as_monomial() if len(lin.terms) == 1 else None
            for m in range(2, self.max_degree + 1):
                f = hermite_feature(m)
                if f not in new and self.degree_available(m) and lin_m is not None:
                    new[f] = _as_posy(lin_m ** m)
        return FeatureLedger(new, self.act, self.max_degree)


@dataclass(frozen=True)
class EnergyBudget:
    arch: ArchitectureSpec
    patterns: tuple
    delta_terms: tuple  # (layer, Posynomial)
    alignment_term: Posynomial
    free: frozenset

    @property
    def total(self) -> Posynomial:
        out = self.alignment_term
        for _, p in self.delta_terms:
            out = out + p
        return out

    @property
    def label(self) -> str:
        return "-".join(p.label() for p in self.patterns)

    def to_json(self) -> dict:
        return {
            "arch": self.arch.to_json(),
            "patterns": [p.to_json() for p in self.patterns],
            "terms": self.total.to_json(),
            "delta_terms": [{"layer": l, "terms": p.to_json()} for l, p in self.delta_terms],
            "alignment_term": self.alignment_term.to_json(),
        }


def build_budget(arch: ArchitectureSpec, patterns: Sequence[PatternKind]) -> EnergyBudget:
    """Assemble the energy budget of a per-layer pattern assignment."""
    patterns = tuple(patterns)
    if len(patterns) != arch.n_slots:
        raise DomainError(f"{arch.tag} needs {arch.n_slots} pattern(s), got {len(patterns)}")
    if arch.tag == "attention":
        return _attention_budget(arch, patterns[0])

    target = arch.target_feature
    max_degree = max([target[1]] + [p.feature[1] for p in patterns if p.feature])
    seed = Monomial.of(S=1) if arch.tag == "cnn" else Monomial.of(d=1)
    ledger = FeatureLedger({LINEAR: _as_posy(seed)}, arch.act, max_degree)
    deltas = []
    for layer, (pat, width_name) in enumerate(zip(patterns, arch.widths), start=1):
        width = Monomial.of(**{width_name: 1})
        feature = tuple(pat.feature) if pat.feature else (target if pat.tag == "Magnetization" else LINEAR)
        if pat.tag == "GP":
            ledger = ledger.lazy()
            continue
        current = ledger.get(feature)
        if current is None:
            raise InfeasiblePatternError(
                f"layer {layer}: feature He_{feature[1]} is not expressible by the kernel feeding this layer")
        if pat.tag == "GFL":
            D = pat.monomial
            if arch.tag == "cnn":
                deltas.append((layer, _as_posy(width * D)))
            elif isinstance(pat.param, str):
                # N (D - 1) / 2 without its D-independent offset, which does not move the minimizer.
                deltas.append((layer, _as_posy(width * D * 0.5)))
            elif pat.param != 1:
                deltas.append((layer, _as_posy(width * (0.5 * (pat.param - 1)))))
            ledger = _amplify(ledger.lazy(), feature, D)
        else:
            strength = pat.monomial  # total squared amplitude of the specializing neurons
            deltas.append((layer, current * strength))
            new = ledger.lazy()
            spiked = _as_posy(width / strength)
            for m in range(1, max_degree + 1):
                f = hermite_feature(m)
                if ledger.overlaps(feature, f):
                    new.entries[f] = spiked
            ledger = new

    a_y = ledger.get(target)
    if a_y is None:
        raise InfeasiblePatternError(
            f"target He_{target[1]} cannot be expressed with {arch.act} activations under {_labels(patterns)}")
    if arch.tag == "cnn":
        a_y = a_y * Monomial.of(Nw=1)
    if arch.regime == "mean_field":
        a_y = a_y * Monomial.of(chi=1)
    free = frozenset(s for _, p in deltas for s in p.symbols if ScaleSymbol.of(s).kind == "free_param")
    free |= frozenset(s for s in a_y.symbols if ScaleSymbol.of(s).kind == "free_param")
    return EnergyBudget(arch, patterns, tuple(deltas), a_y, free)


def _labels(patterns) -> str:
    return "-".join(p.label() for p in patterns)


def _amplify(ledger: FeatureLedger, feature: tuple, D: Monomial) -> FeatureLedger:
    base = ledger.get(feature)
    new = dict(ledger.entries)
    amplified = base.as_monomial() / D
    new[feature] = _as_posy(amplified)
    k = feature[1]
    for j in range(2, ledger.max_degree // k + 1):
        if ledger.degree_available(k * j):
            new[hermite_feature(k * j)] = _as_posy(amplified ** j)
    return FeatureLedger(new, ledger.act, ledger.max_degree)


def _attention_budget(arch: ArchitectureSpec, pat: PatternKind) -> EnergyBudget:
    lazy = Monomial.of(L=1, d=3)
    if pat.tag == "GP":
        return EnergyBudget(arch, (pat,), (), _as_posy(lazy), frozenset())
    if pat.tag != "MSpec":
        raise InfeasiblePatternError("attention supports GP and MSpec patterns only")
    M = pat.monomial
    delta = _as_posy(M ** 2)
    a_y = _as_posy(lazy * Monomial.of(H=1) / M ** 2)
    if arch.regime == "mean_field":
        a_y = a_y * Monomial.of(chi=1)
    free = frozenset({pat.param}) if isinstance(pat.param, str) else frozenset()
    return EnergyBudget(arch, (pat,), ((1, delta),), a_y, free)


@dataclass
class MinimizeResult:
    value: float
    free_values: dict
    iterations: int = 0
    grad_norm: float = 0.0

    @property
    def free_rounded(self) -> dict:
        return {k: max(1, round(v)) if k.startswith("M") else v for k, v in self.free_values.items()}


def minimize_budget(b: Union[EnergyBudget, Posynomial, Monomial], scales: Mapping[str, float],
                    max_iter: int = 500, grad_tol: float = 1e-10) -> MinimizeResult:
    """Minimize a budget over its free parameters after fixing the bound scales.

    Works on ``F(u) = log sum_k c_k exp(a_k . u)`` with ``u`` the log of the
    free parameters, which is convex; damped Newton with backtracking.
    """
    posy = b.total if isinstance(b, EnergyBudget) else _as_posy(b)
    for name, v in scales.items():
        if not v > 0:
            raise DomainError(f"scale {name} must be positive, got {v}")
    missing = sorted(s for s in posy.symbols if ScaleSymbol.of(s).kind == "bound_scale" and s not in scales)
    if missing:
        raise DomainError(f"unassigned bound scales: {', '.join(missing)}")
    reduced = posy.substitute({k: v for k, v in scales.items() if ScaleSymbol.of(k).kind == "bound_scale"})
    free = sorted(reduced.symbols)
    if not free:
        return MinimizeResult(reduced.evaluate({}), {})

    A = np.array([[float(t.exps.get(s, 0)) for s in free] for t in reduced.terms])
    c = np.log([t.coeff for t in reduced.terms])

    def F(u):
        z = A @ u + c
        zmax = z.max()
        w = np.exp(z - zmax)
        return zmax + math.log(w.sum()), w / w.sum()

    u = np.zeros(len(free))
    f, p = F(u)
    gnorm = math.inf
    for it in range(1, max_iter + 1):
        g = A.T @ p
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol:
            break
        Am = A - p @ A
        H = Am.T @ (p[:, None] * Am)
        step = None
        for mu in (0.0, 1e-12, 1e-8, 1e-4, 1.0):
            try:
                step = -np.linalg.solve(H + mu * np.eye(len(free)), g)
                if np.all(np.isfinite(step)) and step @ g < 0:
                    break
            except np.linalg.LinAlgError:
                step = None
        if step is None or not step @ g < 0:
            step = -g
        cap = 20.0
        norm = float(np.max(np.abs(step)))
        if norm > cap:
            step = step * (cap / norm)
        t = 1.0
        while True:
            f_new, p_new = F(u + t * step)
            if f_new <= f + 1e-4 * t * float(step @ g) or t < 1e-12:
                break
            t *= 0.5
        u = u + t * step
        f, p = f_new, p_new
        if np.max(np.abs(u)) > 2000:
            raise ConvergenceError("budget is unbounded below in its free parameters",
                                   best=dict(zip(free, np.exp(np.clip(u, -700, 700)))))
    else:
        raise ConvergenceError(f"Newton did not converge (gradient norm {gnorm:.3g})",
                               best=dict(zip(free, np.exp(np.clip(u, -700, 700)))))
    return MinimizeResult(math.exp(f), {s: float(math.exp(v)) for s, v in zip(free, u)}, it, gnorm)


@dataclass
class ExponentFit:
    exponent: float
    rational: Fraction
    intercept: float
    residual: float
    minimizer_exponents: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"exponent": self.exponent, "rational": str(self.rational), "residual": self.residual,
                "minimizer_exponents": self.minimizer_exponents}


def scales_from_relation(relation: Mapping[str, tuple], pivot: float) -> dict:
    """Bound scales ``coeff * pivot ** power`` for every related symbol."""
    return {k: float(c) * pivot ** float(p) for k, (c, p) in relation.items()}


def extract_exponent(b: EnergyBudget, relation: Mapping[str, tuple], pivot_values: Sequence[float],
                     max_residual: float = 1e-3) -> ExponentFit:
    """Power-law exponent of the minimized energy along a one-parameter family of scales."""
    pv = np.asarray(sorted(pivot_values), dtype=float)
    if pv.size < 3 or pv[-1] / pv[0] < 100:
        raise DomainError("need at least 3 pivot values spanning 2 decades")
    logs, free_logs = [], {s: [] for s in sorted(b.free)}
    for v in pv:
        res = minimize_budget(b, scales_from_relation(relation, v))
        logs.append(math.log(res.value))
        for s in free_logs:
            free_logs[s].append(math.log(res.free_values[s]))
    x = np.log(pv)
    slope, intercept = np.polyfit(x, logs, 1)
    residual = float(np.max(np.abs(np.asarray(logs) - (slope * x + intercept))))
    if residual > max_residual:
        raise CrossoverError(f"energy is not a single power law over the pivot range (residual {residual:.3g})",
                             residual)
    mins = {s: float(np.polyfit(x, ys, 1)[0]) for s, ys in free_logs.items()}
    return ExponentFit(float(slope), Fraction(float(slope)).limit_denominator(MAX_DENOMINATOR),
                       float(intercept), residual, mins)


@dataclass
class RankedPattern:
    patterns: tuple
    label: str
    value: float
    free_values: dict
    rank: int
    budget: EnergyBudget


def select_winner(arch: ArchitectureSpec, candidates: Iterable[Sequence[PatternKind]],
                  scales: Mapping[str, float], rel_tie: float = 1e-9) -> list[RankedPattern]:
    """Rank feasible candidate assignments by minimized energy (rank 1 wins; ties share a rank)."""
    scored = []
    for pats in candidates:
        try:
            budget = build_budget(arch, pats)
        except InfeasiblePatternError:
            continue
        res = minimize_budget(budget, scales)
        scored.append((res.value, budget, res))
    if not scored:
        raise InfeasiblePatternError("no feasible candidate pattern")
    scored.sort(key=lambda s: s[0])
    out, rank, prev = [], 0, None
    for i, (value, budget, res) in enumerate(scored):
        if prev is None or value > prev * (1 + rel_tie):
            rank = i + 1
            prev = value
        out.append(RankedPattern(budget.patterns, budget.label, value, res.free_values, rank, budget))
    return out


def canonical_candidates(arch: ArchitectureSpec) -> dict:
    """Named pattern assignments considered for each architecture."""
    P = PatternKind
    if arch.tag == "fcn2":
        out = {"GP": [P.gp()], "GFL": [P.gfl("D")], "MSpec": [P.mspec("M")]}
        if arch.target[0] == "parity":
            out["MuSpec"] = [P.muspec("mu2")]
        return out
    if arch.tag == "fcn3":
        return {
            "GP-GP": [P.gp(), P.gp()],
            "GP-Sp": [P.gp(), P.mspec("M2")],
            "Sp-Mag": [P.mspec("M1"), P.magnetization("beta", arch.target_feature)],
        }
    if arch.tag == "cnn":
        return {"GP": [P.gp()], "GFL": [P.gfl("D")], "MSpec": [P.mspec("M")]}
    return {"GP": [P.gp()], "Spec": [P.mspec("M")]}


def delta_weight_space(Sigma, a_bar, N_prev: float, pseudo_inverse: bool = False) -> float:
    """KL-type cost of a Gaussian weight distribution ``N(a_bar, Sigma)`` against the prior.

    Evaluates ``tr(B Sigma) + a^T B a + a^T Sigma^{-1} a`` with
    ``B = N_prev I - Sigma^{-1}``.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    a = np.atleast_1d(np.asarray(a_bar, dtype=float))
    n = Sigma.shape[0]
    if Sigma.shape != (n, n) or a.shape != (n,):
        raise ContractError("Sigma must be n x n and a_bar length n")
    if pseudo_inverse:
        inv = np.linalg.pinv(Sigma, hermitian=True)
    else:
        try:
            L = np.linalg.cholesky(0.5 * (Sigma + Sigma.T))
        except np.linalg.LinAlgError:
            raise ContractError("Sigma is singular or not positive definite") from None
        Linv = np.linalg.inv(L)
        inv = Linv.T @ Linv
    B = N_prev * np.eye(n) - inv
    return float(np.trace(B @ Sigma) + a @ B @ a + a @ inv @ a)


def log_correction_report(pattern: PatternKind, params: Mapping[str, float]) -> dict:
    """Compare a pattern's linear cost with the logarithmic partition-function term.

    GFL uses ``D`` from ``params`` (cost ``(D-1)/2`` per neuron, log term
    ``log(D)/2``); specializations use ``delta`` (log term ``log(delta)/2``).
    ``subleading`` is true when the ratio shrinks as the driving parameter
    grows tenfold.
    """
    if pattern.tag == "GP":
        return {"delta": 0.0, "log_term": 0.0, "ratio": 0.0, "subleading": True}

    if pattern.tag == "GFL":
        driver = float(params.get("D", pattern.param if not isinstance(pattern.param, str) else 0))
        if not driver >= 1:
            raise DomainError("GFL needs D >= 1")

        def terms(D):
            return 0.5 * (D - 1.0), 0.5 * math.log(D)
    else:
        driver = float(params["delta"])
        if not driver > 0:
            raise DomainError("delta must be positive")

        def terms(delta):
            return delta, 0.5 * math.log(delta)

    delta, log_term = terms(driver)
    ratio = log_term / delta if delta > 0 else 0.0
    d2, l2 = terms(10 * driver)
    return {"delta": delta, "log_term": log_term, "ratio": ratio, "subleading": l2 / d2 < ratio or ratio == 0.0}


def result_json(b: EnergyBudget, result: Optional[MinimizeResult] = None,
                fits: Optional[Mapping[str, ExponentFit]] = None) -> dict:
    out = b.to_json()
    out["minimizers"] = result.free_values if result else {}
    out["value"] = result.value if result else None
    out["exponent_fits"] = {k: f.to_json() for k, f in (fits or {}).items()}
    return out
