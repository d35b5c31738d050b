"""Command-line front end: ``predict``, ``ldt``, ``train`` and ``propagate``.

Every run writes ``<out>/<command>-<timestamp>/`` with ``results.csv``,
``manifest.json`` and, unless ``--no-figures`` is given, PNG figures. Option
values resolve as command-line flag, then the command's table in the
``--config`` TOML file, then the built-in default.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

from . import __version__
from .errors import CrossoverError, DomainError, NumericalError, UsageError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "SCALESEER_SEED"


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- value parsing

def _num(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"not a number: {text!r}") from None


def _int(text) -> int:
    v = _num(str(text))
    if v != int(v):
        raise UsageError(f"not an integer: {text!r}")
    return int(v)


def _list_of(conv):
    def parse(value):
        if isinstance(value, (list, tuple)):
            return [conv(v) for v in value]
        return [conv(v) for v in str(value).split(",") if v.strip()]
    return parse


def parse_sweep(text: str) -> list[int]:
    """``start:stop:xK`` (geometric) or ``start:stop:+K`` (arithmetic), inclusive."""
    m = re.fullmatch(r"\s*([\d.e+]+):([\d.e+]+):([x+])([\d.e+]+)\s*", str(text))
    if not m:
        raise UsageError(f"bad sweep {text!r}; expected start:stop:xFACTOR or start:stop:+STEP")
    start, stop, kind, k = float(m[1]), float(m[2]), m[3], float(m[4])
    if start <= 0 or stop < start or (kind == "x" and k <= 1) or (kind == "+" and k <= 0):
        raise UsageError(f"bad sweep {text!r}")
    out, v = [], start
    while v <= stop * (1 + 1e-12):
        out.append(int(round(v)))
        v = v * k if kind == "x" else v + k
    return out


_TERM = re.compile(r"^(?:(?P<c>[\d.eE+-]+)\*)?(?P<s>[A-Za-z_]\w*)(?:\^\(?(?P<p>[-\d./]+)\)?)?$")


def _power(text: Optional[str]) -> Fraction:
    if text is None:
        return Fraction(1)
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"bad exponent {text!r}") from None


def parse_relation(text: str) -> tuple[dict, str]:
    """Parse ``N1=N2=d`` or ``N=d^10, chi=N`` into ``{symbol: (coeff, power)}``.

    Each comma-separated chain sets every symbol equal to its right-most
    expression. Exactly one symbol, the pivot, must be free; symbols may refer
    to earlier ones. Bare numbers pin a symbol to a constant.
    """
    defs: dict[str, tuple] = {}
    chains = [c.strip() for c in str(text).split(",") if c.strip()]
    if not chains:
        raise UsageError("empty relation")
    raw = []
    for chain in chains:
        parts = [p.strip().replace(" ", "") for p in chain.split("=")]
        if len(parts) < 2 or not all(parts):
            raise UsageError(f"bad relation {chain!r}")
        raw.append(parts)
    referenced = set()
    for parts in raw:
        m = _TERM.match(parts[-1])
        if m:
            referenced.add(m["s"])
    assigned = {p for parts in raw for p in parts[:-1]}
    pivots = referenced - assigned
    if len(pivots) != 1:
        raise UsageError(f"relation must have exactly one free pivot symbol, found {sorted(pivots) or 'none'}")
    pivot = pivots.pop()
    defs[pivot] = (1.0, Fraction(1))
    pending = list(raw)
    while pending:
        progressed = False
        for parts in list(pending):
            rhs = parts[-1]
            try:
                value = (float(rhs), Fraction(0))
            except ValueError:
                m = _TERM.match(rhs)
                if not m:
                    raise UsageError(f"cannot parse {rhs!r}; use [coeff*]symbol[^power]") from None
                if m["s"] not in defs:
                    continue
                c0, p0 = defs[m["s"]]
                c = float(m["c"]) if m["c"] else 1.0
                p = _power(m["p"])
                value = (c * c0 ** float(p), p0 * p)
            for lhs in parts[:-1]:
                if not re.fullmatch(r"[A-Za-z_]\w*", lhs):
                    raise UsageError(f"left-hand side {lhs!r} is not a symbol")
                defs[lhs] = value
            pending.remove(parts)
            progressed = True
        if not progressed:
            raise UsageError(f"relation has unresolved references: {pending}")
    return {k: (float(c), float(p)) for k, (c, p) in defs.items()}, pivot


# ---------------------------------------------------------------- option tables

@dataclass(frozen=True)
class Opt:
    name: str
    conv: Callable
    default: Any
    help: str
    flag: bool = False


def _add_opts(p: argparse.ArgumentParser, opts):
    for o in opts:
        flag = "--" + o.name.replace("_", "-")
        if o.flag:
            p.add_argument(flag, dest=o.name, action="store_const", const=True, default=None, help=o.help)
        else:
            p.add_argument(flag, dest=o.name, default=None, help=f"{o.help} (default: {o.default})")


def _resolve(opts, args, table: dict) -> dict:
    known = {o.name for o in opts}
    extra = set(table) - known
    if extra:
        raise UsageError(f"unknown config key(s) {sorted(extra)}; expected {sorted(known)}")
    out = {}
    for o in opts:
        v = getattr(args, o.name, None)
        if v is None:
            v = table.get(o.name, o.default)
        if v is not None and not o.flag:
            v = o.conv(v)
        elif o.flag:
            v = bool(v)
        out[o.name] = v
    return out


SCALE_NAMES = ("d", "N", "N1", "N2", "S", "Nw", "L", "H", "chi", "kappa")

PREDICT_OPTS = [
    Opt("arch", str, "fcn2", "architecture: fcn2, fcn3, cnn or attention"),
    Opt("m", _int, 3, "Hermite degree of the target (parity order for --target parity)"),
    Opt("target", str, "hermite", "target family: hermite or parity"),
    Opt("act", str, "erf", "activation: erf or relu"),
    Opt("regime", str, "standard", "standard or mean-field"),
    Opt("patterns", _list_of(str), None, "comma-separated pattern names (default: all candidates)"),
    Opt("relation", str, None, "scaling relation such as N1=N2=d (default depends on --arch)"),
    Opt("pivots", _list_of(_num), [1e4, 1e6, 1e8], "pivot values for exponent fits"),
] + [Opt(s, _num, None, f"value of scale {s}") for s in SCALE_NAMES]

LDT_OPTS = [
    Opt("d", _int, 40, "input dimension"),
    Opt("N", _int, None, "hidden width (default: equal to d)"),
    Opt("alpha", _num, 0.9, "alignment level in (0, 1]"),
    Opt("kappa", _num, 1.0, "ridge"),
    Opt("k_factor", _num, 1.0, "kernel normalization factor"),
    Opt("m", _int, 3, "Hermite degree of the target"),
    Opt("sweep_d", str, None, "sweep d as start:stop:xFACTOR with N = d"),
    Opt("profile", bool, False, "also write the beta profile at the solved tilt", flag=True),
]

TRAIN_OPTS = [
    Opt("replicas", _int, None, "replicas per configuration point"),
    Opt("block", _int, None, "replicas per work unit"),
    Opt("d", _list_of(_int), None, "input dimension(s)"),
    Opt("N1", _list_of(_int), None, "first hidden width(s)"),
    Opt("N2", _list_of(_int), None, "second hidden width(s)"),
    Opt("L", _list_of(_int), None, "context length(s)"),
    Opt("H", _list_of(_int), None, "number of heads"),
    Opt("P", _list_of(_int), None, "training-set size(s)"),
    Opt("P_per_d", _list_of(_num), None, "training-set size(s) as multiples of d"),
    Opt("P_scale", _list_of(_num), None, "training-set size(s) in units of sqrt(L d^3)"),
    Opt("kappa", _list_of(_num), None, "ridge value(s)"),
    Opt("act", str, None, "activation"),
    Opt("sigma_sq", _list_of(_num), None, "per-layer prior variances"),
    Opt("regime", str, None, "standard or mean_field"),
    Opt("chi", _num, None, "mean-field scale"),
    Opt("eps", _num, None, "parity input noise variance"),
    Opt("m", _int, None, "Hermite degree of the target"),
    Opt("step", _num, None, "Langevin step in prior-whitened units (default: from curvature)"),
    Opt("steps", _int, None, "chain length"),
    Opt("burn_in", _int, None, "discarded initial steps"),
    Opt("thin", _int, None, "keep every k-th post-burn-in step"),
    Opt("n_test", _int, None, "shared test points per configuration"),
]

GFL_OPTS = [
    Opt("D", _list_of(_num), [1, 2, 4, 8, 16, 32, 40], "amplification factors"),
    Opt("d", _int, 60, "input dimension"),
    Opt("N1", _int, 500, "first hidden width"),
    Opt("N2", _int, 500, "second hidden width"),
    Opt("Pprime", _int, 1500, "kernel sample size"),
    Opt("act", str, "relu", "activation"),
    Opt("data", str, "iid", "input model: iid or powerlaw:EXPONENT"),
    Opt("layer_norm", bool, False, "normalize second-layer inputs per sample", flag=True),
    Opt("mode_index", _int, None, "eigenmode of the input kernel to amplify (0 = top)"),
]

SPIKE_OPTS = [
    Opt("M", _list_of(_int), [1, 2, 4, 8, 16], "numbers of spiked neurons"),
    Opt("d", _int, 40, "input dimension"),
    Opt("N", _int, 400, "hidden width"),
    Opt("Pprime", _int, 2000, "kernel sample size"),
    Opt("act", str, "erf", "activation"),
]


# ---------------------------------------------------------------- outputs

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if hasattr(x, "item") and callable(x.item):
        return x.item()
    return x


def make_run_dir(out: Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{stamp}"
    path, k = base, 1
    while path.exists():
        k += 1
        path = Path(f"{base}-{k}")
    path.mkdir(parents=True)
    return path


def write_rows(path: Path, rows: list, columns: list):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in columns})


@dataclass
class RunContext:
    command: str
    config: dict
    seed: int
    run_dir: Path
    figures: bool
    jobs: int
    quiet: bool

    def say(self, text: str):
        if not self.quiet:
            print(text)

    def manifest(self, outputs: list, extra: Optional[dict] = None):
        data = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": __version__,
            "outputs": [str(p.name) for p in outputs],
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if extra:
            data.update(extra)
        with open(self.run_dir / "manifest.json", "w") as fh:
            json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _plot():
    from . import plotting
    return plotting


# ---------------------------------------------------------------- commands

DEFAULT_RELATIONS = {
    ("fcn2", "standard"): "N=d",
    ("fcn2", "mean_field"): "N=d, chi=N",
    ("fcn3", "standard"): "N1=N2=d",
    ("fcn3", "mean_field"): "N1=N2=d, chi=N2",
    ("cnn", "standard"): "N=Nw=S",
    ("cnn", "mean_field"): "N=Nw=S, chi=N",
    ("attention", "standard"): "L=d",
}


def cmd_predict(ctx: RunContext) -> int:
    from .scalecalc import ArchitectureSpec, canonical_candidates, extract_exponent, select_winner

    c = ctx.config
    regime = c["regime"].replace("-", "_")
    target = ("attention_cubic",) if c["arch"] == "attention" else (c["target"], c["m"])
    arch = ArchitectureSpec(c["arch"], target, c["act"], regime)
    cands = canonical_candidates(arch)
    if c["patterns"]:
        unknown = [p for p in c["patterns"] if p not in cands]
        if unknown:
            raise UsageError(f"unknown pattern(s) {unknown} for {arch.tag}; candidates: {', '.join(cands)}")
        cands = {k: cands[k] for k in c["patterns"]}
    rel_text = c["relation"] or DEFAULT_RELATIONS.get((arch.tag, regime))
    if rel_text is None:
        raise UsageError(f"no default relation for {arch.tag} in the {regime} regime; pass --relation")
    relation, pivot = parse_relation(rel_text)
    fixed = {s: c[s] for s in SCALE_NAMES if c[s] is not None and s not in relation}
    if arch.tag == "attention" and "H" not in relation:
        fixed.setdefault("H", 2.0)
    pivot_value = c[pivot] if c.get(pivot) is not None else 1e6
    from .scalecalc import scales_from_relation
    scales = dict(fixed)
    scales.update(scales_from_relation(relation, pivot_value))
    ranked = select_winner(arch, [cands[k] for k in cands], scales)
    names = {tuple(v): k for k, v in cands.items()}
    rows = []
    for r in ranked:
        fit_relation = dict(relation)
        fit_relation.update({k: (v, 0.0) for k, v in fixed.items()})
        row = {"rank": r.rank, "pattern": names.get(tuple(r.patterns), r.label), "label": r.label,
               "energy": r.value, "minimizers": json.dumps(_jsonable(r.free_values), sort_keys=True)}
        try:
            fit = extract_exponent(r.budget, fit_relation, c["pivots"])
            row.update(exponent=fit.exponent, exponent_rational=str(fit.rational), fit_residual=fit.residual,
                       minimizer_exponents=json.dumps(_jsonable(fit.minimizer_exponents), sort_keys=True))
        except CrossoverError as exc:
            row.update(exponent="", exponent_rational="crossover", fit_residual=exc.residual,
                       minimizer_exponents="")
        rows.append(row)
    cols = ["rank", "pattern", "label", "energy", "exponent", "exponent_rational", "fit_residual",
            "minimizers", "minimizer_exponents"]
    out_csv = ctx.run_dir / "results.csv"
    write_rows(out_csv, rows, cols)
    result = {"arch": arch.to_json(), "relation": rel_text, "pivot": pivot, "pivot_value": pivot_value,
              "scales": scales, "rows": rows}
    with open(ctx.run_dir / "results.json", "w") as fh:
        json.dump(_jsonable(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
    ctx.say(f"{arch.tag} ({regime}), relation {rel_text}, {pivot} = {pivot_value:g}")
    ctx.say(f"{'rank':>4}  {'pattern':<10} {'energy':>12}  {'exp(' + pivot + ')':>9}  minimizers")
    for r in rows:
        e = f"{r['exponent']:.4f}" if r["exponent"] != "" else "crossover"
        ctx.say(f"{r['rank']:>4}  {r['pattern']:<10} {r['energy']:>12.5g}  {e:>9}  {r['minimizers']}")
    ctx.manifest([out_csv, ctx.run_dir / "results.json"], {"winner": rows[0]["pattern"]})
    return EXIT_OK


def cmd_ldt(ctx: RunContext) -> int:
    from .ldt import TwoLayerLDTConfig, has_side_minima, solve_t_star
    from .kernels import loglog_slope

    c = ctx.config
    ds = parse_sweep(c["sweep_d"]) if c["sweep_d"] else [c["d"]]
    rows, results = [], []
    for d in ds:
        N = d if (c["sweep_d"] or c["N"] is None) else c["N"]
        cfg = TwoLayerLDTConfig(d=d, N=N, alpha=c["alpha"], kappa=c["kappa"], k_factor=c["k_factor"], m=c["m"])
        res = solve_t_star(cfg)
        results.append(res)
        row = res.to_json()
        row.pop("cfg")
        rows.append({"d": d, "N": N, "alpha": cfg.alpha, "kappa": cfg.kappa, **row,
                     "side_minima": has_side_minima(res)})
    cols = ["d", "N", "alpha", "kappa", "t_star", "energy", "p_star", "stationarity_residual",
            "fixed_point_residual", "side_minima"]
    outputs = [ctx.run_dir / "results.csv"]
    write_rows(outputs[0], rows, cols)
    extra = {}
    if len(rows) > 1:
        slope = loglog_slope([r["d"] for r in rows], [r["p_star"] for r in rows])
        extra["p_star_slope"] = slope
        ctx.say(f"P* vs d log-log slope: {slope:.4f}")
    if c["profile"]:
        prof = ctx.run_dir / "profile.csv"
        with open(prof, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d", "beta", "H"])
            for res in results:
                for b, h in res.beta_grid:
                    w.writerow([res.cfg.d, repr(float(b)), repr(float(h))])
        outputs.append(prof)
    if len(rows) == 1:
        ctx.say(json.dumps(_jsonable({**results[0].to_json(), "side_minima": rows[0]["side_minima"]}), indent=2))
    else:
        for r in rows:
            ctx.say(f"d={r['d']:>5} N={r['N']:>5} t*={r['t_star']:.6g} P*={r['p_star']:.6g}")
    if ctx.figures:
        plt = _plot()
        if len(rows) > 1:
            outputs.append(plt.ldt_sweep(rows, ctx.run_dir / "p_star_vs_d.png", extra.get("p_star_slope")))
        res = results[len(results) // 2]
        outputs.append(plt.beta_profile(res.beta_grid[:, 0], res.beta_grid[:, 1], ctx.run_dir / "beta_profile.png",
                                        f"d={res.cfg.d}, N={res.cfg.N}, t*={res.t_star:.4g}"))
    ctx.manifest(outputs, extra)
    return EXIT_OK


_TRAIN_KEYS = {"steps": "n_steps"}


def cmd_train(ctx: RunContext) -> int:
    from .sgldlab.ensemble import crossing_point, get_preset, run_ensemble
    from .kernels import loglog_slope

    c = dict(ctx.config)
    preset = get_preset(c.pop("preset"))
    overrides = {}
    for k, v in c.items():
        if v is None:
            continue
        key = _TRAIN_KEYS.get(k, k)
        if key == "sigma_sq":
            overrides[key] = tuple(v)
        elif isinstance(v, list):
            overrides[key] = v if len(v) > 1 else v[0]
        else:
            overrides[key] = v

    def progress(done, total):
        if not ctx.quiet:
            print(f"\r{done}/{total} blocks", end="" if done < total else "\n", file=sys.stderr, flush=True)

    res = run_ensemble(preset.name, overrides, jobs=ctx.jobs, seed=ctx.seed, progress=progress)
    out_csv = ctx.run_dir / "results.csv"
    res.write_csv(out_csv)
    summary = res.summary()
    sum_csv = ctx.run_dir / "summary.csv"
    cols = list(dict.fromkeys(k for s in summary for k in s))
    write_rows(sum_csv, summary, cols)
    outputs = [out_csv, sum_csv]
    extra = {"failures": res.failures, "points": res.points}
    width_key = "N1"
    for s in summary:
        ctx.say("  ".join(f"{k}={s[k]:.4g}" if isinstance(s[k], float) else f"{k}={s[k]}"
                          for k in ("d", "N1", "N2", "L", "P", "n_ok", "alignment_mean", "spec_count_l1_mean",
                                    "spec_count_l2_mean") if k in s))
    if preset.name == "two_layer_pstar_scan":
        by_d = {}
        for s in summary:
            if s.get("n_ok"):
                by_d.setdefault(s["d"], []).append(s)
        pstars = {d: crossing_point([s["P"] for s in v], [s["alignment_mean"] for s in v], 0.1)
                  for d, v in by_d.items()}
        extra["p_star"] = pstars
        good = [(d, p) for d, p in pstars.items() if math.isfinite(p)]
        if len(good) > 1:
            extra["p_star_slope"] = loglog_slope([g[0] for g in good], [g[1] for g in good])
            ctx.say(f"P* (alignment 0.1) vs d slope: {extra['p_star_slope']:.3f}")
    if preset.name in ("two_layer_width_scan", "three_layer_N1_scan", "parity_classification"):
        col = "spec_amp_l1" if preset.name == "parity_classification" else "spec_count_l1"
        pts = [s for s in summary if s.get(col + "_mean") not in ("", None) and s[col + "_mean"] > 0]
        if len(pts) > 1:
            extra[col + "_slope"] = loglog_slope([s[width_key] for s in pts], [s[col + "_mean"] for s in pts])
            ctx.say(f"{col} vs {width_key} slope: {extra[col + '_slope']:.3f}")
    if res.failures:
        print(f"{len(res.failures)} replica(s) failed; see manifest.json", file=sys.stderr)
    if ctx.figures:
        plt = _plot()
        if preset.name == "attention_collapse":
            outputs.append(plt.alignment_curves(
                summary, "P", "L", ctx.run_dir / "alignment_collapse.png", "P / sqrt(L d^3)",
                x_fn=lambda s: s["P"] / math.sqrt(s["L"] * s["d"] ** 3)))
        elif preset.name == "two_layer_pstar_scan":
            outputs.append(plt.alignment_curves(summary, "P", "d", ctx.run_dir / "alignment_vs_P.png", level=0.1))
        else:
            outputs.append(plt.alignment_curves(summary, width_key, "P", ctx.run_dir / "alignment_vs_width.png"))
        if preset.name in ("two_layer_width_scan", "three_layer_N1_scan", "parity_classification"):
            cols_ = ("spec_amp_l1",) if preset.name == "parity_classification" else ("spec_count_l1", "spec_count_l2")
            ref = {"two_layer_width_scan": 0.5, "three_layer_N1_scan": 1 / 3, "parity_classification": 0.25}
            outputs.append(plt.count_scaling(summary, width_key, cols_, ctx.run_dir / "specialization_vs_width.png",
                                             ref[preset.name]))
        if res.overlaps:
            labels = {k: f"{k[1]} N1={res.points[k[0]]['N1']} P={res.points[k[0]]['P']}" for k in res.overlaps}
            outputs.append(plt.overlap_histograms(res.overlaps, labels, {}, ctx.run_dir / "overlap_histograms.png"))
    ctx.manifest(outputs, extra)
    return EXIT_OK if res.rows else EXIT_NUMERIC


def cmd_propagate(ctx: RunContext) -> int:
    from .kernels import GFL_COLUMNS, GFLConfig, SpikeConfig, loglog_slope, run_gfl_propagation, run_spike_experiment

    c = dict(ctx.config)
    exp = c.pop("experiment")
    outputs = [ctx.run_dir / "results.csv"]
    extra = {}
    if exp == "gfl":
        cfg = GFLConfig(d=c["d"], N1=c["N1"], N2=c["N2"], Pprime=c["Pprime"],
                        D_list=tuple(c["D"]), mode_index=c["mode_index"], act=c["act"], data=c["data"],
                        layer_norm=c["layer_norm"], seed=ctx.seed)
        rows = run_gfl_propagation(cfg)
        write_rows(outputs[0], rows, list(GFL_COLUMNS))
        D = [r["D"] for r in rows]
        extra["rkhs_slope"] = loglog_slope(D, [r["rkhs_phi2"] for r in rows]) if len(rows) > 1 else None
        extra["max_mismatch"] = max(abs(r["rkhs_phi2"] - r["inv_expectation"]) / r["rkhs_phi2"] for r in rows)
        for r in rows:
            ctx.say(f"D={r['D']:>6g}  rkhs={r['rkhs_phi2']:.6g}  1/expectation={r['inv_expectation']:.6g}")
        if extra["rkhs_slope"] is not None:
            ctx.say(f"RKHS vs D slope: {extra['rkhs_slope']:.3f}; max relative mismatch {extra['max_mismatch']:.3f}")
        if ctx.figures:
            outputs.append(_plot().gfl_propagation(rows, ctx.run_dir / "gfl_propagation.png", extra["rkhs_slope"]))
    elif exp == "spike":
        rows = []
        for M in c["M"]:
            r = run_spike_experiment(SpikeConfig(d=c["d"], N=c["N"], M=M, Pprime=c["Pprime"], act=c["act"],
                                                 seed=ctx.seed))
            rows.append({"N": c["N"], **r})
        write_rows(outputs[0], rows, ["N", "M", "rkhs_of_sigma_phi", "predicted"])
        for r in rows:
            ctx.say(f"M={r['M']:>5}  rkhs={r['rkhs_of_sigma_phi']:.6g}  N/M={r['predicted']:.6g}")
        finite = [r for r in rows if r["M"] > 0]
        if len(finite) > 1:
            extra["rkhs_slope_vs_N_over_M"] = loglog_slope([r["N"] / r["M"] for r in finite],
                                                            [r["rkhs_of_sigma_phi"] for r in finite])
            ctx.say(f"RKHS vs N/M slope: {extra['rkhs_slope_vs_N_over_M']:.3f}")
        if ctx.figures and finite:
            outputs.append(_plot().spike_propagation(finite, ctx.run_dir / "spike_propagation.png"))
    else:
        raise UsageError(f"unknown experiment {exp!r}; expected gfl or spike")
    ctx.manifest(outputs, extra)
    return EXIT_OK


COMMANDS = {
    "predict": (cmd_predict, PREDICT_OPTS),
    "ldt": (cmd_ldt, LDT_OPTS),
    "train": (cmd_train, TRAIN_OPTS),
    "propagate": (cmd_propagate, None),
}


# ---------------------------------------------------------------- entry point

def _add_globals(p: argparse.ArgumentParser, nested: bool):
    """Run-level flags; subcommands accept them too and override the top-level value."""
    def d(value):
        return argparse.SUPPRESS if nested else value
    p.add_argument("--out", default=d("runs"), help="output root directory (default: runs)")
    p.add_argument("--seed", type=int, default=d(None), help=f"random seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--config", default=d(None), help="TOML file with one table per command")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=d(True), help="skip PNG figures")
    p.add_argument("--jobs", type=int, default=d(1), help="worker processes for train (default: 1)")
    p.add_argument("--quiet", action="store_true", default=d(False), help="suppress stdout tables")


def build_parser() -> argparse.ArgumentParser:
    p = _ArgParser(prog="scaleseer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--from-manifest", dest="from_manifest", default=None,
                   help="re-run the command and configuration recorded in a manifest.json")
    _add_globals(p, nested=False)
    sub = p.add_subparsers(dest="command", parser_class=_ArgParser)
    sp = sub.add_parser("predict", help="rank feature-learning patterns and fit scaling exponents")
    _add_opts(sp, PREDICT_OPTS)
    _add_globals(sp, nested=True)
    sp = sub.add_parser("ldt", help="solve the two-layer large-deviation saddle point")
    _add_opts(sp, LDT_OPTS)
    _add_globals(sp, nested=True)
    sp = sub.add_parser("train", help="run a Langevin ensemble preset")
    sp.add_argument("preset", help="preset name")
    _add_opts(sp, TRAIN_OPTS)
    _add_globals(sp, nested=True)
    sp = sub.add_parser("propagate", help="kernel feature-propagation experiments")
    psub = sp.add_subparsers(dest="experiment", parser_class=_ArgParser)
    for name, opts, text in (("gfl", GFL_OPTS, "amplify one eigenmode and track the squared feature"),
                             ("spike", SPIKE_OPTS, "spike M neurons onto the target")):
        ep = psub.add_parser(name, help=text)
        _add_opts(ep, opts)
        _add_globals(ep, nested=True)
    return p


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid TOML in {path}: {exc}") from None


def _resolve_command(args, table: dict) -> tuple[str, dict]:
    cmd = args.command
    if cmd == "propagate":
        exp = args.experiment
        if exp is None:
            raise UsageError("propagate needs an experiment: gfl or spike")
        opts = GFL_OPTS if exp == "gfl" else SPIKE_OPTS
        sub = table.get(exp, {}) if isinstance(table.get(exp), dict) else {}
        cfg = _resolve(opts, args, sub)
        cfg["experiment"] = exp
        return cmd, cfg
    opts = COMMANDS[cmd][1]
    cfg = _resolve(opts, args, {k: v for k, v in table.items() if k != "preset"})
    if cmd == "train":
        cfg["preset"] = args.preset
    return cmd, cfg


def _seed(args, file_cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        try:
            with open(args.from_manifest) as fh:
                man = json.load(fh)
            cmd, cfg, seed = man["command"], man["config"], int(man["seed"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot use manifest {args.from_manifest}: {exc}") from None
        if cmd not in COMMANDS:
            raise UsageError(f"manifest names unknown command {cmd!r}")
    else:
        if args.command is None:
            parser.print_help()
            raise UsageError("a command is required: predict, ldt, train or propagate")
        file_cfg = _load_toml(args.config) if args.config else {}
        table = file_cfg.get(args.command, {})
        if not isinstance(table, dict):
            raise UsageError(f"config entry [{args.command}] must be a table")
        cmd, cfg = _resolve_command(args, table)
        seed = _seed(args, file_cfg)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    run_dir = make_run_dir(Path(args.out), cmd)
    ctx = RunContext(cmd, cfg, seed, run_dir, args.figures, args.jobs, args.quiet)
    code = COMMANDS[cmd][0](ctx)
    if not args.quiet:
        print(f"wrote {run_dir}")
    return code


def main(argv=None) -> int:
    try:
        code = run(argv)
    except UsageError as exc:
        _report(exc, EXIT_USAGE)
        return EXIT_USAGE
    except NumericalError as exc:
        _report(exc, EXIT_NUMERIC)
        return EXIT_NUMERIC
    return code


def _report(exc: Exception, code: int):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
