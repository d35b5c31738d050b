"""Experiment presets and the replica-parallel ensemble runner.

A preset fixes a network family, a target and a grid of configuration
points. Each point runs ``replicas`` independent chains in fixed blocks; a
block is the unit of work handed to a worker, and every replica's random
streams depend only on ``(seed, point index, replica id)``, so results do
not depend on the number of workers.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from ..errors import DomainError, NumericalError
from ..numerics import RngStream
from .chain import run_chains
from .measure import (
    count_specialized,
    first_layer_overlaps,
    layer1_threshold,
    layer2_linear_overlaps,
    layer2_threshold,
    measure_alignment,
    test_set,
)
from .networks import NetworkSpec, TargetSpec, TrainConfig, sample_dataset

CSV_COLUMNS = ("preset", "replica", "seed", "d", "N1", "N2", "L", "H", "P", "kappa", "act",
               "alignment", "mse", "spec_count_l1", "spec_count_l2", "steps")
EXTRA_COLUMNS = ("spec_amp_l1", "u_drift", "eta_l1")
POINT_KEYS = ("arch", "d", "N1", "N2", "L", "H", "act", "sigma_sq", "regime", "chi", "d_out",
              "target", "m", "eps", "P", "kappa", "loss", "step", "n_steps", "burn_in", "thin", "n_test")
_STREAM_STRIDE = 1 << 20
_TEST_STREAM = 1 << 40
_THRESHOLD_STREAM = 1 << 41


@dataclass(frozen=True)
class Preset:
    name: str
    base: dict
    sweep: dict
    replicas: int = 50
    block: int = 10
    note: str = ""


PRESETS = {
    "two_layer_pstar_scan": Preset(
        "two_layer_pstar_scan",
        dict(arch="fcn2", act="erf", sigma_sq=(1.0, 1.0), target="hermite", m=3, kappa=1.0,
             n_steps=3000, burn_in=1500, thin=150),
        dict(d=(10, 20, 40), P_per_d=(5, 10, 20, 40, 80)),
        note="N1 = d; P* is where the mean alignment crosses 0.1"),
    "two_layer_width_scan": Preset(
        "two_layer_width_scan",
        dict(arch="fcn2", act="erf", sigma_sq=(1.0, 1.0), target="hermite", m=3, kappa=0.25, d=24,
             P_per_d=40, n_steps=3000, burn_in=1500, thin=150),
        dict(N1=(24, 96, 384)),
        note="specialized first-layer count against width"),
    "three_layer_N1_scan": Preset(
        "three_layer_N1_scan",
        dict(arch="fcn3", act="erf", sigma_sq=(0.25, 0.25, 0.25), target="hermite", m=3, kappa=0.125,
             d=10, N2=10, P_per_d=40, n_steps=4000, burn_in=2000, thin=200),
        dict(N1=(10, 20, 40, 80, 160, 320, 640)),
        note="first- and second-layer specialization against first-layer width"),
    "attention_collapse": Preset(
        "attention_collapse",
        dict(arch="attn", act="erf", sigma_sq=(1.0, 1.0), target="attention_cubic", kappa=0.1, d=8, H=2,
             n_steps=3000, burn_in=1500, thin=150),
        dict(L=(8, 16), P_scale=(0.5, 1, 2, 4, 8)),
        replicas=20, block=5,
        note="alignment against P / sqrt(L d^3)"),
    "parity_classification": Preset(
        "parity_classification",
        dict(arch="fcn2", act="relu", sigma_sq=(1.0, 1.0), target="parity", eps=0.1, d_out=2, loss="xent",
             kappa=0.05, d=16, P=400, n_steps=3000, burn_in=1500, thin=150),
        dict(N1=(32, 128, 512)),
        replicas=20,
        note="largest first-layer overlap with the parity directions against width"),
}

_DEFAULTS = dict(arch="fcn2", d=10, N1=0, N2=0, L=0, H=0, act="erf", sigma_sq=None, regime="standard",
                 chi=1.0, d_out=1, target="hermite", m=3, eps=0.0, P=None, kappa=1.0, loss="mse", step=None,
                 n_steps=3000, burn_in=1500, thin=150, n_test=4096)
_SCALE_KEYS = ("P_per_d", "P_scale")
_RUN_KEYS = ("replicas", "block")


def preset_names() -> tuple:
    return tuple(PRESETS)


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}") from None


def _as_tuple(v):
    if isinstance(v, (list, tuple)) and not (len(v) and isinstance(v[0], (list, tuple))):
        return tuple(v)
    return (v,)


def expand_points(preset: Preset, overrides: Optional[dict] = None) -> list[dict]:
    """Resolve the preset grid with overrides into fully explicit point configs.

    A list-valued override sweeps that key; a scalar pins it. Setting ``P``
    replaces any ``P_per_d`` / ``P_scale`` rule. ``sigma_sq`` is never swept.
    """
    overrides = dict(overrides or {})
    for k in _RUN_KEYS:
        overrides.pop(k, None)
    unknown = set(overrides) - set(POINT_KEYS) - set(_SCALE_KEYS)
    if unknown:
        raise DomainError(f"unknown override(s) {sorted(unknown)}; expected keys from "
                          f"{', '.join(POINT_KEYS + _SCALE_KEYS)}")
    base = dict(preset.base)
    sweep = {k: tuple(v) for k, v in preset.sweep.items()}
    if "P" in overrides:
        for k in _SCALE_KEYS:
            base.pop(k, None)
            sweep.pop(k, None)
    for k in _SCALE_KEYS:
        if k in overrides:
            base.pop("P", None)
            sweep.pop("P", None)
    for k, v in overrides.items():
        if k == "sigma_sq":
            base[k] = tuple(v)
            continue
        vals = _as_tuple(v)
        sweep.pop(k, None)
        base.pop(k, None)
        if len(vals) == 1:
            base[k] = vals[0]
        else:
            sweep[k] = vals
    keys = list(sweep)
    points = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        pt = dict(_DEFAULTS)
        pt.update(base)
        pt.update(zip(keys, combo))
        if not pt.get("N1") and pt["arch"] in ("fcn2", "fcn3"):
            pt["N1"] = pt["d"]
        if not pt.get("N2") and pt["arch"] == "fcn3":
            pt["N2"] = pt["d"]
        if pt.get("P") is None:
            if "P_per_d" in pt:
                pt["P"] = int(round(pt["P_per_d"] * pt["d"]))
            elif "P_scale" in pt:
                pt["P"] = int(round(pt["P_scale"] * math.sqrt(pt["L"] * pt["d"] ** 3)))
            else:
                raise DomainError("no sample size: set P, P_per_d or P_scale")
        for k in _SCALE_KEYS:
            pt.pop(k, None)
        if pt["sigma_sq"] is None:
            pt["sigma_sq"] = (1.0,) * (3 if pt["arch"] == "fcn3" else 2)
        pt["sigma_sq"] = tuple(float(s) for s in pt["sigma_sq"])
        for k in ("d", "N1", "N2", "L", "H", "d_out", "m", "P", "n_steps", "burn_in", "thin", "n_test"):
            pt[k] = int(pt[k])
        for k in ("kappa", "chi", "eps"):
            pt[k] = float(pt[k])
        if pt["step"] is not None:
            pt["step"] = float(pt["step"])
        specs_of(pt)  # validate early
        points.append(pt)
    return points


def specs_of(pt: dict):
    net = NetworkSpec(pt["arch"], pt["d"], pt["N1"], pt["N2"], pt["L"], pt["H"], pt["act"], pt["sigma_sq"],
                      pt["regime"], pt["chi"], pt["d_out"])
    tgt = TargetSpec(pt["target"], m=pt["m"], eps=pt["eps"])
    tgt.check(net)
    cfg = TrainConfig(pt["P"], pt["kappa"], pt["loss"], pt["step"], pt["n_steps"], pt["burn_in"], pt["thin"])
    return net, tgt, cfg


def replica_streams(seed: int, point_index: int, replica: int):
    """Data, noise and initialization streams of one replica."""
    k = 3 * (point_index * _STREAM_STRIDE + replica)
    return RngStream(seed, k), RngStream(seed, k + 1), RngStream(seed, k + 2)


@lru_cache(maxsize=64)
def _shared_test(pt_items: tuple, seed: int, point_index: int):
    net, tgt, _ = specs_of(dict(pt_items))
    return test_set(net, tgt, dict(pt_items)["n_test"], RngStream(seed, _TEST_STREAM + point_index))


@lru_cache(maxsize=64)
def _l2_threshold(pt_items: tuple, seed: int, point_index: int) -> float:
    net, _, _ = specs_of(dict(pt_items))
    return layer2_threshold(net, RngStream(seed, _THRESHOLD_STREAM + point_index))


def _freeze(pt: dict) -> tuple:
    return tuple(sorted(pt.items()))


def run_block(preset_name: str, pt: dict, point_index: int, replicas: tuple, seed: int) -> dict:
    """Run one block of replicas of one point; returns rows, overlaps and failures."""
    net, tgt, cfg = specs_of(pt)
    streams = [replica_streams(seed, point_index, r) for r in replicas]
    try:
        data = sample_dataset(net, tgt, cfg.P, [s[0] for s in streams]) if cfg.P > 0 else None
        res = run_chains(net, data, cfg, [s[1] for s in streams], [s[2] for s in streams])
    except NumericalError as exc:
        return dict(point=point_index, rows=[], overlaps={}, failures=[
            dict(point=point_index, replica=r, error=type(exc).__name__, message=str(exc)) for r in replicas])
    X, y = _shared_test(_freeze(pt), seed, point_index)
    al = measure_alignment(res.samples, net, tgt, pt["n_test"], test=(X, y))
    final = res.final
    overlaps = {}
    if net.arch in ("fcn2", "fcn3"):
        o1 = np.abs(first_layer_overlaps(final[0], tgt.feature_directions(net.d))).max(axis=-1)
        c1 = count_specialized(o1, layer1_threshold(net))
        amp = o1.max(axis=-1)
        overlaps["l1"] = o1
    else:
        c1 = amp = None
    if net.arch == "fcn3":
        lin = X[0] @ tgt.direction(net.d)
        o2 = layer2_linear_overlaps(final, net, X, lin)
        c2 = count_specialized(o2, _l2_threshold(_freeze(pt), seed, point_index))
        overlaps["l2"] = o2
    else:
        c2 = None
    rows = []
    for i, r in enumerate(replicas):
        rows.append({
            "preset": preset_name, "replica": r, "seed": seed, "d": net.d, "N1": net.N1, "N2": net.N2,
            "L": net.L, "H": net.H, "P": cfg.P, "kappa": cfg.kappa, "act": net.act,
            "alignment": float(al.alignment[:, i].mean()), "mse": float(al.mse[:, i].mean()),
            "spec_count_l1": "" if c1 is None else int(c1[i]),
            "spec_count_l2": "" if c2 is None else int(c2[i]),
            "steps": cfg.n_steps,
            "spec_amp_l1": "" if amp is None else float(amp[i]),
            "u_drift": float(res.u_drift[i]), "eta_l1": float(res.eta[i, 0]),
        })
    return dict(point=point_index, rows=rows, overlaps=overlaps, failures=[])


@dataclass
class EnsembleResult:
    preset: str
    seed: int
    replicas: int
    points: list
    rows: list
    failures: list
    overlaps: dict = field(default_factory=dict)

    def summary(self) -> list[dict]:
        """Per-point mean, spread and quantiles of alignment plus mean counts."""
        out = []
        for i, pt in enumerate(self.points):
            rows = [r for r in self.rows if _point_of(r, pt)]
            entry = {k: pt[k] for k in ("d", "N1", "N2", "L", "H", "P", "kappa")}
            entry["point"] = i
            entry["n_ok"] = len(rows)
            if rows:
                a = np.array([r["alignment"] for r in rows])
                entry.update(alignment_mean=float(a.mean()),
                             alignment_sem=float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else float("nan"),
                             alignment_q05=float(np.quantile(a, 0.05)),
                             alignment_q50=float(np.quantile(a, 0.5)),
                             alignment_q95=float(np.quantile(a, 0.95)),
                             mse_mean=float(np.mean([r["mse"] for r in rows])))
                for col in ("spec_count_l1", "spec_count_l2", "spec_amp_l1"):
                    vals = [r[col] for r in rows if r[col] != ""]
                    entry[col + "_mean"] = float(np.mean(vals)) if vals else ""
            out.append(entry)
        return out

    def write_csv(self, path, extra: bool = True):
        cols = CSV_COLUMNS + (EXTRA_COLUMNS if extra else ())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in sorted_rows(self.rows):
                w.writerow({k: _fmt(r[k]) for k in cols})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _point_of(row: dict, pt: dict) -> bool:
    return all(row[k] == pt[k] for k in ("d", "N1", "N2", "L", "H", "P")) and row["kappa"] == pt["kappa"] \
        and row["act"] == pt["act"]


def sorted_rows(rows: list) -> list:
    return sorted(rows, key=lambda r: (r["d"], r["N1"], r["N2"], r["L"], r["H"], r["P"], r["kappa"], r["replica"]))


def _call_block(args):
    return run_block(*args)


def run_ensemble(preset: str, overrides: Optional[dict] = None, jobs: int = 1, seed: int = 0,
                 progress: Optional[Callable[[int, int], None]] = None) -> EnsembleResult:
    """Run every point of a preset; failures are collected, the run continues."""
    p = get_preset(preset)
    overrides = dict(overrides or {})
    replicas = int(overrides.get("replicas", p.replicas))
    block = int(overrides.get("block", p.block))
    if replicas < 1 or block < 1:
        raise DomainError("replicas and block must be >= 1")
    if jobs < 1:
        raise DomainError("jobs must be >= 1")
    points = expand_points(p, overrides)
    tasks = []
    for i, pt in enumerate(points):
        for start in range(0, replicas, block):
            tasks.append((p.name, pt, i, tuple(range(start, min(start + block, replicas))), int(seed)))
    results = []
    if jobs == 1:
        for k, t in enumerate(tasks):
            results.append(_call_block(t))
            if progress:
                progress(k + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for k, r in enumerate(pool.map(_call_block, tasks)):
                results.append(r)
                if progress:
                    progress(k + 1, len(tasks))
    rows, failures, overlaps = [], [], {}
    for r in results:
        rows.extend(r["rows"])
        failures.extend(r["failures"])
        for name, arr in r["overlaps"].items():
            overlaps.setdefault((r["point"], name), []).append(arr)
    overlaps = {k: np.concatenate(v) for k, v in overlaps.items()}
    return EnsembleResult(p.name, int(seed), replicas, points, sorted_rows(rows), failures, overlaps)


def crossing_point(xs, ys, level: float) -> float:
    """Log-linear interpolation of the first ``x`` where ``y`` reaches ``level``.

    Returns ``nan`` when the sequence never crosses.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    order = np.argsort(xs)
    xs, ys = xs[order], ys[order]
    for i in range(1, len(xs)):
        if ys[i - 1] < level <= ys[i]:
            t = (level - ys[i - 1]) / (ys[i] - ys[i - 1])
            return float(math.exp(math.log(xs[i - 1]) + t * (math.log(xs[i]) - math.log(xs[i - 1]))))
    return float("nan")
