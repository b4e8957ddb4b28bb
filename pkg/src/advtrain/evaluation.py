"""
Robustness evaluation, perturbation and EOT sweeps, and report writers.

Predictions of stochastic models use one noise draw per sample from a
"predict" stream keyed by (seed, sample index). Clean and adversarial
inputs are scored with the same streams, so an attack with eps=0 gives the
clean accuracy exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, generate
from .rng import BatchRNG, SampleRNG, derive_seed

COLUMN_ORDER = ("clean", "spsa", "pgd", "fgsm", "r_plus_fgsm", "rfgsm")
OBFUSCATION_GAP = 10.0


@dataclass
class EvalReport:
    accuracies: dict
    counts: dict
    eot_L: int
    config_hash: str
    per_run: dict = field(default_factory=dict)
    spsa_indices: list = field(default_factory=list)
    runtime: float = 0.0  # informational only, never written to report files

    @property
    def effective_robustness(self) -> float:
        return min(self.accuracies.values())

    @property
    def obfuscated(self) -> bool:
        a = self.accuracies
        return "spsa" in a and "pgd" in a and a["spsa"] < a["pgd"] - OBFUSCATION_GAP

    def columns(self):
        return [c for c in COLUMN_ORDER if c in self.accuracies] + [
            c for c in self.accuracies if c not in COLUMN_ORDER]


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _xy(data):
    if hasattr(data, "images"):
        return np.asarray(data.images), np.asarray(data.labels)
    x, y = data
    return np.asarray(x), np.asarray(y)


def accuracy(model, x, y, seed: int, indices=None, batch_size=500) -> float:
    """Accuracy in percent, one noise draw per sample from the predict stream."""
    if len(y) == 0:
        return float("nan")
    idx = np.arange(len(y)) if indices is None else np.asarray(indices)
    correct = 0
    for i in range(0, len(y), batch_size):
        rows = slice(i, i + batch_size)
        noise = SampleRNG(derive_seed(seed, "predict"), idx[rows])
        correct += int((model.predict(x[rows], noise) == y[rows]).sum())
    return 100.0 * correct / len(y)


def eval_attack_config(kind: str, eps: float, eot_L: int, pgd_steps=50, spsa_samples=2048,
                       spsa_steps=100, **extra) -> AttackConfig:
    if kind == "pgd":
        return AttackConfig(kind="pgd", eps=eps, steps=pgd_steps, eot_L=eot_L, **extra)
    if kind == "spsa":
        return AttackConfig(kind="spsa", eps=eps, steps=spsa_steps, spsa_samples=spsa_samples, **extra)
    return AttackConfig(kind=kind, eps=eps, eot_L=eot_L, **extra)


def evaluate_robustness(model, test_data, attacks=("clean", "pgd", "spsa"), eot_L=None, eps=8 / 255,
                        seed=0, spsa_subset=1000, pgd_steps=50, spsa_samples=2048, spsa_steps=100,
                        workers=1, batch_size=100, subset=None) -> EvalReport:
    """Accuracy under each attack plus the minimum over all columns.

    ``attacks`` holds names ("clean", "pgd", "spsa", "fgsm", "rfgsm",
    "r_plus_fgsm") or AttackConfig objects. SPSA runs on a seeded random
    subset of ``spsa_subset`` samples; every other column uses all samples
    (or the first ``subset``).
    """
    t0 = time.perf_counter()
    if not attacks:
        raise ValueError("at least one attack is required")
    x, y = _xy(test_data)
    if subset is not None:
        x, y = x[:subset], y[:subset]
    if eot_L is None:
        eot_L = 100 if getattr(model, "stochastic", False) else 1
    acc, counts, spsa_idx = {}, {}, []
    settings = {"eps": eps, "seed": seed, "eot_L": eot_L, "n": len(y)}
    model.eval()
    for a in attacks:
        if isinstance(a, AttackConfig):
            cfg, name = a, a.kind
        elif a == "clean":
            cfg, name = None, "clean"
        else:
            cfg = eval_attack_config(a, eps, eot_L, pgd_steps, spsa_samples, spsa_steps)
            name = a
        rows = np.arange(len(y))
        if name == "spsa" and spsa_subset is not None and spsa_subset < len(y):
            perm = BatchRNG(derive_seed(seed, "spsa-subset")).permutation(len(y))
            rows = np.sort(perm[:spsa_subset])
            spsa_idx = rows.tolist()
        xs, ys = x[rows], y[rows]
        if cfg is not None:
            settings[name] = dict(cfg.__dict__)
            xs = generate(model, xs, ys, cfg, derive_seed(seed, "attack", name), batch_size, workers, rows)
        acc[name] = accuracy(model, xs, ys, seed, rows)
        counts[name] = int(len(rows))
    return EvalReport(acc, counts, eot_L, config_hash(settings), spsa_indices=spsa_idx,
                      runtime=time.perf_counter() - t0)


def perturbation_sweep(model, data, eps, multipliers=(0.5, 1.0, 1.5, 2.0), steps=50, eot_L=None, seed=0,
                       workers=1, batch_size=100):
    """PGD accuracy at each eps multiple, with alpha = 2 eps' / steps."""
    x, y = _xy(data)
    if eot_L is None:
        eot_L = 100 if model.stochastic else 1
    curve = []
    for m in multipliers:
        e = float(eps) * float(m)
        cfg = AttackConfig(kind="pgd", eps=e, steps=steps, alpha=2 * e / steps, eot_L=eot_L)
        adv = generate(model, x, y, cfg, derive_seed(seed, "attack", "pgd"), batch_size, workers)
        curve.append((float(m), e, accuracy(model, adv, y, seed)))
    return curve


def eot_sensitivity(model, data, eps, L_values=(1, 10, 100), steps=50, seed=0, workers=1, batch_size=100):
    """PGD accuracy as a function of the number of EOT samples L."""
    if not getattr(model, "stochastic", False):
        warnings.warn("model has no noise layer; the EOT curve is flat by construction", stacklevel=2)
    x, y = _xy(data)
    curve = []
    for L in L_values:
        cfg = AttackConfig(kind="pgd", eps=float(eps), steps=steps, eot_L=int(L))
        adv = generate(model, x, y, cfg, derive_seed(seed, "attack", "pgd"), batch_size, workers)
        curve.append((int(L), accuracy(model, adv, y, seed)))
    return curve


def write_report_csv(path, reports: dict):
    """One row per configuration; columns are accuracies in percent plus the minimum."""
    cols = []
    for r in reports.values():
        cols += [c for c in r.columns() if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config"] + cols + ["min", "obfuscated", "eot_L", "config_hash"])
        for name, r in reports.items():
            w.writerow([name] + [repr(r.accuracies[c]) if c in r.accuracies else "" for c in cols]
                       + [repr(r.effective_robustness), int(r.obfuscated), r.eot_L, r.config_hash])


def format_table(rows, columns=("clean", "spsa", "pgd"), stars=None) -> str:
    """Plain-text table: configuration, one column per attack and Min.

    ``rows`` maps configuration name to EvalReport or to a dict of column ->
    list of per-run values (shown as mean and std). ``stars`` optionally maps
    configuration name to a set of columns to mark as significant.
    """
    stars = stars or {}
    head = ["Configuration"] + [c.upper() if c != "clean" else "Clean" for c in columns] + ["Min"]
    lines = [head]
    for name, r in rows.items():
        cells = [name]
        if isinstance(r, EvalReport):
            vals = {c: [r.accuracies[c]] for c in columns if c in r.accuracies}
            vals["min"] = [r.effective_robustness]
        else:
            vals = r
        for c in list(columns) + ["min"]:
            v = vals.get(c)
            if v is None or len(v) == 0:
                cells.append("-")
                continue
            s = f"{np.mean(v):.1f}"
            if len(v) > 1:
                s += f"±{np.std(v, ddof=1):.1f}"
            if c in stars.get(name, ()):
                s += "*"
            cells.append(s)
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    out = []
    for k, row in enumerate(lines):
        out.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))))
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def write_curve_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
