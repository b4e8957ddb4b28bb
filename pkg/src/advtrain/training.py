"""
Adversarial training: Adam, the triangular cyclical schedule, the
learning-rate range test and the epoch loop with checkpoint selection.
"""

from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd, run_attack
from .models import cross_entropy_loss, one_hot, save_checkpoint
from .rng import BatchRNG, SampleRNG, derive_seed

TRAIN_KINDS = ("nfgsm", "rfgsm", "fgsm", "r_plus_fgsm")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, lr=None, epoch=None, batch=None):
        super().__init__(message)
        self.lr, self.epoch, self.batch = lr, epoch, batch


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 100
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(kind="nfgsm", eps=8 / 255))
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_lo: float = 1e-4
    lr_hi: float = 1e-3
    cycle_len: int | None = None  # iterations; default is two epochs
    seed: int = 0
    val_steps: int = 10
    val_eot_L: int = 1
    patience: int = 10
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr_lo < self.lr_hi:
            raise ValueError(f"lr bounds must satisfy lo < hi, got ({self.lr_lo}, {self.lr_hi})")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.cycle_len is not None and self.cycle_len < 2:
            raise ValueError("cycle_len must be at least 2")
        if self.attack is not None and self.attack.kind not in TRAIN_KINDS:
            raise ValueError(f"training attack must be one of {TRAIN_KINDS}, got {self.attack.kind!r}")


@dataclass
class CheckpointRecord:
    epoch: int
    adv_val_loss: float
    path: str | None = None
    clean_val_acc: float = float("nan")
    lr: float = float("nan")
    selected: bool = False


def cyclical_lr(iteration: int, lo: float, hi: float, cycle_len: int) -> float:
    """Triangular wave: ``lo`` at the start of each cycle, ``hi`` half way through."""
    if cycle_len < 2:
        raise ValueError("cycle_len must be at least 2")
    pos = (iteration % cycle_len) / cycle_len
    frac = 1.0 - abs(2.0 * pos - 1.0)
    # written as a convex combination so both ends are hit exactly
    return lo * (1.0 - frac) + hi * frac


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor)."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)
    return params, state


def sgd_step(params: dict, grads: dict, state, lr: float, **_):
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            p.data = (p.data - lr * g).astype(p.dtype, copy=False)
    return params, state


@dataclass
class LRCurve:
    lrs: list
    losses: list
    raw: list
    diverged: bool = False

    def suggest(self):
        """(lo, hi) bounds: hi at the smoothed minimum, lo a decade below."""
        i = int(np.argmin(self.losses))
        hi = self.lrs[i]
        return hi / 10.0, hi


def sweep_lr(params: dict, loss_at, lr_span, iters: int, optimizer: str = "adam", smoothing: float = 0.9,
             diverge_factor: float = 4.0) -> LRCurve:
    """Run ``iters`` optimizer steps with the lr rising linearly across ``lr_span``.

    ``loss_at(i)`` must build the loss on a fresh tape and return ``(tape, loss)``.
    The smoothed curve is an exponential moving average with bias correction.
    """
    lo, hi = map(float, lr_span)
    if iters < 2:
        raise ValueError("iters must be at least 2")
    lrs, losses, raw = [], [], []
    state = AdamState()
    step = adam_step if optimizer == "adam" else sgd_step
    avg, first, diverged = 0.0, None, False
    for i in range(iters):
        lr = lo + (hi - lo) * i / (iters - 1)
        try:
            tape, loss = loss_at(i)
            val = float(loss.data)
        except T.NonFiniteError:
            diverged = True
            break
        avg = smoothing * avg + (1 - smoothing) * val
        smooth = avg / (1 - smoothing ** (i + 1))
        lrs.append(lr)
        raw.append(val)
        losses.append(smooth)
        if first is None:
            first = smooth
        if not math.isfinite(val) or (first > 0 and smooth > diverge_factor * first):
            diverged = True
            break
        # a loss that does not depend on any parameter leaves the tape empty
        grads = T.backward(tape, loss) if tape.nodes else {}
        named = {k: grads[p] for k, p in params.items() if p in grads}
        step(params, named, state, lr)
    return LRCurve(lrs, losses, raw, diverged)


def lr_range_test(model, x, y, lr_span=(1e-5, 1e-1), iters=100, batch_size=100, seed=0,
                  attack: AttackConfig | None = None, optimizer="adam") -> LRCurve:
    """Learning-rate range test on a copy of ``model`` (the original is untouched)."""
    model = copy.deepcopy(model)
    shuffle = BatchRNG(derive_seed(seed, "shuffle"))
    noise = BatchRNG(derive_seed(seed, "pnil"))
    arng = BatchRNG(derive_seed(seed, "attack"))
    order = shuffle.permutation(len(x))
    n_batches = max(1, len(x) // batch_size)

    def loss_at(i):
        j = i % n_batches
        if j == 0 and i > 0:
            order[:] = shuffle.permutation(len(x))
        rows = order[j * batch_size : (j + 1) * batch_size]
        xb, yb = x[rows], y[rows]
        if attack is not None and attack.eps > 0:
            xb = run_attack(model, xb, yb, attack, arng, check_success=False).x_adv
        with T.Tape() as tape:
            loss = cross_entropy_loss(model(xb, noise), one_hot(yb, model.num_classes))
        return tape, loss

    return sweep_lr(model.params, loss_at, lr_span, iters, optimizer)


def _val_attack(cfg: TrainConfig) -> AttackConfig | None:
    a = cfg.attack
    if a is None or a.eps == 0:
        return None
    return AttackConfig(kind="pgd", eps=a.eps, steps=cfg.val_steps, eot_L=cfg.val_eot_L,
                        clip_range=a.clip_range, random_start=True)


def validation_metrics(model, x, y, cfg: TrainConfig, batch_size=500):
    """(adversarial validation loss, clean validation accuracy %) with fixed per-sample streams."""
    if len(x) == 0:
        return float("nan"), float("nan")
    vcfg = _val_attack(cfg)
    idx = np.arange(len(x))
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        rows = slice(i, i + batch_size)
        xb, yb = x[rows], y[rows]
        pred = model.predict(xb, SampleRNG(derive_seed(cfg.seed, "val-predict"), idx[rows]))
        correct += int((pred == yb).sum())
        if vcfg is not None:
            xb = pgd(model, xb, yb, vcfg, SampleRNG(derive_seed(cfg.seed, "val-attack"), idx[rows]),
                     check_success=False).x_adv
        with T.no_grad():
            out = model(xb, SampleRNG(derive_seed(cfg.seed, "val-loss"), idx[rows]))
            total += float(cross_entropy_loss(out, one_hot(yb, model.num_classes), reduction="sum").data)
    return total / len(x), 100.0 * correct / len(x)


def adversarial_train(model, train_data, cfg: TrainConfig, val_data=None, progress=None):
    """Train ``model`` in place; returns ``(model, records)``.

    ``train_data``/``val_data`` are ``(x, y)`` pairs or objects with
    ``images``/``labels``. The parameters of the epoch with the lowest
    adversarial validation loss are restored at the end.
    """
    x, y = _xy(train_data)
    xv, yv = _xy(val_data) if val_data is not None else (x[:0], y[:0])
    n = len(x)
    n_batches = math.ceil(n / cfg.batch_size)
    cycle = cfg.cycle_len or 2 * n_batches
    shuffle = BatchRNG(derive_seed(cfg.seed, "shuffle"))
    arng = BatchRNG(derive_seed(cfg.seed, "attack"))
    noise = BatchRNG(derive_seed(cfg.seed, "pnil"))
    state = AdamState()
    yh_all = one_hot(y, model.num_classes)
    records: list[CheckpointRecord] = []
    best, best_state, since_best = math.inf, None, 0
    it = 0
    log_rows = []
    if cfg.checkpoint_dir:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffle.permutation(n)
        lr = cfg.lr_lo
        for b in range(n_batches):
            rows = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb = x[rows], y[rows]
            lr = cyclical_lr(it, cfg.lr_lo, cfg.lr_hi, cycle)
            try:
                # overflow surfaces as NonFiniteError below, so numpy's warning is redundant
                with np.errstate(over="ignore", invalid="ignore"):
                    if cfg.attack is not None and cfg.attack.eps > 0:
                        xb = run_attack(model, xb, yb, cfg.attack, arng, check_success=False).x_adv
                    with T.Tape() as tape:
                        loss = cross_entropy_loss(model(xb, noise), yh_all[rows])
                    grads = T.backward(tape, loss)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {b}, lr {lr:.3g}: {exc}",
                                       lr, epoch, b) from exc
            named = {k: grads[p] for k, p in model.params.items() if p in grads}
            adam_step(model.params, named, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            it += 1
        model.eval()
        adv_loss, acc = validation_metrics(model, xv, yv, cfg)
        path = None
        if cfg.checkpoint_dir:
            path = os.path.join(cfg.checkpoint_dir, f"epoch_{epoch:03d}.afck")
            save_checkpoint(path, model, {"epoch": epoch, "adv_val_loss": repr(adv_loss)})
        rec = CheckpointRecord(epoch, adv_loss, path, acc, lr)
        records.append(rec)
        log_rows.append((epoch, acc, adv_loss, lr))
        if progress:
            progress(rec)
        if math.isnan(adv_loss):
            # without validation data the latest epoch is kept
            best_state = model.state_dict()
        elif adv_loss < best:
            best, best_state, since_best = adv_loss, model.state_dict(), 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if records:
        select_checkpoint(records).selected = True
        model.load_state_dict(best_state)
    if cfg.log_path:
        write_log(cfg.log_path, log_rows)
    return model, records


def select_checkpoint(records):
    """The record with minimal adversarial validation loss (the earliest on ties)."""
    finite = [r for r in records if not math.isnan(r.adv_val_loss)]
    if not finite:
        return records[-1]
    return min(finite, key=lambda r: (r.adv_val_loss, r.epoch))


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "clean_val_acc", "adv_val_loss", "lr"])
        for epoch, acc, loss, lr in rows:
            w.writerow([epoch, repr(float(acc)), repr(float(loss)), repr(float(lr))])


def _xy(data):
    if hasattr(data, "images"):
        return data.images, data.labels
    return data
