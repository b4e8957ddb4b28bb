"""
Untargeted l-infinity attacks and the EOT gradient.

All generators take ``(model, x, y, cfg, rng)`` where ``x`` is a float array
(N, ...), ``y`` integer labels and ``rng`` a noise source that feeds both the
attack's own randomness and the model's noise layers. Passing a
:class:`~advtrain.rng.SampleRNG` makes every sample's result independent of
the batch it was computed in.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import cross_entropy_loss, one_hot
from .rng import SampleRNG

KINDS = ("fgsm", "r_plus_fgsm", "rfgsm", "nfgsm", "pgd", "spsa")
EVAL_KINDS = ("fgsm", "r_plus_fgsm", "rfgsm", "pgd", "spsa")


class AttackError(ValueError):
    """Invalid attack configuration or usage."""


@dataclass
class AttackConfig:
    kind: str = "pgd"
    eps: float = 0.03
    alpha: float | None = None
    steps: int | None = None
    eot_L: int = 1
    spsa_samples: int = 2048
    spsa_delta: float = 0.01
    spsa_lr: float = 0.01
    spsa_chunk: int = 512
    clip_range: tuple | None = (0.0, 1.0)
    random_start: bool = True
    rand_step: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.eps < 0:
            raise AttackError("eps must be non-negative")
        if self.steps is not None and self.steps < 1:
            raise AttackError("steps must be at least 1")
        if self.eot_L < 1:
            raise AttackError("eot_L must be at least 1")
        if self.clip_range is not None:
            lo, hi = self.clip_range
            if not lo < hi:
                raise AttackError(f"clip_range must satisfy lo < hi, got {self.clip_range}")
            self.clip_range = (float(lo), float(hi))
        if self.kind == "spsa" and self.spsa_samples < 1:
            raise AttackError("spsa_samples must be at least 1")

    @property
    def n_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return {"pgd": 50, "spsa": 100}.get(self.kind, 1)

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        if self.kind == "pgd":
            return 2.0 * self.eps / self.n_steps
        if self.kind == "rfgsm":
            return 1.2 * self.eps
        return self.eps

    def replace(self, **changes) -> "AttackConfig":
        d = asdict(self)
        d.update(changes)
        return AttackConfig(**d)


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    delta: np.ndarray
    success_mask: np.ndarray | None = field(default=None)


def _sign(g: np.ndarray) -> np.ndarray:
    # sign(0) == 0
    return np.sign(g)


def project_linf(x_adv, x, eps: float, clip_range=None) -> np.ndarray:
    """Nearest point to ``x_adv`` inside the eps-box around ``x`` (and the clip range).

    Bounds are evaluated in float64; results that land outside after rounding
    back to ``x.dtype`` are moved one ulp inwards so the budget holds exactly.
    """
    x64 = x.astype(np.float64)
    lo, hi = x64 - eps, x64 + eps
    if clip_range is not None:
        lo = np.maximum(lo, clip_range[0])
        hi = np.minimum(hi, clip_range[1])
        # samples already outside the valid range keep the eps-box only
        bad = lo > hi
        if bad.any():
            lo = np.where(bad, x64 - eps, lo)
            hi = np.where(bad, x64 + eps, hi)
    out = np.clip(np.asarray(x_adv, dtype=np.float64), lo, hi).astype(x.dtype)
    over = out.astype(np.float64) > hi
    if over.any():
        out[over] = np.nextafter(out[over], np.asarray(-np.inf, dtype=x.dtype))
    under = out.astype(np.float64) < lo
    if under.any():
        out[under] = np.nextafter(out[under], np.asarray(np.inf, dtype=x.dtype))
    return out


def _clip(x, clip_range):
    if clip_range is None:
        return x
    return np.clip(x, clip_range[0], clip_range[1]).astype(x.dtype, copy=False)


def _default_loss(model, y):
    yh = one_hot(y, model.num_classes)

    def loss(out, _y):
        return cross_entropy_loss(out, yh, reduction="none")

    return loss


def input_gradient(model, x, y, noise=None, loss_fn=None) -> np.ndarray:
    """Gradient of the summed per-sample loss w.r.t. ``x`` for one noise draw."""
    loss_fn = loss_fn or _default_loss(model, y)
    with model.frozen(), T.Tape() as tape:
        xt = T.Tensor(x, requires_grad=True)
        per = loss_fn(model(xt, noise), y)
        total = T.sum_(per) if per.ndim else per
    return T.backward(tape, total)[xt]


def eot_gradient(model, x, y, L: int, rng=None, loss_fn=None) -> np.ndarray:
    """Mean input gradient over ``L`` independent noise draws.

    Deterministic models are differentiated once, so the result does not
    depend on ``L``.
    """
    if L < 1:
        raise AttackError("L must be at least 1")
    if not getattr(model, "stochastic", False):
        return input_gradient(model, x, y, rng, loss_fn)
    total = None
    for _ in range(L):
        g = input_gradient(model, x, y, rng, loss_fn)
        total = g if total is None else total + g
    return total / L if L > 1 else total


def _streams(rng, n, cfg):
    return rng if rng is not None else SampleRNG(cfg.seed, np.arange(n))


def _finish(model, x, x_adv, y, rng, check_success):
    mask = None
    if check_success and y is not None and hasattr(model, "predict"):
        mask = model.predict(x_adv, rng) != np.asarray(y)
    return AdvBatch(x_adv, x_adv.astype(np.float64) - x.astype(np.float64), mask)


def fgsm(model, x, y, cfg: AttackConfig, rng=None, loss_fn=None, check_success=True) -> AdvBatch:
    """One signed-gradient step of size eps."""
    x = np.asarray(x)
    rng = _streams(rng, len(x), cfg)
    if cfg.eps == 0:
        return _finish(model, x, x.copy(), y, rng, check_success)
    g = eot_gradient(model, x, y, cfg.eot_L, rng, loss_fn)
    x_adv = project_linf(x + cfg.eps * _sign(g), x, cfg.eps, cfg.clip_range)
    return _finish(model, x, x_adv, y, rng, check_success)


def r_plus_fgsm(model, x, y, cfg: AttackConfig, rng=None, loss_fn=None, check_success=True) -> AdvBatch:
    """Random sign step of size rand_step, then an FGSM step of size eps - rand_step."""
    x = np.asarray(x)
    rng = _streams(rng, len(x), cfg)
    a = cfg.eps / 2 if cfg.rand_step is None else cfg.rand_step
    if a < 0 or (cfg.eps > 0 and a >= cfg.eps) or (cfg.eps == 0 and a != 0):
        raise AttackError(f"r_plus_fgsm needs 0 <= rand_step < eps, got {a} with eps={cfg.eps}")
    if cfg.eps == 0:
        return _finish(model, x, x.copy(), y, rng, check_success)
    x0 = x
    if a > 0:
        x0 = _clip(x + (a * _sign(rng.normal(x.shape))).astype(x.dtype), cfg.clip_range)
    g = eot_gradient(model, x0, y, cfg.eot_L, rng, loss_fn)
    x_adv = project_linf(x0 + (cfg.eps - a) * _sign(g), x, cfg.eps, cfg.clip_range)
    return _finish(model, x, x_adv, y, rng, check_success)


def rfgsm(model, x, y, cfg: AttackConfig, rng=None, loss_fn=None, check_success=True) -> AdvBatch:
    """Uniform start in the eps-box, one step of size alpha (1.2 eps), projected back."""
    x = np.asarray(x)
    rng = _streams(rng, len(x), cfg)
    if cfg.eps == 0:
        return _finish(model, x, x.copy(), y, rng, check_success)
    x0 = project_linf(x + rng.uniform(-cfg.eps, cfg.eps, x.shape), x, cfg.eps, cfg.clip_range)
    g = eot_gradient(model, x0, y, cfg.eot_L, rng, loss_fn)
    x_adv = project_linf(x0 + cfg.step_size * _sign(g), x, cfg.eps, cfg.clip_range)
    return _finish(model, x, x_adv, y, rng, check_success)


def nfgsm(model, x, y, cfg: AttackConfig, rng=None, loss_fn=None, check_success=True,
          evaluation: bool = False) -> AdvBatch:
    """Uniform noise in the eps-box, then a full eps signed step from the noisy point.

    No projection back to the eps-box around ``x``: perturbations reach 2 eps,
    so this generator is for training only.
    """
    if evaluation:
        raise AttackError("nfgsm leaves the eps-ball and must not be used for evaluation")
    x = np.asarray(x)
    rng = _streams(rng, len(x), cfg)
    if cfg.eps == 0:
        return _finish(model, x, x.copy(), y, rng, check_success)
    x_bn = (x + rng.uniform(-cfg.eps, cfg.eps, x.shape)).astype(x.dtype)
    g = eot_gradient(model, x_bn, y, cfg.eot_L, rng, loss_fn)
    x_adv = project_linf(x_bn + cfg.eps * _sign(g), x, 2 * cfg.eps, cfg.clip_range)
    return _finish(model, x, x_adv, y, rng, check_success)


def pgd(model, x, y, cfg: AttackConfig, rng=None, loss_fn=None, check_success=True) -> AdvBatch:
    """Projected signed-gradient ascent with optional uniform random start."""
    x = np.asarray(x)
    rng = _streams(rng, len(x), cfg)
    if cfg.eps == 0:
        return _finish(model, x, x.copy(), y, rng, check_success)
    x_adv = x
    if cfg.random_start:
        x_adv = project_linf(x + rng.uniform(-cfg.eps, cfg.eps, x.shape), x, cfg.eps, cfg.clip_range)
    alpha = cfg.step_size
    for _ in range(cfg.n_steps):
        g = eot_gradient(model, x_adv, y, cfg.eot_L, rng, loss_fn)
        x_adv = project_linf(x_adv + alpha * _sign(g), x, cfg.eps, cfg.clip_range)
    return _finish(model, x, x_adv, y, rng, check_success)


def spsa_gradient(batch_loss, x, delta: float, samples: int, stream, chunk: int = 512) -> np.ndarray:
    """SPSA estimate of the gradient of ``batch_loss`` at the single point ``x``.

    ``batch_loss`` maps a stack of points (k, ...) to k loss values. Each of
    the ``samples`` Rademacher directions v contributes
    ``(L(x + delta v) - L(x - delta v)) / (2 delta) * v``.
    """
    est = np.zeros(x.shape, dtype=np.float64)
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        v = stream.rademacher((k,) + x.shape).astype(x.dtype)
        pts = np.concatenate([x + delta * v, x - delta * v]).astype(x.dtype)
        losses = np.asarray(batch_loss(pts), dtype=np.float64)
        diff = (losses[:k] - losses[k:]) / (2 * delta)
        est += np.tensordot(diff, v.astype(np.float64), axes=1)
        done += k
    return est / samples


def spsa(model, x, y, cfg: AttackConfig, rng=None, loss_fn=None, check_success=True) -> AdvBatch:
    """Gradient-free attack: SPSA gradient estimates fed to Adam, projected every step."""
    x = np.asarray(x)
    rng = _streams(rng, len(x), cfg)
    if cfg.eps == 0:
        return _finish(model, x, x.copy(), y, rng, check_success)
    y = np.asarray(y)
    out = np.empty_like(x)
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    for i in range(len(x)):
        stream = rng.streams[i] if isinstance(rng, SampleRNG) else rng
        xi = x[i : i + 1]
        yi = y[i : i + 1]
        lf = loss_fn or _default_loss(model, yi)

        def batch_loss(pts):
            with T.no_grad():
                yk = np.repeat(yi, len(pts))
                per = lf(model(pts, stream), yk) if loss_fn else cross_entropy_loss(
                    model(pts, stream), one_hot(yk, model.num_classes), reduction="none")
            return per.data

        adv = project_linf(xi + stream.uniform(-cfg.eps, cfg.eps, xi.shape), xi, cfg.eps, cfg.clip_range)
        m = np.zeros(xi.shape[1:])
        v = np.zeros(xi.shape[1:])
        for t in range(1, cfg.n_steps + 1):
            g = -spsa_gradient(batch_loss, adv[0], cfg.spsa_delta, cfg.spsa_samples, stream, cfg.spsa_chunk)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            step = cfg.spsa_lr * mhat / (np.sqrt(vhat) + eps_adam)
            adv = project_linf(adv - step[None], xi, cfg.eps, cfg.clip_range)
        out[i] = adv[0]
    return _finish(model, x, out, y, rng, check_success)


ATTACKS = {
    "fgsm": fgsm,
    "r_plus_fgsm": r_plus_fgsm,
    "rfgsm": rfgsm,
    "nfgsm": nfgsm,
    "pgd": pgd,
    "spsa": spsa,
}


def run_attack(model, x, y, cfg: AttackConfig, rng=None, **kw) -> AdvBatch:
    return ATTACKS[cfg.kind](model, x, y, cfg, rng, **kw)


# ---------------------------------------------------------------------------
# batched generation with optional worker processes

_JOB = {}


def _attack_chunk(start, stop):
    model, x, y, cfg, seed, indices = _JOB["args"]
    rng = SampleRNG(seed, indices[start:stop])
    res = run_attack(model, x[start:stop], y[start:stop], cfg, rng, check_success=False)
    return start, res.x_adv


def generate(model, x, y, cfg: AttackConfig, seed: int | None = None, batch_size: int = 100,
             workers: int = 1, indices=None) -> np.ndarray:
    """Adversarial examples for a whole array, in fixed-size batches.

    Sample ``i`` always draws from the stream keyed by (seed, indices[i])
    (``indices`` defaults to 0..N-1) and batch
    boundaries do not depend on ``workers``, so any worker count gives
    bit-identical output.
    """
    if cfg.kind == "nfgsm":
        raise AttackError("nfgsm leaves the eps-ball and must not be used for evaluation")
    seed = cfg.seed if seed is None else seed
    x, y = np.asarray(x), np.asarray(y)
    bounds = [(i, min(i + batch_size, len(x))) for i in range(0, len(x), batch_size)]
    out = np.empty_like(x)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    _JOB["args"] = (model, x, y, cfg, seed, indices)
    try:
        if workers <= 1 or len(bounds) <= 1:
            results = [_attack_chunk(a, b) for a, b in bounds]
        else:
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=min(workers, len(bounds), os.cpu_count() * 4 or 4),
                                     mp_context=ctx) as ex:
                results = list(ex.map(_attack_chunk, *zip(*bounds)))
    finally:
        _JOB.clear()
    for start, xa in results:
        out[start : start + len(xa)] = xa
    return out


def attack_from_dict(d: dict) -> AttackConfig:
    known = {f for f in AttackConfig.__dataclass_fields__}
    return AttackConfig(**{k: v for k, v in d.items() if k in known})


def rational(text) -> float:
    """Parse "8/255" style literals exactly before converting to float."""
    from fractions import Fraction

    if isinstance(text, (int, float)):
        return float(text)
    return float(Fraction(str(text).strip()))


__all__ = [
    "AttackConfig", "AdvBatch", "AttackError", "eot_gradient", "input_gradient", "fgsm", "r_plus_fgsm",
    "rfgsm", "nfgsm", "pgd", "spsa", "spsa_gradient", "project_linf", "run_attack", "generate",
    "attack_from_dict", "rational",
]
