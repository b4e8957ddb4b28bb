"""
Finite-difference gradient checks on seeded random networks.

Analytic gradients (input and all parameters) come from a float64 backward
pass and are compared with central differences coordinate by coordinate:

    err = |a - n| / max(|a|, |n|, floor)

In float64 a central difference with h = 1e-6 carries roundoff of order
eps_mach * |f| / h, roughly 1e-10, which swamps gradients near 1e-8. The
loss inside the difference quotient is therefore evaluated in extended
precision (``np.longdouble``), pushing that roundoff below 1e-13.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import (PNIL, ChannelsLast, Conv2d, Dense, Flatten, GlobalAvgPool, MaxPool2d, Model, ReLU,
                     ResidualBlock, one_hot)
from .rng import FrozenNoise, derive_seed

TOL = 1e-4
FLOOR = 1e-8
STEP = 1e-6


@dataclass
class Failure:
    network: int
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    error: float


@dataclass
class GradcheckSummary:
    networks: int = 0
    coordinates: int = 0
    max_error: float = 0.0
    failures: list = field(default_factory=list)
    seconds: float = 0.0
    families: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures


FAMILIES = ("mlp", "conv_pool", "pnil_conv", "residual", "strided", "pnil_mlp")


def random_network(index: int, seed: int = 0):
    """Build a small float64 network and matching inputs for check ``index``.

    Returns ``(family, model, x, onehot, noise)``; ``noise`` is a frozen
    normal draw for networks with a noise layer and ``None`` otherwise.
    """
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", index))
    family = FAMILIES[index % len(FAMILIES)]
    f64 = np.float64
    c = int(rng.integers(1, 3))
    hw = int(rng.integers(4, 7))
    k = int(rng.integers(2, 5))
    n = int(rng.integers(2, 4))
    width = int(rng.integers(2, 4))
    in_shape = (c, hw, hw)
    if family == "mlp":
        hidden = int(rng.integers(3, 7))
        layers = [("flat", Flatten()), ("fc1", Dense(c * hw * hw, hidden, f64)), ("relu", ReLU()),
                  ("fc2", Dense(hidden, k, f64))]
    elif family == "pnil_mlp":
        hidden = int(rng.integers(3, 7))
        layers = [("pnil", PNIL(in_shape, dtype=f64)), ("flat", Flatten()),
                  ("fc1", Dense(c * hw * hw, hidden, f64)), ("relu", ReLU()), ("fc2", Dense(hidden, k, f64))]
    elif family == "conv_pool":
        ho = hw // 2
        layers = [("nhwc", ChannelsLast()), ("conv", Conv2d(c, width, 3, dtype=f64)), ("relu", ReLU()),
                  ("pool", MaxPool2d(2)), ("flat", Flatten()), ("fc", Dense(ho * ho * width, k, f64))]
    elif family == "pnil_conv":
        layers = [("pnil", PNIL(in_shape, dtype=f64)), ("nhwc", ChannelsLast()),
                  ("conv", Conv2d(c, width, 3, dtype=f64)), ("relu", ReLU()), ("flat", Flatten()),
                  ("fc", Dense(hw * hw * width, k, f64))]
    elif family == "residual":
        layers = [("nhwc", ChannelsLast()), ("block", ResidualBlock(c, width, stride=int(rng.integers(1, 3)), dtype=f64)),
                  ("gap", GlobalAvgPool()), ("fc", Dense(width, k, f64))]
    else:  # strided conv without padding
        ho = (hw - 2) // 2 + 1
        layers = [("nhwc", ChannelsLast()), ("conv", Conv2d(c, width, 2, stride=2, padding=0, dtype=f64)),
                  ("relu", ReLU()), ("flat", Flatten()), ("fc", Dense(ho * ho * width, k, f64))]
    model = Model(layers, in_shape, k)
    for name, p in model.params.items():
        if name.endswith("pnil.W") or name.endswith(".W"):
            p.data = rng.normal(0.0, 0.5, p.shape)
        elif name.endswith(".B"):
            p.data = rng.normal(-2.0, 0.5, p.shape)
        else:
            fan_in = np.prod(p.shape[1:]) if p.ndim > 1 else p.shape[0]
            p.data = rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), p.shape)
    x = rng.uniform(0.0, 1.0, (n,) + in_shape)
    y = one_hot(rng.integers(0, k, n), k, dtype=f64)
    noise = FrozenNoise(rng.normal(size=(n,) + in_shape)) if model.stochastic else None
    return family, model, x, y, noise


def check_network(model, x, y, noise=None, h: float = STEP, tol: float = TOL, floor: float = FLOOR, tag=0,
                  fd_dtype=np.longdouble):
    """Compare analytic and numeric gradients for the input and every parameter.

    The analytic pass runs in float64. The finite-difference oracle evaluates
    the loss in ``fd_dtype`` (extended precision by default) so that its
    roundoff stays well below the tolerance even for tiny gradients.
    Returns ``(coordinates_checked, max_error, failures)``.
    """
    bad = [k for k, p in model.params.items() if p.dtype != np.float64]
    if bad:
        raise TypeError(f"gradient checks require float64 parameters; {bad} are not")
    with T.precision("f64"):
        xt = T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name="input")
        targets = {"input": xt, **model.params}
        with T.Tape() as tape:
            loss = T.softmax_cross_entropy(model(xt, noise), y)
        grads = T.backward(tape, loss)
        saved = {name: t.data for name, t in targets.items()}
        for t in targets.values():
            t.data = t.data.astype(fd_dtype)
        yl = np.asarray(y, dtype=fd_dtype)
        failures, worst, count = [], 0.0, 0
        try:
            for name, t in targets.items():
                analytic = grads.get(t)
                if analytic is None:
                    analytic = np.zeros(t.shape)

                def f(arr, t=t):
                    t.data = arr
                    with T.no_grad():
                        return T.softmax_cross_entropy(model(xt, noise), yl).data[()]

                base = t.data
                try:
                    numeric = T.finite_diff_grad(f, base, h, dtype=fd_dtype).astype(np.float64)
                finally:
                    t.data = base
                err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
                count += err.size
                worst = max(worst, float(err.max(initial=0.0)))
                for idx in zip(*np.nonzero(err > tol)):
                    failures.append(Failure(tag, name, tuple(int(i) for i in idx), float(analytic[idx]),
                                            float(numeric[idx]), float(err[idx])))
        finally:
            for name, t in targets.items():
                t.data = saved[name]
    return count, worst, failures


def run_gradcheck(n_networks: int = 100, seed: int = 0, tol: float = TOL, floor: float = FLOOR,
                  h: float = STEP) -> GradcheckSummary:
    """Check ``n_networks`` random networks; every family (with and without noise layer) is covered."""
    t0 = time.perf_counter()
    out = GradcheckSummary()
    with T.precision("f64"):
        for i in range(n_networks):
            family, model, x, y, noise = random_network(i, seed)
            count, worst, fails = check_network(model, x, y, noise, h, tol, floor, tag=i)
            out.networks += 1
            out.coordinates += count
            out.max_error = max(out.max_error, worst)
            out.failures.extend(fails)
            out.families[family] = out.families.get(family, 0) + 1
    out.seconds = time.perf_counter() - t0
    return out
