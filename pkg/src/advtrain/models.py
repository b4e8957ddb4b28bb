"""
Layers, the two classifier architectures, the loss head and checkpoint I/O.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import BatchRNG, derive_seed
from .tensor import ShapeError, Tensor

# exp(sigma/2) is clamped at exp(10) to keep the noise scale finite
SIGMA_HALF_MAX = 10.0


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files or incompatible parameter sets."""


def pnil_forward(x, w, b, rng, cap: float = SIGMA_HALF_MAX):
    """Resample ``x`` from a Gaussian whose log-variance is learned per feature.

    ``sigma = x * w + b`` and ``x' = x + n * exp(sigma / 2)`` with ``n`` drawn
    from ``rng.normal``. Returns ``(x', sigma)``; gradients flow to x, w and b.
    """
    x, w, b = T.as_tensor(x), T.as_tensor(w), T.as_tensor(b)
    if x.shape[1:] != w.shape or w.shape != b.shape:
        raise ShapeError(f"pnil: sample shape {x.shape[1:]} vs W {w.shape} vs B {b.shape}")
    sigma = x * w + b
    scale = T.exp(T.minimum(sigma * 0.5, cap))
    noise = np.asarray(rng.normal(x.shape), dtype=x.dtype)
    return x + scale * noise, sigma


class Layer:
    """Base class; layers with weights expose them through ``params``."""

    stochastic = False

    def params(self) -> dict:
        return {}

    def __call__(self, x, noise=None):
        raise NotImplementedError


class Conv2d(Layer):
    """Convolution on channels-last activations (weights stay (F, C, kh, kw))."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, dtype=np.float32, layout="NHWC"):
        self.stride = stride
        self.layout = layout
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Tensor(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x, noise=None):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, layout=self.layout)


class Dense(Layer):
    def __init__(self, n_in, n_out, dtype=np.float32):
        self.weight = Tensor(np.zeros((n_in, n_out), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x, noise=None):
        return T.matmul(x, self.weight) + self.bias


class ReLU(Layer):
    def __call__(self, x, noise=None):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, size=2, layout="NHWC"):
        self.size = size
        self.layout = layout

    def __call__(self, x, noise=None):
        return T.max_pool2d(x, self.size, self.layout)


class ChannelsLast(Layer):
    """(N,C,H,W) -> (N,H,W,C); the convolutional trunk runs channels-last."""

    def __call__(self, x, noise=None):
        return T.transpose(x, (0, 2, 3, 1))


class Flatten(Layer):
    def __call__(self, x, noise=None):
        return T.flatten(x)


class GlobalAvgPool(Layer):
    def __call__(self, x, noise=None):
        return T.mean(x, axis=(1, 2))


class ResidualBlock(Layer):
    """relu(conv2(relu(conv1(x))) + skip(x)); skip is a 1x1 projection when the shape changes."""

    def __init__(self, in_ch, out_ch, stride=1, dtype=np.float32):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, dtype)
        self.proj = Conv2d(in_ch, out_ch, 1, stride, 0, dtype) if (in_ch != out_ch or stride != 1) else None

    def params(self):
        out = {}
        for key in ("conv1", "conv2", "proj"):
            layer = getattr(self, key)
            if layer is not None:
                out.update({f"{key}.{k}": v for k, v in layer.params().items()})
        return out

    def __call__(self, x, noise=None):
        h = T.relu(self.conv1(x))
        h = self.conv2(h)
        skip = self.proj(x) if self.proj is not None else x
        return T.relu(h + skip)


class PNIL(Layer):
    """Pixelwise noise injection: per-feature learned log-variance, sampled in every mode."""

    stochastic = True

    def __init__(self, sample_shape, w_init=0.0, b_init=-3.0, dtype=np.float32):
        self.W = Tensor(np.full(sample_shape, w_init, dtype=dtype), requires_grad=True)
        self.B = Tensor(np.full(sample_shape, b_init, dtype=dtype), requires_grad=True)
        self.last_sigma = None

    def params(self):
        return {"W": self.W, "B": self.B}

    def __call__(self, x, noise=None):
        if noise is None:
            raise ValueError("PNIL needs a noise source")
        out, sigma = pnil_forward(x, self.W, self.B, noise)
        self.last_sigma = sigma
        return out


class Model:
    """Ordered layers with a flat parameter registry.

    ``model(x, noise)`` returns logits. ``noise`` feeds every PNIL layer; when
    omitted, the model's own stream (seeded by ``rng_seed``) is used.
    """

    def __init__(self, layers, in_shape, num_classes, rng_seed=0, arch=None, config=None):
        self.layers = list(layers)
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.rng_seed = rng_seed
        self.mode = "train"
        self.arch = arch
        self.config = dict(config or {})
        self._rng = BatchRNG(derive_seed(rng_seed, "model-noise"))
        self.params = OrderedDict()
        for name, layer in self.layers:
            for k, v in layer.params().items():
                full = f"{name}.{k}"
                if full in self.params:
                    raise ValueError(f"duplicate parameter name {full}")
                v.name = full
                self.params[full] = v

    @property
    def stochastic(self) -> bool:
        return any(layer.stochastic for _, layer in self.layers)

    @property
    def has_pnil(self) -> bool:
        return any(isinstance(layer, PNIL) for _, layer in self.layers)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x, noise=None) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[1:] != self.in_shape:
            raise ShapeError(f"model expects samples of shape {self.in_shape}, got {x.shape[1:]}")
        if noise is None and self.stochastic:
            noise = self._rng
        for _, layer in self.layers:
            x = layer(x, noise)
        return x

    def logits(self, x: np.ndarray, noise=None, batch_size: int = 500) -> np.ndarray:
        """Forward pass without recording, in chunks."""
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                rows = slice(i, i + batch_size)
                src = noise.subset(rows) if hasattr(noise, "subset") else noise
                out.append(self(x[rows], src).data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict(self, x, noise=None, batch_size: int = 500) -> np.ndarray:
        return self.logits(x, noise, batch_size).argmax(axis=1)

    @contextmanager
    def frozen(self):
        """Treat parameters as constants (input gradients only)."""
        saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state):
        for name, p in self.params.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
        extra = set(state) - set(self.params)
        if extra:
            raise CheckpointError(f"checkpoint has unknown tensors {sorted(extra)}")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=p.dtype)


def _he_init(model: Model, seed: int):
    for name, p in model.params.items():
        if name.endswith("weight"):
            fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
            rng = BatchRNG(derive_seed(seed, "init", name))
            p.data = (rng.normal(p.shape) * np.sqrt(2.0 / fan_in)).astype(p.dtype)


def build_small_cnn(in_shape=(1, 28, 28), num_classes=10, pnil=False, widths=(16, 32), kernel=3,
                    pool=2, seed=0, dtype="f32", pnil_init=(0.0, -3.0)) -> Model:
    """conv-relu-pool, conv-relu-pool, dense; optionally preceded by a PNIL."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    dt = T.DTYPES[dtype]
    c, h, w = in_shape
    layers = []
    if pnil:
        layers.append(("pnil", PNIL(in_shape, *pnil_init, dtype=dt)))
    layers += [
        ("nhwc", ChannelsLast()),
        ("conv1", Conv2d(c, widths[0], kernel, dtype=dt)),
        ("relu1", ReLU()),
        ("pool1", MaxPool2d(pool)),
        ("conv2", Conv2d(widths[0], widths[1], kernel, dtype=dt)),
        ("relu2", ReLU()),
        ("pool2", MaxPool2d(pool)),
        ("flatten", Flatten()),
    ]
    hh, ww = h // pool // pool, w // pool // pool
    layers.append(("fc", Dense(widths[1] * hh * ww, num_classes, dtype=dt)))
    cfg = dict(in_shape=list(in_shape), num_classes=num_classes, pnil=pnil, widths=list(widths),
               kernel=kernel, pool=pool, seed=seed, dtype=dtype, pnil_init=list(pnil_init))
    model = Model(layers, in_shape, num_classes, rng_seed=seed, arch="small_cnn", config=cfg)
    _he_init(model, seed)
    return model


def build_resnet11(in_shape=(3, 32, 32), num_classes=10, pnil=False, widths=(16, 16, 32, 32, 64),
                   seed=0, dtype="f32", pnil_init=(0.0, -3.0)) -> Model:
    """Five two-conv residual blocks and a dense head: 11 weighted layers.

    The first block reads the raw input through a projection skip; stride 2 is
    used wherever the channel count grows after the first block. Global average
    pooling precedes the head.
    """
    dt = T.DTYPES[dtype]
    layers = []
    if pnil:
        layers.append(("pnil", PNIL(in_shape, *pnil_init, dtype=dt)))
    layers.append(("nhwc", ChannelsLast()))
    prev = in_shape[0]
    for i, width in enumerate(widths):
        stride = 2 if (i > 0 and width != prev) else 1
        layers.append((f"block{i + 1}", ResidualBlock(prev, width, stride, dtype=dt)))
        prev = width
    layers += [("gap", GlobalAvgPool()), ("fc", Dense(prev, num_classes, dtype=dt))]
    cfg = dict(in_shape=list(in_shape), num_classes=num_classes, pnil=pnil, widths=list(widths),
               seed=seed, dtype=dtype, pnil_init=list(pnil_init))
    model = Model(layers, in_shape, num_classes, rng_seed=seed, arch="resnet11", config=cfg)
    _he_init(model, seed)
    return model


def build_model(arch: str, **kwargs) -> Model:
    builders = {"small_cnn": build_small_cnn, "resnet11": build_resnet11}
    if arch not in builders:
        raise ValueError(f"unknown architecture {arch!r}")
    return builders[arch](**kwargs)


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def _check_one_hot(y: np.ndarray):
    ok = y.ndim == 2 and np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)
    if not ok:
        raise ValueError("targets must be one-hot rows")


def cross_entropy_loss(logits, y, reduction: str = "mean") -> Tensor:
    """Mean (or per-sample / summed) softmax cross-entropy against one-hot ``y``."""
    logits = T.as_tensor(logits)
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.shape != logits.shape:
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape} vs targets {y.shape}")
    _check_one_hot(y)
    return T.softmax_cross_entropy(logits, Tensor(y, dtype=logits.dtype), reduction)


# ---------------------------------------------------------------------------
# checkpoint format:
#   b"AFCK" | u32 version | u32 count
#   per tensor: u32 name length | utf-8 name | u32 rank | u64 extents... | f32 values
#   u32 metadata length | utf-8 "key=value" lines
# all integers and floats little-endian

CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1


def save_checkpoint(path, tensors, metadata=None):
    """Write ``tensors`` (a Model or a name -> array mapping) and a metadata block."""
    if isinstance(tensors, Model):
        tensors = tensors.state_dict()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    meta = "".join(f"{k}={v}\n" for k, v in (metadata or {}).items()).encode("utf-8")
    buf += struct.pack("<I", len(meta)) + meta
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    """Return ``(OrderedDict name -> float32 array, metadata dict of strings)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(data):
            raise CheckpointError(f"{path}: truncated tensor name")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated values of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    (mlen,) = take("<I")
    meta = {}
    for line in data[pos : pos + mlen].decode("utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    return tensors, meta
