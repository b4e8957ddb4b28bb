"""
Run configuration: a flat ``key = value`` text file mapped onto a dataclass.

Lines starting with ``#`` are comments. Every field of :class:`RunConfig`
is a valid key; command-line flags use the same names. ``eps`` accepts
rational literals such as ``8/255``, which are parsed exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

from .attacks import AttackConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key or malformed value in a run configuration."""


def parse_rational(text) -> Fraction:
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number or ratio: {text!r}") from exc


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _list(text):
    if isinstance(text, (list, tuple)):
        return list(text)
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _opt(conv):
    def f(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return conv(text)

    return f


@dataclass
class RunConfig:
    # data
    dataset: str = "mnist"
    data_root: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    # model
    arch: str = "small_cnn"
    pnil: bool = True
    # training
    epochs: int = 30
    batch_size: int = 100
    attack: str = "nfgsm"
    eps: str = "8/255"
    alpha: float | None = None
    train_eot_L: int = 1
    lr_lo: float = 1e-4
    lr_hi: float = 1e-3
    cycle_len: int | None = None
    val_size: int | None = None  # held out from the end of the training data; None = a tenth
    val_steps: int = 10
    patience: int = 10
    # evaluation
    eval_attacks: list = field(default_factory=lambda: ["clean", "pgd", "spsa"])
    eot_L: int = 100
    pgd_steps: int = 50
    spsa_subset: int = 1000
    spsa_samples: int = 2048
    spsa_steps: int = 100
    # experiment protocol
    repeats: int = 5
    folds: int = 2
    significance: float = 0.003
    ttest_ratio: float | None = None  # n_test / n_train; None = measured from the runs
    # lr range test
    lr_span_lo: float = 1e-5
    lr_span_hi: float = 1e-1
    lr_iters: int = 100
    # everything else
    seed: int = 0
    out_dir: str = "runs"

    @property
    def eps_value(self) -> float:
        return float(parse_rational(self.eps))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig(**d)

    def train_config(self, **extra) -> TrainConfig:
        atk = AttackConfig(kind=self.attack, eps=self.eps_value, alpha=self.alpha, eot_L=self.train_eot_L)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, attack=atk, lr_lo=self.lr_lo,
                           lr_hi=self.lr_hi, cycle_len=self.cycle_len, seed=self.seed, val_steps=self.val_steps,
                           patience=self.patience, **extra)


_CONVERTERS = {
    "dataset": str,
    "data_root": _opt(str),
    "train_subset": _opt(int),
    "test_subset": _opt(int),
    "arch": str,
    "pnil": _bool,
    "epochs": int,
    "batch_size": int,
    "attack": str,
    "eps": lambda t: str(parse_rational(t)),
    "alpha": _opt(lambda t: float(parse_rational(t))),
    "train_eot_L": int,
    "lr_lo": float,
    "lr_hi": float,
    "cycle_len": _opt(int),
    "val_size": _opt(int),
    "val_steps": int,
    "patience": int,
    "eval_attacks": _list,
    "eot_L": int,
    "pgd_steps": int,
    "spsa_subset": int,
    "spsa_samples": int,
    "spsa_steps": int,
    "repeats": int,
    "folds": int,
    "significance": float,
    "ttest_ratio": _opt(float),
    "lr_span_lo": float,
    "lr_span_hi": float,
    "lr_iters": int,
    "seed": int,
    "out_dir": str,
}

KEYS = tuple(_CONVERTERS)


def convert(key: str, value):
    key = key.strip().replace("-", "_")
    if key not in _CONVERTERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return key, _CONVERTERS[key](value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_text(text: str, source="<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        k, v = s.split("=", 1)
        k, val = convert(k, v.strip())
        out[k] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_text(fh.read(), str(path)))
    for k, v in (overrides or {}).items():
        if v is not None:
            k, v = convert(k, v)
            values[k] = v
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    parse_rational(cfg.eps)
    if cfg.eps_value < 0:
        raise ConfigError("eps must be non-negative")
    if not cfg.lr_lo < cfg.lr_hi:
        raise ConfigError("lr_lo must be below lr_hi")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    if cfg.eot_L < 1 or cfg.train_eot_L < 1:
        raise ConfigError("eot_L must be at least 1")
    if cfg.arch not in ("small_cnn", "resnet11"):
        raise ConfigError(f"unknown arch {cfg.arch!r}")
    if cfg.dataset not in ("mnist", "fashion_mnist", "cifar10"):
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    known = {"clean", "pgd", "spsa", "fgsm", "rfgsm", "r_plus_fgsm"}
    bad = [a for a in cfg.eval_attacks if a not in known]
    if bad or not cfg.eval_attacks:
        raise ConfigError(f"eval_attacks must be a nonempty subset of {sorted(known)}, got {cfg.eval_attacks}")


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(map(str, v))
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
