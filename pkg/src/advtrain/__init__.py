"""Adversarial training with learned pixelwise noise injection, on a small numpy autodiff core."""

__version__ = "0.1.0"
