"""FGSM attack generation, adversarial-input detection and degradation metrics."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
