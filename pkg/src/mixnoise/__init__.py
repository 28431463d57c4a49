"""Mixed additive/multiplicative noise estimation with conditional normalizing flows and nested EM."""

from .noise_model import NoiseParams

__version__ = "0.1.0"

__all__ = ["NoiseParams", "__version__"]
