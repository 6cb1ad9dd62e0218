"""fastnmt: a lightweight CPU inference engine for deep-encoder/
shallow-decoder translation models, with per-column 8-bit quantized GEMM,
dynamic batching, greedy search, and an order-preserving parallel pipeline.
"""

from .engine import RunConfig, Translator
from .model import ModelConfig, TranslationModel, count_params
from .store import load, random_model, save

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "RunConfig",
    "TranslationModel",
    "Translator",
    "count_params",
    "load",
    "random_model",
    "save",
    "__version__",
]
