"""Auto-regressive token-level diffusion sequential recommender.

Public surface: the sklearn-style ADRecRecommender estimator, the tensor
core, and the module toolbox (data pipeline, diffusion process, model,
training engine, evaluation, embedding diagnostics, CLI).
"""

from . import _threads  # noqa: F401  (must run before numpy binds BLAS threads)
from .tensor import GradTape, Tensor, grad_check, no_grad, set_debug_checks

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "grad_check",
    "set_debug_checks",
    "ADRecRecommender",
    "__version__",
]


def __getattr__(name):
    # Lazy import: the estimator pulls in the full training stack.
    if name == "ADRecRecommender":
        from .estimator import ADRecRecommender

        return ADRecRecommender
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
