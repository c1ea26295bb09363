"""Re-entrant vision-transformer embeddings with circuit selection.

The package embeds images with a frozen ViT encoder whose forward pass
may traverse a chosen block range twice (a "duplicated circuit"), then
scores the resulting embedding spaces with simple semi-supervised
classifiers under tight label budgets, selecting the best circuit
globally and per class on a held-out validation pool.
"""

from .backbone import (
    CircuitSpec,
    ModelConfig,
    effective_layer_path,
    embed_image,
    enumerate_circuits,
)
from .errors import CircuitVitError
from .model_io import load_weights, save_weights, synthesize_weights, verify_reference

__version__ = "0.1.0"

__all__ = [
    "CircuitSpec",
    "ModelConfig",
    "CircuitVitError",
    "effective_layer_path",
    "embed_image",
    "enumerate_circuits",
    "load_weights",
    "save_weights",
    "synthesize_weights",
    "verify_reference",
    "__version__",
]
