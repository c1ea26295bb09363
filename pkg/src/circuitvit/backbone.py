"""Re-entrant vision-transformer encoder.

Inference-only ViT encoder over plain float32 numpy arrays. A forward pass
follows an *effective layer path*: the standard pass visits blocks
0..L-1 once; a duplicated circuit (i, j) visits 0..j, re-enters at i,
repeats i..j, and continues with j+1..L-1. Weights are never modified --
only the traversal order changes.

Image embeddings are the mean of the patch tokens after the final norm
(class and register tokens excluded), scaled to unit Euclidean norm.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    DegenerateEmbeddingError,
    InvalidConfigError,
    NumericError,
    ShapeError,
)

_ACTIVATIONS = ("gelu_erf", "gelu_tanh")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of the frozen encoder."""

    num_layers: int = 12
    hidden_dim: int = 768
    num_heads: int = 12
    mlp_hidden_dim: int = 3072
    patch_size: int = 16
    image_side: int = 512
    num_register_tokens: int = 4
    layernorm_eps: float = 1e-6
    use_layerscale: bool = False
    activation: str = "gelu_erf"

    def __post_init__(self) -> None:
        if self.num_layers < 2:
            raise InvalidConfigError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.hidden_dim <= 0 or self.hidden_dim % self.num_heads != 0:
            raise InvalidConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.patch_size <= 0 or self.image_side % self.patch_size != 0:
            raise InvalidConfigError(
                f"image_side {self.image_side} not divisible by patch_size {self.patch_size}"
            )
        if self.num_register_tokens < 0:
            raise InvalidConfigError("num_register_tokens must be >= 0")
        if self.mlp_hidden_dim <= 0:
            raise InvalidConfigError("mlp_hidden_dim must be positive")
        if self.activation not in _ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {self.activation!r}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_register_tokens + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "num_heads": self.num_heads,
            "mlp_hidden_dim": self.mlp_hidden_dim,
            "patch_size": self.patch_size,
            "image_side": self.image_side,
            "num_register_tokens": self.num_register_tokens,
            "layernorm_eps": self.layernorm_eps,
            "use_layerscale": self.use_layerscale,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class CircuitSpec:
    """Layer-duplication descriptor.

    ``entry is None`` denotes the standard single-pass circuit; otherwise
    blocks entry..exit (inclusive) are traversed a second time.
    """

    entry: int | None = None
    exit: int | None = None

    def __post_init__(self) -> None:
        if (self.entry is None) != (self.exit is None):
            raise InvalidConfigError("entry and exit must both be set or both be None")
        if self.entry is not None:
            if self.entry < 0 or self.entry >= self.exit:
                raise InvalidConfigError(
                    f"need 0 <= entry < exit, got ({self.entry}, {self.exit})"
                )

    @classmethod
    def standard(cls) -> "CircuitSpec":
        return cls()

    @classmethod
    def duplicated(cls, entry: int, exit: int) -> "CircuitSpec":
        return cls(entry=entry, exit=exit)

    @property
    def is_standard(self) -> bool:
        return self.entry is None

    @property
    def label(self) -> str:
        if self.is_standard:
            return "standard"
        return f"dup_{self.entry}_{self.exit}"

    @classmethod
    def parse(cls, label: str) -> "CircuitSpec":
        if label == "standard":
            return cls.standard()
        parts = label.split("_")
        if len(parts) == 3 and parts[0] == "dup":
            try:
                return cls.duplicated(int(parts[1]), int(parts[2]))
            except ValueError:
                pass
        raise InvalidConfigError(f"unparseable circuit label {label!r}")

    def validate_for(self, num_layers: int) -> None:
        if not self.is_standard and self.exit >= num_layers:
            raise InvalidConfigError(
                f"circuit ({self.entry}, {self.exit}) invalid for {num_layers} layers"
            )

    def sort_key(self) -> tuple[int, int, int]:
        """Tie-break ordering: standard first, then smaller span, then smaller entry."""
        if self.is_standard:
            return (0, 0, 0)
        return (1, self.exit - self.entry, self.entry)


@dataclass
class TokenSequence:
    """Token matrix with layout [class, register x R, patch x G^2]."""

    tokens: np.ndarray
    num_register_tokens: int

    @property
    def num_special(self) -> int:
        return 1 + self.num_register_tokens

    def patch_tokens(self) -> np.ndarray:
        return self.tokens[self.num_special :]


@dataclass
class BlockWeights:
    norm1_weight: np.ndarray
    norm1_bias: np.ndarray
    qkv_weight: np.ndarray  # (3*hidden, hidden)
    qkv_bias: np.ndarray
    proj_weight: np.ndarray  # (hidden, hidden)
    proj_bias: np.ndarray
    norm2_weight: np.ndarray
    norm2_bias: np.ndarray
    fc1_weight: np.ndarray  # (mlp_hidden, hidden)
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray  # (hidden, mlp_hidden)
    fc2_bias: np.ndarray
    ls1: np.ndarray | None = None
    ls2: np.ndarray | None = None


@dataclass
class BackboneWeights:
    patch_weight: np.ndarray  # (hidden, 3, patch, patch)
    patch_bias: np.ndarray
    cls_token: np.ndarray  # (hidden,)
    register_tokens: np.ndarray  # (R, hidden)
    pos_embed: np.ndarray  # (num_tokens, hidden)
    blocks: list[BlockWeights]
    norm_weight: np.ndarray
    norm_bias: np.ndarray

    def validate(self, config: ModelConfig) -> None:
        """Check every tensor shape against the configuration."""
        d, m = config.hidden_dim, config.mlp_hidden_dim
        p, r = config.patch_size, config.num_register_tokens
        expected = [
            ("patch_weight", "patch_embed.weight", (d, 3, p, p)),
            ("patch_bias", "patch_embed.bias", (d,)),
            ("cls_token", "cls_token", (d,)),
            ("register_tokens", "register_tokens", (r, d)),
            ("pos_embed", "pos_embed", (config.num_tokens, d)),
            ("norm_weight", "norm.weight", (d,)),
            ("norm_bias", "norm.bias", (d,)),
        ]
        for attr, schema_name, shape in expected:
            actual = getattr(self, attr).shape
            if actual != shape:
                raise ShapeError(f"{schema_name}: expected {shape}, got {actual}")
        if len(self.blocks) != config.num_layers:
            raise ShapeError(
                f"expected {config.num_layers} blocks, got {len(self.blocks)}"
            )
        block_expected = [
            ("norm1_weight", "norm1.weight", (d,)),
            ("norm1_bias", "norm1.bias", (d,)),
            ("qkv_weight", "attn.qkv.weight", (3 * d, d)),
            ("qkv_bias", "attn.qkv.bias", (3 * d,)),
            ("proj_weight", "attn.proj.weight", (d, d)),
            ("proj_bias", "attn.proj.bias", (d,)),
            ("norm2_weight", "norm2.weight", (d,)),
            ("norm2_bias", "norm2.bias", (d,)),
            ("fc1_weight", "mlp.fc1.weight", (m, d)),
            ("fc1_bias", "mlp.fc1.bias", (m,)),
            ("fc2_weight", "mlp.fc2.weight", (d, m)),
            ("fc2_bias", "mlp.fc2.bias", (d,)),
        ]
        for n, block in enumerate(self.blocks):
            for attr, schema_name, shape in block_expected:
                actual = getattr(block, attr).shape
                if actual != shape:
                    raise ShapeError(
                        f"blocks.{n}.{schema_name}: expected {shape}, got {actual}"
                    )
            for name in ("ls1", "ls2"):
                ls = getattr(block, name)
                if config.use_layerscale and ls is None:
                    raise ShapeError(f"blocks.{n}.{name} required when layerscale is on")
                if ls is not None and ls.shape != (d,):
                    raise ShapeError(f"blocks.{n}.{name}: expected {(d,)}, got {ls.shape}")


class _ForwardCounter:
    """Thread-safe counter of executed forward passes, used by cache tests."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> None:
        with self._lock:
            self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


FORWARD_COUNTER = _ForwardCounter()


def enumerate_circuits(num_layers: int) -> list[CircuitSpec]:
    """All duplicated circuits (i, j) with i < j, in lexicographic order."""
    if num_layers < 2:
        raise InvalidConfigError(f"num_layers must be >= 2, got {num_layers}")
    return [
        CircuitSpec.duplicated(i, j)
        for i in range(num_layers - 1)
        for j in range(i + 1, num_layers)
    ]


def effective_layer_path(circuit: CircuitSpec, num_layers: int) -> list[int]:
    """Ordered block indices actually executed for a circuit."""
    circuit.validate_for(num_layers)
    if circuit.is_standard:
        return list(range(num_layers))
    i, j = circuit.entry, circuit.exit
    return list(range(0, j + 1)) + list(range(i, j + 1)) + list(range(j + 1, num_layers))


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    y = (x - mean) / np.sqrt(var + np.float32(eps))
    return y * weight + bias


def gelu(x: np.ndarray, kind: str = "gelu_erf") -> np.ndarray:
    if kind == "gelu_erf":
        return np.float32(0.5) * x * (np.float32(1.0) + erf(x * np.float32(1.0 / math.sqrt(2.0))))
    if kind == "gelu_tanh":
        c = np.float32(math.sqrt(2.0 / math.pi))
        return np.float32(0.5) * x * (
            np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x))
        )
    raise InvalidConfigError(f"unknown activation {kind!r}")


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x: np.ndarray, block: BlockWeights, config: ModelConfig) -> np.ndarray:
    t = x.shape[0]
    h, hd = config.num_heads, config.head_dim
    qkv = x @ block.qkv_weight.T + block.qkv_bias  # (T, 3d)
    qkv = qkv.reshape(t, 3, h, hd).transpose(1, 2, 0, 3)  # (3, h, T, hd)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = np.float32(1.0 / math.sqrt(hd))
    scores = (q @ k.transpose(0, 2, 1)) * scale  # (h, T, T)
    attn = _softmax(scores)
    out = attn @ v  # (h, T, hd)
    out = out.transpose(1, 0, 2).reshape(t, h * hd)
    return out @ block.proj_weight.T + block.proj_bias


def apply_block(x: np.ndarray, block: BlockWeights, config: ModelConfig) -> np.ndarray:
    """One pre-norm residual block: attention then MLP, each with optional layerscale."""
    eps = config.layernorm_eps
    a = _attention(layer_norm(x, block.norm1_weight, block.norm1_bias, eps), block, config)
    if block.ls1 is not None:
        a = a * block.ls1
    x = x + a
    m = layer_norm(x, block.norm2_weight, block.norm2_bias, eps)
    m = gelu(m @ block.fc1_weight.T + block.fc1_bias, config.activation)
    m = m @ block.fc2_weight.T + block.fc2_bias
    if block.ls2 is not None:
        m = m * block.ls2
    return x + m


def embed_patches(
    image: np.ndarray, weights: BackboneWeights, config: ModelConfig
) -> TokenSequence:
    """Tokenize a (3, S, S) image: patchify, project, prepend class/register tokens, add positions."""
    expected = (3, config.image_side, config.image_side)
    if image.shape != expected:
        raise ShapeError(f"image: expected {expected}, got {image.shape}")
    image = np.ascontiguousarray(image, dtype=np.float32)
    g, p, d = config.grid_side, config.patch_size, config.hidden_dim
    # (3, g, p, g, p) -> (g, g, 3, p, p) -> (g*g, 3*p*p); channel-major matches conv kernels
    patches = image.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, 3 * p * p)
    kernel = weights.patch_weight.reshape(d, 3 * p * p)
    patch_tokens = patches @ kernel.T + weights.patch_bias
    tokens = np.concatenate(
        [weights.cls_token[None, :], weights.register_tokens, patch_tokens], axis=0
    )
    tokens = (tokens + weights.pos_embed).astype(np.float32)
    return TokenSequence(tokens=tokens, num_register_tokens=config.num_register_tokens)


def forward(
    tokens: TokenSequence,
    weights: BackboneWeights,
    circuit: CircuitSpec,
    config: ModelConfig,
) -> TokenSequence:
    """Run the blocks along the circuit's effective path, then the final norm."""
    path = effective_layer_path(circuit, config.num_layers)
    FORWARD_COUNTER.increment()
    x = tokens.tokens.astype(np.float32, copy=True)
    for position, layer in enumerate(path):
        x = apply_block(x, weights.blocks[layer], config)
        if not np.isfinite(x).all():
            raise NumericError(
                f"non-finite activations after layer {layer} (path position {position})"
            )
    x = layer_norm(x, weights.norm_weight, weights.norm_bias, config.layernorm_eps)
    return TokenSequence(tokens=x.astype(np.float32), num_register_tokens=tokens.num_register_tokens)


def pool(tokens: TokenSequence) -> np.ndarray:
    """Mean over patch tokens only, scaled to unit Euclidean norm."""
    mean = tokens.patch_tokens().mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateEmbeddingError("patch-token mean has zero or non-finite norm")
    return (mean / np.float32(norm)).astype(np.float32)


def embed_image(
    image: np.ndarray,
    weights: BackboneWeights,
    circuit: CircuitSpec,
    config: ModelConfig,
) -> np.ndarray:
    """Preprocessed image tensor -> unit-norm embedding under the given circuit."""
    tokens = embed_patches(image, weights, config)
    return pool(forward(tokens, weights, circuit, config))
