"""Weight loading, synthesis, fingerprinting, and reference parity checks.

Container format: 8-byte little-endian header length, UTF-8 JSON header
mapping tensor names to {dtype, shape, data_offsets}, then the raw
little-endian payload. Offsets are relative to the end of the header.
An optional ``__metadata__`` entry carries string key/value pairs. This
is the common flat-tensor layout, so third-party writers can emit it
directly.

Naming schema for model weights::

    patch_embed.{weight,bias}  cls_token  register_tokens  pos_embed
    blocks.{n}.norm1.{weight,bias}   blocks.{n}.attn.qkv.{weight,bias}
    blocks.{n}.attn.proj.{weight,bias}
    blocks.{n}.norm2.{weight,bias}   blocks.{n}.mlp.fc1.{weight,bias}
    blocks.{n}.mlp.fc2.{weight,bias} blocks.{n}.ls1  blocks.{n}.ls2
    norm.{weight,bias}

Half-precision tensors are up-cast to float32 on load; everything
downstream runs in a single numeric type.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import (
    BackboneWeights,
    BlockWeights,
    CircuitSpec,
    ModelConfig,
    embed_image,
)
from .errors import SchemaError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}
_FORMAT_KEY = "format"
_CONFIG_KEY = "model.config"


def write_container(
    path: str | Path | io.BytesIO,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    """Write float32 tensors contiguously in sorted name order."""
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    payload = io.BytesIO()
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.dtype("<f4"))
        data = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        payload.write(data)
        offset += len(data)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = (
        len(header_bytes).to_bytes(8, "little") + header_bytes + payload.getvalue()
    )
    if isinstance(path, io.BytesIO):
        path.write(blob)
    else:
        Path(path).write_bytes(blob)


def read_container(data: bytes | str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse a container; returns (tensors upcast to float32, metadata)."""
    if not isinstance(data, bytes):
        data = Path(data).read_bytes()
    if len(data) < 8:
        raise SchemaError("container too short for header length")
    header_len = int.from_bytes(data[:8], "little")
    if 8 + header_len > len(data):
        raise SchemaError("header length exceeds file size")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"unparseable container header: {e}") from e
    payload = data[8 + header_len :]
    metadata = {str(k): str(v) for k, v in header.pop("__metadata__", {}).items()}

    spans = []
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        dtype = entry.get("dtype")
        if dtype not in _DTYPES:
            raise SchemaError(f"{name}: unsupported dtype {dtype!r}")
        shape = tuple(int(s) for s in entry["shape"])
        begin, end = entry["data_offsets"]
        count = int(np.prod(shape)) if shape else 1
        expected = count * _DTYPES[dtype].itemsize
        if begin < 0 or end > len(payload) or end - begin != expected:
            raise SchemaError(
                f"{name}: offsets [{begin}, {end}) inconsistent with shape {shape}"
            )
        spans.append((begin, end, name))
        arr = np.frombuffer(payload[begin:end], dtype=_DTYPES[dtype]).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise SchemaError(f"tensors {n0} and {n1} overlap in the payload")
    return tensors, metadata


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fingerprint_file(path: str | Path) -> str:
    return fingerprint_bytes(Path(path).read_bytes())


def serialize_weights(weights: BackboneWeights, config: ModelConfig) -> bytes:
    """Canonical container bytes for a weight set (used for fingerprinting)."""
    buf = io.BytesIO()
    write_container(buf, weights_to_tensors(weights), {_CONFIG_KEY: json.dumps(config.to_dict(), sort_keys=True)})
    return buf.getvalue()


def fingerprint_weights(weights: BackboneWeights, config: ModelConfig) -> str:
    return fingerprint_bytes(serialize_weights(weights, config))


def weights_to_tensors(weights: BackboneWeights) -> dict[str, np.ndarray]:
    tensors = {
        "patch_embed.weight": weights.patch_weight,
        "patch_embed.bias": weights.patch_bias,
        "cls_token": weights.cls_token,
        "register_tokens": weights.register_tokens,
        "pos_embed": weights.pos_embed,
        "norm.weight": weights.norm_weight,
        "norm.bias": weights.norm_bias,
    }
    for n, b in enumerate(weights.blocks):
        prefix = f"blocks.{n}"
        tensors[f"{prefix}.norm1.weight"] = b.norm1_weight
        tensors[f"{prefix}.norm1.bias"] = b.norm1_bias
        tensors[f"{prefix}.attn.qkv.weight"] = b.qkv_weight
        tensors[f"{prefix}.attn.qkv.bias"] = b.qkv_bias
        tensors[f"{prefix}.attn.proj.weight"] = b.proj_weight
        tensors[f"{prefix}.attn.proj.bias"] = b.proj_bias
        tensors[f"{prefix}.norm2.weight"] = b.norm2_weight
        tensors[f"{prefix}.norm2.bias"] = b.norm2_bias
        tensors[f"{prefix}.mlp.fc1.weight"] = b.fc1_weight
        tensors[f"{prefix}.mlp.fc1.bias"] = b.fc1_bias
        tensors[f"{prefix}.mlp.fc2.weight"] = b.fc2_weight
        tensors[f"{prefix}.mlp.fc2.bias"] = b.fc2_bias
        if b.ls1 is not None:
            tensors[f"{prefix}.ls1"] = b.ls1
        if b.ls2 is not None:
            tensors[f"{prefix}.ls2"] = b.ls2
    return tensors


def tensors_to_weights(tensors: dict[str, np.ndarray], config: ModelConfig) -> BackboneWeights:
    def take(name: str) -> np.ndarray:
        if name not in tensors:
            raise SchemaError(f"container is missing tensor {name!r}")
        return tensors[name]

    blocks = []
    for n in range(config.num_layers):
        p = f"blocks.{n}"
        blocks.append(
            BlockWeights(
                norm1_weight=take(f"{p}.norm1.weight"),
                norm1_bias=take(f"{p}.norm1.bias"),
                qkv_weight=take(f"{p}.attn.qkv.weight"),
                qkv_bias=take(f"{p}.attn.qkv.bias"),
                proj_weight=take(f"{p}.attn.proj.weight"),
                proj_bias=take(f"{p}.attn.proj.bias"),
                norm2_weight=take(f"{p}.norm2.weight"),
                norm2_bias=take(f"{p}.norm2.bias"),
                fc1_weight=take(f"{p}.mlp.fc1.weight"),
                fc1_bias=take(f"{p}.mlp.fc1.bias"),
                fc2_weight=take(f"{p}.mlp.fc2.weight"),
                fc2_bias=take(f"{p}.mlp.fc2.bias"),
                ls1=tensors.get(f"{p}.ls1"),
                ls2=tensors.get(f"{p}.ls2"),
            )
        )
    weights = BackboneWeights(
        patch_weight=take("patch_embed.weight"),
        patch_bias=take("patch_embed.bias"),
        cls_token=take("cls_token"),
        register_tokens=take("register_tokens"),
        pos_embed=take("pos_embed"),
        blocks=blocks,
        norm_weight=take("norm.weight"),
        norm_bias=take("norm.bias"),
    )
    weights.validate(config)
    return weights


def save_weights(path: str | Path, weights: BackboneWeights, config: ModelConfig) -> str:
    """Write a model container; returns its fingerprint."""
    blob = serialize_weights(weights, config)
    Path(path).write_bytes(blob)
    return fingerprint_bytes(blob)


def read_model_config(path: str | Path) -> ModelConfig | None:
    """Model configuration embedded in a container's metadata, if present."""
    _, metadata = read_container(path)
    raw = metadata.get(_CONFIG_KEY)
    if raw is None:
        return None
    try:
        return ModelConfig.from_dict(json.loads(raw))
    except (json.JSONDecodeError, TypeError) as e:
        raise SchemaError(f"invalid {_CONFIG_KEY} metadata: {e}") from e


def load_weights(path: str | Path, config: ModelConfig | None = None) -> BackboneWeights:
    """Load and shape-validate weights; config falls back to container metadata."""
    tensors, metadata = read_container(path)
    if config is None:
        raw = metadata.get(_CONFIG_KEY)
        if raw is None:
            raise SchemaError(
                "no ModelConfig given and container has no model.config metadata"
            )
        config = ModelConfig.from_dict(json.loads(raw))
    return tensors_to_weights(tensors, config)


def synthesize_weights(config: ModelConfig, seed: int) -> BackboneWeights:
    """Deterministic Gaussian test weights (std 0.02).

    Projection weights, token embeddings and layerscale factors are drawn
    from N(0, 0.02^2); biases are zero, norm scales one. The draw order is
    fixed, so a given (config, seed) reproduces bitwise on any platform
    running the same numpy generation.
    """
    rng = np.random.default_rng(seed)
    std = 0.02

    def gauss(*shape: int) -> np.ndarray:
        return (rng.standard_normal(shape) * std).astype(np.float32)

    d, m = config.hidden_dim, config.mlp_hidden_dim
    p, r = config.patch_size, config.num_register_tokens
    patch_weight = gauss(d, 3, p, p)
    cls_token = gauss(d)
    register_tokens = gauss(r, d)
    pos_embed = gauss(config.num_tokens, d)
    blocks = []
    for _ in range(config.num_layers):
        blocks.append(
            BlockWeights(
                norm1_weight=np.ones(d, dtype=np.float32),
                norm1_bias=np.zeros(d, dtype=np.float32),
                qkv_weight=gauss(3 * d, d),
                qkv_bias=np.zeros(3 * d, dtype=np.float32),
                proj_weight=gauss(d, d),
                proj_bias=np.zeros(d, dtype=np.float32),
                norm2_weight=np.ones(d, dtype=np.float32),
                norm2_bias=np.zeros(d, dtype=np.float32),
                fc1_weight=gauss(m, d),
                fc1_bias=np.zeros(m, dtype=np.float32),
                fc2_weight=gauss(d, m),
                fc2_bias=np.zeros(d, dtype=np.float32),
                ls1=gauss(d) if config.use_layerscale else None,
                ls2=gauss(d) if config.use_layerscale else None,
            )
        )
    weights = BackboneWeights(
        patch_weight=patch_weight,
        patch_bias=np.zeros(d, dtype=np.float32),
        cls_token=cls_token,
        register_tokens=register_tokens,
        pos_embed=pos_embed,
        blocks=blocks,
        norm_weight=np.ones(d, dtype=np.float32),
        norm_bias=np.zeros(d, dtype=np.float32),
    )
    weights.validate(config)
    return weights


@dataclass
class ReferenceCase:
    circuit: CircuitSpec
    expected: np.ndarray  # unit-norm embedding, (hidden_dim,)


@dataclass
class ReferenceBundle:
    """Fixed input plus expected pooled embeddings for a circuit list."""

    input_tensor: np.ndarray  # (3, S, S) preprocessed image
    cases: list[ReferenceCase]
    tolerance: float


def write_reference_bundle(path: str | Path, bundle: ReferenceBundle) -> None:
    tensors = {"ref.input": bundle.input_tensor}
    for k, case in enumerate(bundle.cases):
        tensors[f"ref.case.{k}.embedding"] = case.expected
    metadata = {
        _FORMAT_KEY: "reference-bundle/1",
        "ref.tolerance": repr(float(bundle.tolerance)),
        "ref.circuits": json.dumps([c.circuit.label for c in bundle.cases]),
    }
    write_container(path, tensors, metadata)


def read_reference_bundle(path: str | Path) -> ReferenceBundle:
    tensors, metadata = read_container(path)
    if "ref.input" not in tensors:
        raise SchemaError("reference bundle is missing ref.input")
    try:
        labels = json.loads(metadata["ref.circuits"])
        tolerance = float(metadata["ref.tolerance"])
    except (KeyError, json.JSONDecodeError, ValueError) as e:
        raise SchemaError(f"invalid reference bundle metadata: {e}") from e
    cases = []
    for k, label in enumerate(labels):
        name = f"ref.case.{k}.embedding"
        if name not in tensors:
            raise SchemaError(f"reference bundle is missing {name}")
        cases.append(ReferenceCase(circuit=CircuitSpec.parse(label), expected=tensors[name]))
    return ReferenceBundle(input_tensor=tensors["ref.input"], cases=cases, tolerance=tolerance)


@dataclass
class ParityCase:
    circuit: CircuitSpec
    max_abs_deviation: float
    passed: bool


@dataclass
class ParityReport:
    tolerance: float
    cases: list[ParityCase] = field(default_factory=list)
    warning: str | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)


def verify_reference(
    weights: BackboneWeights, config: ModelConfig, bundle: ReferenceBundle
) -> ParityReport:
    """Recompute each bundled case and report max abs deviation per circuit."""
    report = ParityReport(tolerance=bundle.tolerance)
    if not bundle.cases:
        report.warning = "reference bundle has no cases; nothing verified"
        logger.warning(report.warning)
        return report
    expected_shape = (3, config.image_side, config.image_side)
    if bundle.input_tensor.shape != expected_shape:
        raise ShapeError(
            f"bundle input: expected {expected_shape}, got {bundle.input_tensor.shape}"
        )
    for case in bundle.cases:
        case.circuit.validate_for(config.num_layers)
        actual = embed_image(bundle.input_tensor, weights, case.circuit, config)
        if actual.shape != case.expected.shape:
            raise ShapeError(
                f"{case.circuit.label}: embedding shape {actual.shape} vs "
                f"expected {case.expected.shape}"
            )
        dev = float(np.max(np.abs(actual - case.expected)))
        report.cases.append(
            ParityCase(circuit=case.circuit, max_abs_deviation=dev, passed=dev <= bundle.tolerance)
        )
    return report
