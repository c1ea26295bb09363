"""Container export and reference-bundle emission."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import save_container
from .mapping import (
    DEFAULT_IGNORES,
    MappingError,
    fit_pos_embed,
    infer_architecture,
    remap_checkpoint,
    unwrap_state_dict,
)
from .model import ReferenceEncoder

DEFAULT_CIRCUITS = ("standard", "dup_2_5", "dup_0_11")


@dataclass
class ExportSpec:
    checkpoint: str
    container_path: str
    bundle_path: str | None = None
    num_heads: int = 12
    image_side: int = 512
    layernorm_eps: float = 1e-6
    circuits: tuple[str, ...] = DEFAULT_CIRCUITS
    reference_seed: int = 0
    tolerance: float = 1e-4
    ignore: frozenset[str] = DEFAULT_IGNORES


def parse_circuit(label: str) -> tuple[int | None, int | None]:
    if label == "standard":
        return None, None
    parts = label.split("_")
    if len(parts) == 3 and parts[0] == "dup":
        return int(parts[1]), int(parts[2])
    raise MappingError(f"unparseable circuit label {label!r}")


def fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _model_config_json(spec: ExportSpec, arch: dict) -> str:
    return json.dumps(
        {
            "num_layers": arch["num_layers"],
            "hidden_dim": arch["hidden_dim"],
            "num_heads": spec.num_heads,
            "mlp_hidden_dim": arch["mlp_hidden_dim"],
            "patch_size": arch["patch_size"],
            "image_side": spec.image_side,
            "num_register_tokens": arch["num_register_tokens"],
            "layernorm_eps": spec.layernorm_eps,
            "use_layerscale": arch["use_layerscale"],
            "activation": "gelu_erf",
        },
        sort_keys=True,
    )


def export(spec: ExportSpec) -> tuple[dict[str, np.ndarray], dict, str]:
    """Remap, validate, and write the container; returns (tensors, arch, fingerprint)."""
    raw = torch.load(spec.checkpoint, map_location="cpu", weights_only=True)
    state_dict = unwrap_state_dict(raw)
    tensors = remap_checkpoint(state_dict, spec.ignore)
    arch = infer_architecture(tensors)
    fit_pos_embed(tensors, arch, spec.image_side)
    for label in spec.circuits:
        entry, exit = parse_circuit(label)
        if entry is not None and exit >= arch["num_layers"]:
            raise MappingError(f"circuit {label} invalid for {arch['num_layers']} layers")
    metadata = {
        "model.config": _model_config_json(spec, arch),
        "export.source": str(spec.checkpoint),
    }
    save_container(spec.container_path, tensors, metadata)
    return tensors, arch, fingerprint(spec.container_path)


def emit_reference(
    spec: ExportSpec, tensors: dict[str, np.ndarray], arch: dict
) -> str:
    """Compute circuit embeddings with the torch encoder and write the bundle."""
    if spec.bundle_path is None:
        raise MappingError("no bundle path configured")
    encoder = ReferenceEncoder(tensors, arch, spec.num_heads, spec.layernorm_eps)
    rng = np.random.default_rng(spec.reference_seed)
    image = rng.normal(0.0, 1.0, size=(3, spec.image_side, spec.image_side)).astype(np.float32)
    payload: dict[str, np.ndarray] = {"ref.input": image}
    for k, label in enumerate(spec.circuits):
        entry, exit = parse_circuit(label)
        embedding = encoder.embed(torch.from_numpy(image), entry, exit)
        norm = float(np.linalg.norm(embedding))
        if abs(norm - 1.0) > 1e-5:
            raise MappingError(f"{label}: reference embedding norm {norm} is not unit")
        payload[f"ref.case.{k}.embedding"] = embedding
    metadata = {
        "format": "reference-bundle/1",
        "ref.tolerance": repr(float(spec.tolerance)),
        "ref.circuits": json.dumps(list(spec.circuits)),
        "model.config": _model_config_json(spec, arch),
    }
    save_container(spec.bundle_path, payload, metadata)
    return fingerprint(spec.bundle_path)
