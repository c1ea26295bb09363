"""Checkpoint tensor-name remapping into the documented container schema.

Source checkpoints follow the common self-distilled-ViT naming
(patch_embed.proj.*, cls_token, register_tokens, pos_embed,
blocks.N.{norm1,attn.qkv,attn.proj,norm2,mlp.fc1,mlp.fc2,ls1,ls2},
norm.*). Any source tensor that cannot be mapped is a hard error: a
silently dropped tensor usually means a different architecture (rotary
embeddings, gated feed-forward), and approximating it would corrupt the
parity bundle.
"""

from __future__ import annotations

import re

import numpy as np
import torch

# Known-inert tensors that never participate in embedding inference.
DEFAULT_IGNORES = frozenset({"mask_token"})


class MappingError(RuntimeError):
    pass


def _to_f32(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().to(torch.float32).cpu().numpy()


_BLOCK_RENAMES = [
    (re.compile(r"^blocks\.(\d+)\.norm1\.(weight|bias)$"), "blocks.{n}.norm1.{p}"),
    (re.compile(r"^blocks\.(\d+)\.attn\.qkv\.(weight|bias)$"), "blocks.{n}.attn.qkv.{p}"),
    (re.compile(r"^blocks\.(\d+)\.attn\.proj\.(weight|bias)$"), "blocks.{n}.attn.proj.{p}"),
    (re.compile(r"^blocks\.(\d+)\.norm2\.(weight|bias)$"), "blocks.{n}.norm2.{p}"),
    (re.compile(r"^blocks\.(\d+)\.mlp\.fc1\.(weight|bias)$"), "blocks.{n}.mlp.fc1.{p}"),
    (re.compile(r"^blocks\.(\d+)\.mlp\.fc2\.(weight|bias)$"), "blocks.{n}.mlp.fc2.{p}"),
]
_LAYERSCALE_RENAMES = [
    (re.compile(r"^blocks\.(\d+)\.ls1\.gamma$"), "blocks.{n}.ls1"),
    (re.compile(r"^blocks\.(\d+)\.ls2\.gamma$"), "blocks.{n}.ls2"),
    (re.compile(r"^blocks\.(\d+)\.gamma_1$"), "blocks.{n}.ls1"),
    (re.compile(r"^blocks\.(\d+)\.gamma_2$"), "blocks.{n}.ls2"),
]


def unwrap_state_dict(raw) -> dict[str, torch.Tensor]:
    if isinstance(raw, dict):
        for key in ("state_dict", "model", "teacher"):
            if key in raw and isinstance(raw[key], dict):
                raw = raw[key]
                break
    if not isinstance(raw, dict) or not all(isinstance(v, torch.Tensor) for v in raw.values()):
        raise MappingError("checkpoint does not contain a flat tensor state dict")
    # Common wrapper prefixes from distributed training or composite models.
    cleaned = {}
    for name, tensor in raw.items():
        for prefix in ("module.", "backbone."):
            if name.startswith(prefix):
                name = name[len(prefix):]
        cleaned[name] = tensor
    return cleaned


def remap_checkpoint(
    state_dict: dict[str, torch.Tensor],
    ignore: frozenset[str] = DEFAULT_IGNORES,
) -> dict[str, np.ndarray]:
    """Map source names to schema names; every source tensor must be accounted for."""
    out: dict[str, np.ndarray] = {}
    unmapped: list[str] = []
    for name, tensor in sorted(state_dict.items()):
        if name in ignore:
            continue
        if name == "cls_token":
            out["cls_token"] = _to_f32(tensor).reshape(-1)
            continue
        if name in ("register_tokens", "reg_tokens"):
            arr = _to_f32(tensor)
            out["register_tokens"] = arr.reshape(arr.shape[-2], arr.shape[-1])
            continue
        if name == "pos_embed":
            arr = _to_f32(tensor)
            out["pos_embed"] = arr.reshape(arr.shape[-2], arr.shape[-1])
            continue
        if name in ("patch_embed.proj.weight", "patch_embed.proj.bias"):
            out[name.replace(".proj", "")] = _to_f32(tensor)
            continue
        if name in ("norm.weight", "norm.bias"):
            out[name] = _to_f32(tensor)
            continue
        matched = False
        for pattern, template in _BLOCK_RENAMES + _LAYERSCALE_RENAMES:
            m = pattern.match(name)
            if m:
                groups = m.groups()
                target = template.replace("{n}", groups[0])
                if len(groups) > 1:
                    target = target.replace("{p}", groups[1])
                out[target] = _to_f32(tensor)
                matched = True
                break
        if not matched:
            unmapped.append(name)
    if unmapped:
        raise MappingError(
            "unmapped source tensors (architecture mismatch?): " + ", ".join(unmapped)
        )
    return out


def infer_architecture(tensors: dict[str, np.ndarray]) -> dict:
    """Derive layer count and widths from the remapped tensors."""
    required = ["cls_token", "patch_embed.weight", "patch_embed.bias", "pos_embed",
                "norm.weight", "norm.bias"]
    missing = [name for name in required if name not in tensors]
    if missing:
        raise MappingError(f"checkpoint is missing required tensors: {missing}")
    block_ids = sorted(
        {int(m.group(1)) for name in tensors
         if (m := re.match(r"^blocks\.(\d+)\.", name))}
    )
    if not block_ids or block_ids != list(range(len(block_ids))):
        raise MappingError(f"non-contiguous block indices: {block_ids}")
    num_layers = len(block_ids)
    hidden = tensors["cls_token"].shape[0]
    kernel = tensors["patch_embed.weight"]
    if kernel.ndim != 4 or kernel.shape[0] != hidden or kernel.shape[1] != 3:
        raise MappingError(f"unexpected patch kernel shape {kernel.shape}")
    patch = kernel.shape[2]
    if kernel.shape[3] != patch:
        raise MappingError("non-square patch kernel")
    registers = tensors.get("register_tokens")
    num_registers = 0 if registers is None else registers.shape[0]
    if registers is None:
        tensors["register_tokens"] = np.zeros((0, hidden), dtype=np.float32)
    use_layerscale = "blocks.0.ls1" in tensors
    for n in range(num_layers):
        qkv = tensors.get(f"blocks.{n}.attn.qkv.weight")
        if qkv is None or qkv.shape != (3 * hidden, hidden):
            raise MappingError(f"blocks.{n}: bad or missing qkv weight")
        if use_layerscale != (f"blocks.{n}.ls1" in tensors):
            raise MappingError("layerscale present in some blocks but not others")
    mlp_hidden = tensors["blocks.0.mlp.fc1.weight"].shape[0]
    return {
        "num_layers": num_layers,
        "hidden_dim": hidden,
        "mlp_hidden_dim": mlp_hidden,
        "patch_size": patch,
        "num_register_tokens": num_registers,
        "use_layerscale": use_layerscale,
    }


def fit_pos_embed(
    tensors: dict[str, np.ndarray], arch: dict, image_side: int
) -> None:
    """Expand the positional table to the full [cls, registers, patches] layout.

    Checkpoints whose table covers only the class and patch tokens get
    zero rows for the registers (registers carry no positional signal).
    A patch-grid mismatch is a hard error; interpolation is out of scope.
    """
    if image_side % arch["patch_size"] != 0:
        raise MappingError(
            f"image side {image_side} not divisible by patch {arch['patch_size']}"
        )
    num_patches = (image_side // arch["patch_size"]) ** 2
    r = arch["num_register_tokens"]
    full = 1 + r + num_patches
    pos = tensors["pos_embed"]
    if pos.shape[0] == full:
        return
    if pos.shape[0] == 1 + num_patches:
        zeros = np.zeros((r, pos.shape[1]), dtype=np.float32)
        tensors["pos_embed"] = np.concatenate([pos[:1], zeros, pos[1:]], axis=0)
        return
    raise MappingError(
        f"pos_embed covers {pos.shape[0]} tokens; expected {full} or {1 + num_patches} "
        f"for image side {image_side} (interpolation not supported)"
    )
