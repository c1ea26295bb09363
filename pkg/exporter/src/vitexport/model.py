"""Torch reference encoder used to compute parity embeddings.

This forward pass is the exporter's own (torch) implementation of the
re-entrant encoder: pre-norm blocks applied along an effective layer
path that may traverse a block range twice, final norm once at the end,
then mean patch-token pooling and L2 normalization. It deliberately
shares no code with any consumer of the exported container.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F


def effective_path(num_layers: int, entry: int | None, exit: int | None) -> list[int]:
    if entry is None:
        return list(range(num_layers))
    if not (0 <= entry < exit < num_layers):
        raise ValueError(f"bad circuit ({entry}, {exit}) for {num_layers} layers")
    return (
        list(range(exit + 1))
        + list(range(entry, exit + 1))
        + list(range(exit + 1, num_layers))
    )


class ReferenceEncoder:
    """Functional ViT encoder over a remapped schema tensor dict."""

    def __init__(self, tensors: dict[str, np.ndarray], arch: dict, num_heads: int,
                 layernorm_eps: float = 1e-6):
        if arch["hidden_dim"] % num_heads != 0:
            raise ValueError(f"hidden {arch['hidden_dim']} not divisible by {num_heads} heads")
        self.t = {name: torch.from_numpy(np.ascontiguousarray(a)).to(torch.float32)
                  for name, a in tensors.items()}
        self.arch = arch
        self.num_heads = num_heads
        self.eps = layernorm_eps

    def _ln(self, x: torch.Tensor, prefix: str) -> torch.Tensor:
        return F.layer_norm(
            x, (x.shape[-1],), self.t[f"{prefix}.weight"], self.t[f"{prefix}.bias"], self.eps
        )

    def _block(self, x: torch.Tensor, n: int) -> torch.Tensor:
        d = self.arch["hidden_dim"]
        h = self.num_heads
        hd = d // h
        p = f"blocks.{n}"
        y = self._ln(x, f"{p}.norm1")
        qkv = F.linear(y, self.t[f"{p}.attn.qkv.weight"], self.t[f"{p}.attn.qkv.bias"])
        tks = qkv.shape[0]
        q, k, v = qkv.reshape(tks, 3, h, hd).permute(1, 2, 0, 3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        mixed = torch.softmax(scores, dim=-1) @ v
        mixed = mixed.permute(1, 0, 2).reshape(tks, d)
        attn = F.linear(mixed, self.t[f"{p}.attn.proj.weight"], self.t[f"{p}.attn.proj.bias"])
        if f"{p}.ls1" in self.t:
            attn = attn * self.t[f"{p}.ls1"]
        x = x + attn
        y = self._ln(x, f"{p}.norm2")
        y = F.linear(y, self.t[f"{p}.mlp.fc1.weight"], self.t[f"{p}.mlp.fc1.bias"])
        y = F.gelu(y)  # exact erf formulation
        y = F.linear(y, self.t[f"{p}.mlp.fc2.weight"], self.t[f"{p}.mlp.fc2.bias"])
        if f"{p}.ls2" in self.t:
            y = y * self.t[f"{p}.ls2"]
        return x + y

    def tokenize(self, image: torch.Tensor) -> torch.Tensor:
        patch = self.arch["patch_size"]
        kernel = self.t["patch_embed.weight"]
        bias = self.t["patch_embed.bias"]
        feat = F.conv2d(image.unsqueeze(0), kernel, bias, stride=patch)
        patches = feat.flatten(2).squeeze(0).transpose(0, 1)  # (grid^2, hidden)
        tokens = torch.cat(
            [self.t["cls_token"].unsqueeze(0), self.t["register_tokens"], patches], dim=0
        )
        return tokens + self.t["pos_embed"]

    @torch.no_grad()
    def embed(self, image: torch.Tensor, entry: int | None, exit: int | None) -> np.ndarray:
        """Unit-norm pooled embedding under the given circuit."""
        x = self.tokenize(image.to(torch.float32))
        for layer in effective_path(self.arch["num_layers"], entry, exit):
            x = self._block(x, layer)
        x = self._ln(x, "norm")
        num_special = 1 + self.arch["num_register_tokens"]
        pooled = x[num_special:].mean(dim=0)
        pooled = pooled / pooled.norm()
        return pooled.to(torch.float32).numpy()
