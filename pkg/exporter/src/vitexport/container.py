"""Deterministic flat-tensor container writer.

The stock safetensors serializer is not byte-stable across calls (header
key order follows hash-map iteration), which would break fingerprint
reproducibility. This writer emits the same format with sorted header
keys and contiguous payload offsets, so identical tensors always produce
identical bytes. Compatibility with the stock reader is asserted in the
test suite.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_container(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        data = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for chunk in chunks:
            f.write(chunk)
