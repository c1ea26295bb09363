"""Dataset discovery, preprocessing, synthetic data, and the embedding cache.

Datasets live in a ``root/{train,test}/{class_name}/`` tree of PNG or
JPEG files. Scanning is deterministic: splits in (train, test) order,
class names and file names sorted, ids assigned contiguously from 0.

Embeddings are cached one file per circuit, keyed by (model fingerprint,
circuit, preprocess digest); a cache hit is returned byte-identical with
no forward passes executed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbone import (
    BackboneWeights,
    CircuitSpec,
    ModelConfig,
    embed_image,
)
from .errors import (
    DegenerateEmbeddingError,
    InputError,
    InvalidConfigError,
    ManifestError,
    NumericError,
)

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "test")
WORKERS_ENV = "CIRCUITVIT_WORKERS"

_CACHE_MAGIC = b"CVEM"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class ManifestRecord:
    id: int
    path: str  # relative to the dataset root
    class_name: str
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def by_id(self) -> dict[int, ManifestRecord]:
        return {r.id: r for r in self.records}

    def ids(self) -> list[int]:
        return [r.id for r in self.records]


@dataclass(frozen=True)
class ClassIndex:
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if list(self.names) != sorted(self.names):
            raise ManifestError("class names must be sorted")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    def mapping(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}


def scan_directory(root: str | Path) -> tuple[DatasetManifest, ClassIndex]:
    """Build a deterministic manifest from a train/test class tree."""
    root = Path(root)
    per_split: dict[str, dict[str, list[str]]] = {}
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise ManifestError(f"missing split directory {split_dir}")
        classes: dict[str, list[str]] = {}
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            files = sorted(
                f.name
                for f in class_dir.iterdir()
                if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS
            )
            kept = []
            for name in files:
                path = class_dir / name
                if not os.access(path, os.R_OK):
                    logger.warning("skipping unreadable file %s", path)
                    continue
                kept.append(name)
            if not kept:
                logger.warning("class directory %s has no usable images", class_dir)
                continue
            classes[class_dir.name] = kept
        per_split[split] = classes

    train_classes = set(per_split["train"])
    test_only = sorted(set(per_split["test"]) - train_classes)
    if test_only:
        raise ManifestError(f"classes present only in test split: {test_only}")

    records = []
    next_id = 0
    for split in SPLITS:
        for class_name in sorted(per_split[split]):
            for name in per_split[split][class_name]:
                records.append(
                    ManifestRecord(
                        id=next_id,
                        path=f"{split}/{class_name}/{name}",
                        class_name=class_name,
                        split=split,
                    )
                )
                next_id += 1
    return DatasetManifest(records=records), ClassIndex(names=tuple(sorted(train_classes)))


def write_manifest_csv(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "path", "class", "split"])
        for r in manifest.records:
            writer.writerow([r.id, r.path, r.class_name, r.split])


def read_manifest_csv(path: str | Path) -> tuple[DatasetManifest, ClassIndex]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(
                ManifestRecord(
                    id=int(row["id"]),
                    path=row["path"],
                    class_name=row["class"],
                    split=row["split"],
                )
            )
    ids = [r.id for r in records]
    if ids != list(range(len(records))):
        raise ManifestError("manifest ids must be contiguous from 0")
    train_classes = {r.class_name for r in records if r.split == "train"}
    test_only = sorted({r.class_name for r in records if r.split == "test"} - train_classes)
    if test_only:
        raise ManifestError(f"classes present only in test split: {test_only}")
    return DatasetManifest(records=records), ClassIndex(names=tuple(sorted(train_classes)))


# Standard large-scale natural-image normalization constants.
DEFAULT_CHANNEL_MEAN = (0.485, 0.456, 0.406)
DEFAULT_CHANNEL_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessSpec:
    resize_side: int = 512
    channel_mean: tuple[float, float, float] = DEFAULT_CHANNEL_MEAN
    channel_std: tuple[float, float, float] = DEFAULT_CHANNEL_STD
    resize_filter: str = "bilinear"

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_mean", tuple(float(x) for x in self.channel_mean))
        object.__setattr__(self, "channel_std", tuple(float(x) for x in self.channel_std))
        if self.resize_side <= 0:
            raise InvalidConfigError("resize_side must be positive")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise InvalidConfigError("channel statistics must have 3 components")
        if any(s <= 0 for s in self.channel_std):
            raise InvalidConfigError("channel_std components must be > 0")
        if self.resize_filter != "bilinear":
            raise InvalidConfigError(f"unsupported resize filter {self.resize_filter!r}")

    def digest(self) -> str:
        payload = json.dumps(
            {
                "resize_side": self.resize_side,
                "channel_mean": list(self.channel_mean),
                "channel_std": list(self.channel_std),
                "resize_filter": self.resize_filter,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_and_preprocess(path: str | Path, spec: PreprocessSpec) -> np.ndarray:
    """Decode, bilinear-resize, scale to [0,1], and channel-normalize to (3, S, S)."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            img = img.resize((spec.resize_side, spec.resize_side), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise InputError(f"cannot decode {path}: {e}") from e
    arr = arr / np.float32(255.0)
    mean = np.asarray(spec.channel_mean, dtype=np.float32)
    std = np.asarray(spec.channel_std, dtype=np.float32)
    arr = (arr - mean) / std
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)


@dataclass
class EmbeddingStore:
    """Unit-norm embeddings keyed by (model fingerprint, circuit, preprocess)."""

    fingerprint: str
    circuit: CircuitSpec
    preprocess_digest: str
    ids: np.ndarray  # (N,) int64
    matrix: np.ndarray  # (N, hidden_dim) float32
    failed_ids: list[int] = field(default_factory=list)

    def row_of(self) -> dict[int, int]:
        return {int(i): row for row, i in enumerate(self.ids)}


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def store_path(cache_dir: str | Path, circuit: CircuitSpec) -> Path:
    return Path(cache_dir) / f"{circuit.label}.emb"


def save_store(store: EmbeddingStore, cache_dir: str | Path) -> Path:
    """Serialize a store; write-to-temp then atomic rename."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    target = store_path(cache_dir, store.circuit)
    n, dim = store.matrix.shape
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_CACHE_MAGIC)
            f.write(struct.pack("<I", _CACHE_VERSION))
            _write_str(f, store.fingerprint)
            _write_str(f, store.circuit.label)
            _write_str(f, store.preprocess_digest)
            f.write(struct.pack("<QQ", n, dim))
            f.write(np.ascontiguousarray(store.ids, dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(store.matrix, dtype="<f4").tobytes())
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def load_store(path: str | Path) -> EmbeddingStore:
    with open(path, "rb") as f:
        if f.read(4) != _CACHE_MAGIC:
            raise InputError(f"{path}: not an embedding store")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CACHE_VERSION:
            raise InputError(f"{path}: unsupported store version {version}")
        fingerprint = _read_str(f)
        label = _read_str(f)
        digest = _read_str(f)
        n, dim = struct.unpack("<QQ", f.read(16))
        ids = np.frombuffer(f.read(8 * n), dtype="<i8").copy()
        matrix = np.frombuffer(f.read(4 * n * dim), dtype="<f4").reshape(n, dim).copy()
    return EmbeddingStore(
        fingerprint=fingerprint,
        circuit=CircuitSpec.parse(label),
        preprocess_digest=digest,
        ids=ids,
        matrix=matrix,
    )


def _resolve_workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring invalid %s=%r", WORKERS_ENV, env)
    return min(8, os.cpu_count() or 1)


def compute_embeddings(
    records: list[ManifestRecord],
    root: str | Path,
    weights: BackboneWeights,
    config: ModelConfig,
    circuit: CircuitSpec,
    spec: PreprocessSpec,
    fingerprint: str,
    cache_dir: str | Path | None = None,
    workers: int | None = None,
) -> EmbeddingStore:
    """Embed every record under one circuit, reusing the cache when the key matches.

    Images run in parallel across a thread pool; each image is embedded
    independently, so results do not depend on scheduling order. Records
    that fail to decode or pool are skipped and reported in failed_ids.
    """
    root = Path(root)
    requested = [int(r.id) for r in records]
    if cache_dir is not None:
        path = store_path(cache_dir, circuit)
        if path.exists():
            try:
                cached = load_store(path)
            except (InputError, OSError) as e:
                logger.warning("discarding unreadable cache %s: %s", path, e)
            else:
                if (
                    cached.fingerprint == fingerprint
                    and cached.preprocess_digest == spec.digest()
                    and cached.ids.tolist() == requested
                ):
                    return cached
                logger.info("cache key mismatch for %s; recomputing", path)

    def one(record: ManifestRecord) -> np.ndarray | None:
        try:
            image = load_and_preprocess(root / record.path, spec)
            return embed_image(image, weights, circuit, config)
        except (InputError, DegenerateEmbeddingError, NumericError) as e:
            logger.warning("skipping record %d (%s): %s", record.id, record.path, e)
            return None

    n_workers = _resolve_workers(workers)
    if n_workers == 1 or len(records) <= 1:
        results = [one(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(one, records))

    kept_ids, rows, failed = [], [], []
    for record, vec in zip(records, results):
        if vec is None:
            failed.append(record.id)
        else:
            kept_ids.append(record.id)
            rows.append(vec)
    dim = config.hidden_dim
    matrix = np.stack(rows).astype(np.float32) if rows else np.zeros((0, dim), np.float32)
    store = EmbeddingStore(
        fingerprint=fingerprint,
        circuit=circuit,
        preprocess_digest=spec.digest(),
        ids=np.asarray(kept_ids, dtype=np.int64),
        matrix=matrix,
        failed_ids=failed,
    )
    if failed:
        logger.warning("%d of %d records failed to embed", len(failed), len(records))
    if cache_dir is not None and not failed:
        save_store(store, cache_dir)
    return store


# Distinct channel tints for synthetic classes; cycled when classes exceed them.
_TINTS = np.array(
    [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.2, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
        [0.9, 0.6, 0.3],
        [0.5, 0.5, 1.0],
    ],
    dtype=np.float64,
)


def _synthetic_image(
    num_classes: int, class_id: int, image_side: int, rng: np.random.Generator
) -> np.ndarray:
    """Class-dependent grating plus tint and seeded noise, in [0, 255] uint8."""
    side = image_side
    theta = np.pi * class_id / num_classes
    freq = 2.0 + 2.0 * class_id
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:side, 0:side] / side
    wave = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    tint = _TINTS[class_id % len(_TINTS)]
    img = 0.5 + 0.18 * wave[:, :, None] * tint[None, None, :]
    img = img + 0.12 * (tint[None, None, :] - 0.5)
    img = img + rng.normal(0.0, 0.06, size=(side, side, 3))
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def make_synthetic_dataset(
    root: str | Path,
    num_classes: int,
    per_class_train: int,
    per_class_test: int,
    image_side: int,
    seed: int,
) -> tuple[DatasetManifest, ClassIndex]:
    """Write a deterministic class-separable dataset tree and scan it."""
    if min(num_classes, per_class_train, per_class_test, image_side) <= 0:
        raise InputError("synthetic dataset parameters must be positive")
    root = Path(root)
    for split, count in (("train", per_class_train), ("test", per_class_test)):
        split_code = SPLITS.index(split)
        for c in range(num_classes):
            class_dir = root / split / f"class_{c:02d}"
            class_dir.mkdir(parents=True, exist_ok=True)
            for k in range(count):
                rng = np.random.default_rng([seed, split_code, c, k])
                pixels = _synthetic_image(num_classes, c, image_side, rng)
                Image.fromarray(pixels, mode="RGB").save(class_dir / f"img_{k:04d}.png")
    return scan_directory(root)
