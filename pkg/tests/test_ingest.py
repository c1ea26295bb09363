import hashlib
import logging

import numpy as np
import pytest
from PIL import Image

from circuitvit.backbone import FORWARD_COUNTER, CircuitSpec, ModelConfig, enumerate_circuits
from circuitvit.errors import InputError, InvalidConfigError, ManifestError
from circuitvit.ingest import (
    PreprocessSpec,
    compute_embeddings,
    load_and_preprocess,
    load_store,
    make_synthetic_dataset,
    read_manifest_csv,
    scan_directory,
    store_path,
    write_manifest_csv,
)
from circuitvit.model_io import fingerprint_weights, synthesize_weights
from circuitvit.semisup import knn_baseline

GOLDEN_SHA256 = "155007d4e76941433114218f52a6fb32ed181c602b7453d9e581cc5b21eb60df"


def _write_image(path, side=20, value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (side, side), (value, value, value)).save(path)


def _small_tree(root):
    for c, n_train, n_test in (("crab", 3, 1), ("eel", 3, 1)):
        for k in range(n_train):
            _write_image(root / "train" / c / f"{k}.png")
        for k in range(n_test):
            _write_image(root / "test" / c / f"{k}.png")


def test_scan_assigns_contiguous_ids(tmp_path):
    _small_tree(tmp_path)
    manifest, class_index = scan_directory(tmp_path)
    assert [r.id for r in manifest.records] == list(range(8))
    assert class_index.names == ("crab", "eel")
    assert len(manifest.split_records("train")) == 6
    assert len(manifest.split_records("test")) == 2


def test_rescan_is_deterministic(tmp_path):
    _small_tree(tmp_path)
    first, _ = scan_directory(tmp_path)
    second, _ = scan_directory(tmp_path)
    assert first.records == second.records


def test_scan_rejects_test_only_class(tmp_path):
    _small_tree(tmp_path)
    _write_image(tmp_path / "test" / "ghost" / "0.png")
    with pytest.raises(ManifestError, match="ghost"):
        scan_directory(tmp_path)


def test_scan_warns_on_empty_class_dir(tmp_path, caplog):
    _small_tree(tmp_path)
    (tmp_path / "train" / "empty_one").mkdir()
    with caplog.at_level(logging.WARNING):
        manifest, class_index = scan_directory(tmp_path)
    assert "empty_one" in caplog.text
    assert class_index.names == ("crab", "eel")


def test_scan_ignores_non_image_files(tmp_path):
    _small_tree(tmp_path)
    (tmp_path / "train" / "crab" / "notes.txt").write_text("not an image")
    manifest, _ = scan_directory(tmp_path)
    assert len(manifest.records) == 8


def test_manifest_csv_round_trip(tmp_path):
    _small_tree(tmp_path)
    manifest, class_index = scan_directory(tmp_path)
    csv_path = tmp_path / "manifest.csv"
    write_manifest_csv(manifest, csv_path)
    loaded, loaded_index = read_manifest_csv(csv_path)
    assert loaded.records == manifest.records
    assert loaded_index == class_index


def test_preprocess_constant_gray_is_zero(tmp_path):
    path = tmp_path / "gray.png"
    _write_image(path, side=16, value=100)
    spec = PreprocessSpec(
        resize_side=8,
        channel_mean=(100.0 / 255.0,) * 3,
        channel_std=(1.0, 1.0, 1.0),
    )
    tensor = load_and_preprocess(path, spec)
    assert tensor.shape == (3, 8, 8)
    np.testing.assert_allclose(tensor, 0.0, atol=1e-6)


def test_preprocess_resizes_up(tmp_path):
    path = tmp_path / "small.png"
    _write_image(path, side=32)
    tensor = load_and_preprocess(path, PreprocessSpec(resize_side=512))
    assert tensor.shape == (3, 512, 512)
    assert tensor.dtype == np.float32


def test_preprocess_golden_checksum(tmp_path):
    # Pins decoder + resizer + normalization; a change invalidates caches.
    make_synthetic_dataset(
        tmp_path, num_classes=2, per_class_train=1, per_class_test=1,
        image_side=48, seed=123,
    )
    tensor = load_and_preprocess(
        tmp_path / "train" / "class_00" / "img_0000.png", PreprocessSpec(resize_side=32)
    )
    assert hashlib.sha256(tensor.tobytes()).hexdigest() == GOLDEN_SHA256


def test_preprocess_decode_failure(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"this is not a png")
    with pytest.raises(InputError):
        load_and_preprocess(bad, PreprocessSpec(resize_side=8))


def test_preprocess_spec_invariants():
    with pytest.raises(InvalidConfigError):
        PreprocessSpec(channel_std=(0.0, 1.0, 1.0))
    with pytest.raises(InvalidConfigError):
        PreprocessSpec(resize_filter="bicubic")


TINY = ModelConfig(
    num_layers=4, hidden_dim=16, num_heads=2, mlp_hidden_dim=32,
    patch_size=4, image_side=16, num_register_tokens=1,
)


@pytest.fixture
def synth_setup(tmp_path):
    manifest, class_index = make_synthetic_dataset(
        tmp_path / "data", num_classes=2, per_class_train=3, per_class_test=2,
        image_side=TINY.image_side, seed=5,
    )
    weights = synthesize_weights(TINY, seed=0)
    fingerprint = fingerprint_weights(weights, TINY)
    spec = PreprocessSpec(resize_side=TINY.image_side)
    return manifest, class_index, tmp_path / "data", weights, fingerprint, spec


def test_embeddings_rows_unit_norm(synth_setup):
    manifest, _, root, weights, fingerprint, spec = synth_setup
    store = compute_embeddings(
        manifest.records, root, weights, TINY, CircuitSpec.duplicated(1, 2), spec, fingerprint
    )
    assert store.matrix.shape == (10, TINY.hidden_dim)
    norms = np.linalg.norm(store.matrix, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)
    assert store.ids.tolist() == [r.id for r in manifest.records]


def test_embeddings_warm_cache_is_bitwise_and_free(synth_setup, tmp_path):
    manifest, _, root, weights, fingerprint, spec = synth_setup
    cache = tmp_path / "cache"
    circuit = CircuitSpec.duplicated(0, 2)
    cold = compute_embeddings(
        manifest.records, root, weights, TINY, circuit, spec, fingerprint, cache_dir=cache
    )
    FORWARD_COUNTER.reset()
    warm = compute_embeddings(
        manifest.records, root, weights, TINY, circuit, spec, fingerprint, cache_dir=cache
    )
    assert FORWARD_COUNTER.count == 0
    assert warm.matrix.tobytes() == cold.matrix.tobytes()
    assert warm.ids.tolist() == cold.ids.tolist()


def test_embeddings_cache_ignores_mismatched_fingerprint(synth_setup, tmp_path):
    manifest, _, root, weights, fingerprint, spec = synth_setup
    cache = tmp_path / "cache"
    circuit = CircuitSpec.standard()
    compute_embeddings(
        manifest.records, root, weights, TINY, circuit, spec, fingerprint, cache_dir=cache
    )
    FORWARD_COUNTER.reset()
    compute_embeddings(
        manifest.records, root, weights, TINY, circuit, spec, "differentfingerprint",
        cache_dir=cache,
    )
    assert FORWARD_COUNTER.count == len(manifest.records)


def test_store_round_trip_bitwise(synth_setup, tmp_path):
    manifest, _, root, weights, fingerprint, spec = synth_setup
    cache = tmp_path / "cache"
    circuit = CircuitSpec.duplicated(2, 3)
    store = compute_embeddings(
        manifest.records, root, weights, TINY, circuit, spec, fingerprint, cache_dir=cache
    )
    loaded = load_store(store_path(cache, circuit))
    assert loaded.fingerprint == store.fingerprint
    assert loaded.circuit == circuit
    assert loaded.preprocess_digest == store.preprocess_digest
    assert loaded.ids.tobytes() == store.ids.tobytes()
    assert loaded.matrix.tobytes() == store.matrix.tobytes()


def test_embeddings_empty_subset(synth_setup):
    manifest, _, root, weights, fingerprint, spec = synth_setup
    store = compute_embeddings(
        [], root, weights, TINY, CircuitSpec.standard(), spec, fingerprint
    )
    assert store.matrix.shape == (0, TINY.hidden_dim)
    assert store.ids.size == 0


def test_embeddings_skip_undecodable(synth_setup, caplog):
    manifest, _, root, weights, fingerprint, spec = synth_setup
    victim = manifest.records[3]
    (root / victim.path).write_bytes(b"corrupted")
    with caplog.at_level(logging.WARNING):
        store = compute_embeddings(
            manifest.records, root, weights, TINY, CircuitSpec.standard(), spec, fingerprint
        )
    assert store.failed_ids == [victim.id]
    assert store.matrix.shape[0] == len(manifest.records) - 1


def test_embeddings_worker_count_invariance(synth_setup):
    manifest, _, root, weights, fingerprint, spec = synth_setup
    circuit = CircuitSpec.duplicated(0, 3)
    serial = compute_embeddings(
        manifest.records, root, weights, TINY, circuit, spec, fingerprint, workers=1
    )
    parallel = compute_embeddings(
        manifest.records, root, weights, TINY, circuit, spec, fingerprint, workers=4
    )
    assert serial.matrix.tobytes() == parallel.matrix.tobytes()


def test_full_circuit_sweep_distinct_keys(tmp_path):
    config = ModelConfig(
        num_layers=12, hidden_dim=8, num_heads=2, mlp_hidden_dim=16,
        patch_size=4, image_side=8, num_register_tokens=0,
    )
    manifest, _ = make_synthetic_dataset(
        tmp_path / "d", num_classes=2, per_class_train=1, per_class_test=1,
        image_side=8, seed=1,
    )
    weights = synthesize_weights(config, seed=2)
    fingerprint = fingerprint_weights(weights, config)
    spec = PreprocessSpec(resize_side=8)
    cache = tmp_path / "cache"
    circuits = enumerate_circuits(12)
    assert len(circuits) == 66
    for circuit in circuits:
        compute_embeddings(
            manifest.records, tmp_path / "d", weights, config, circuit, spec,
            fingerprint, cache_dir=cache,
        )
    files = sorted(cache.glob("*.emb"))
    assert len(files) == 66
    keys = {load_store(f).circuit for f in files}
    assert len(keys) == 66


def test_synthetic_dataset_counts_and_determinism(tmp_path):
    manifest, class_index = make_synthetic_dataset(
        tmp_path / "a", num_classes=4, per_class_train=12, per_class_test=6,
        image_side=64, seed=7,
    )
    assert len(manifest.split_records("train")) == 48
    assert len(manifest.split_records("test")) == 24
    assert class_index.num_classes == 4
    make_synthetic_dataset(
        tmp_path / "b", num_classes=4, per_class_train=12, per_class_test=6,
        image_side=64, seed=7,
    )
    a = (tmp_path / "a" / "train" / "class_02" / "img_0003.png").read_bytes()
    b = (tmp_path / "b" / "train" / "class_02" / "img_0003.png").read_bytes()
    assert a == b


def test_synthetic_dataset_knn_beats_chance(tmp_path):
    config = ModelConfig(
        num_layers=3, hidden_dim=24, num_heads=2, mlp_hidden_dim=48,
        patch_size=8, image_side=32, num_register_tokens=1,
    )
    manifest, class_index = make_synthetic_dataset(
        tmp_path / "d", num_classes=3, per_class_train=6, per_class_test=4,
        image_side=32, seed=9,
    )
    weights = synthesize_weights(config, seed=3)
    spec = PreprocessSpec(resize_side=32)
    store = compute_embeddings(
        manifest.records, tmp_path / "d", weights, config, CircuitSpec.standard(), spec,
        fingerprint_weights(weights, config),
    )
    row_of = store.row_of()
    label_of = {r.id: class_index.id_of(r.class_name) for r in manifest.records}
    seeds = {row_of[r.id]: label_of[r.id] for r in manifest.split_records("train")}
    result = knn_baseline(store.matrix, seeds, k=3)
    test_records = manifest.split_records("test")
    correct = sum(result.labels[row_of[r.id]] == label_of[r.id] for r in test_records)
    assert correct / len(test_records) > 1.0 / 3.0
