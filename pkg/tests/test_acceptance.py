"""Acceptance suite: one test per release criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v`` to get one pass/fail line
per criterion. The final test is the optional full-scale reproduction; it
runs only when a real exported model container and the 20-class dataset
are supplied via environment variables.
"""

import csv
import json
import os
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from circuitvit.backbone import (
    CircuitSpec,
    ModelConfig,
    apply_block,
    effective_layer_path,
    embed_image,
    embed_patches,
    enumerate_circuits,
    forward,
    layer_norm,
)
from circuitvit.cli import RunConfig, main, run_experiment
from circuitvit.evalsel import (
    Budget,
    CircuitFeatures,
    MetricReport,
    carve_pools,
    compute_metrics,
    draw_seeds,
    evaluate_trial,
    select_global,
    select_per_class,
    strategy_breakdown,
)
from circuitvit.ingest import ClassIndex, DatasetManifest, ManifestRecord, make_synthetic_dataset
from circuitvit.model_io import synthesize_weights
from circuitvit.reduce import fit_pca
from circuitvit.semisup import SpreadParams, build_graph, spread_iterate

PASS = "ACCEPTANCE PASS:"

ORACLE_CONFIG = ModelConfig(
    num_layers=12,
    hidden_dim=32,
    num_heads=2,
    mlp_hidden_dim=64,
    patch_size=4,
    image_side=8,
)


@pytest.fixture(scope="module")
def oracle_weights():
    return synthesize_weights(ORACLE_CONFIG, seed=0)


@pytest.fixture(scope="module")
def oracle_image():
    rng = np.random.default_rng(123)
    return rng.normal(0.0, 1.0, size=(3, 8, 8)).astype(np.float32)


def test_criterion_path_oracle_equivalence(oracle_weights, oracle_image):
    """All 66 circuits match an explicit fold over effective_layer_path, <= 1e-6."""
    start = time.monotonic()
    tokens = embed_patches(oracle_image, oracle_weights, ORACLE_CONFIG)
    worst = 0.0
    for circuit in enumerate_circuits(ORACLE_CONFIG.num_layers):
        engine = forward(tokens, oracle_weights, circuit, ORACLE_CONFIG).tokens
        x = tokens.tokens.copy()
        for layer in effective_layer_path(circuit, ORACLE_CONFIG.num_layers):
            x = apply_block(x, oracle_weights.blocks[layer], ORACLE_CONFIG)
        x = layer_norm(
            x, oracle_weights.norm_weight, oracle_weights.norm_bias,
            ORACLE_CONFIG.layernorm_eps,
        )
        worst = max(worst, float(np.max(np.abs(engine - x))))
    elapsed = time.monotonic() - start
    assert worst <= 1e-6, f"max abs deviation {worst}"
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    print(f"{PASS} path-oracle equivalence (66 circuits, max dev {worst:.2e}, {elapsed:.1f}s)")


def test_criterion_identity_block_noop(oracle_weights, oracle_image):
    """Zeroed output projections in [i, j] make every duplication a no-op, <= 1e-6."""
    import copy

    worst = 0.0
    for circuit in enumerate_circuits(ORACLE_CONFIG.num_layers):
        weights = copy.deepcopy(oracle_weights)
        for n in range(circuit.entry, circuit.exit + 1):
            block = weights.blocks[n]
            block.proj_weight = np.zeros_like(block.proj_weight)
            block.proj_bias = np.zeros_like(block.proj_bias)
            block.fc2_weight = np.zeros_like(block.fc2_weight)
            block.fc2_bias = np.zeros_like(block.fc2_bias)
        standard = embed_image(oracle_image, weights, CircuitSpec.standard(), ORACLE_CONFIG)
        duplicated = embed_image(oracle_image, weights, circuit, ORACLE_CONFIG)
        worst = max(worst, float(np.max(np.abs(standard - duplicated))))
    assert worst <= 1e-6, f"max abs deviation {worst}"
    print(f"{PASS} identity-block no-op (66 circuits, max dev {worst:.2e})")


def test_criterion_circuit_count():
    circuits = enumerate_circuits(12)
    assert len(circuits) == 66
    assert len(set(circuits)) == 66
    assert all(0 <= c.entry < c.exit < 12 for c in circuits)
    print(f"{PASS} circuit count (66 distinct valid pairs)")


def test_criterion_pca_oracle():
    """SVD fit matches covariance eigendecomposition up to sign, <= 1e-6."""
    cases = [(20, 5, 3, 0), (50, 10, 6, 1), (80, 15, 10, 2), (100, 20, 12, 3), (100, 20, 19, 4)]
    for n, d, out_dim, seed in cases:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, d)) @ rng.normal(size=(d, d))
        model = fit_pca(x, out_dim)
        centered = x - x.mean(axis=0)
        vals, vecs = np.linalg.eigh(centered.T @ centered / (n - 1))
        order = np.argsort(vals)[::-1][:out_dim]
        np.testing.assert_allclose(model.explained_variance, vals[order], atol=1e-6)
        for row, eig in zip(model.basis, vecs[:, order].T):
            assert min(np.abs(row - eig).max(), np.abs(row + eig).max()) <= 1e-6
        gram = model.basis @ model.basis.T
        np.testing.assert_allclose(gram, np.eye(out_dim), atol=1e-6)
        var = model.explained_variance
        assert np.all(var[:-1] >= var[1:] - 1e-12) and np.all(var >= 0)
    print(f"{PASS} pca oracle ({len(cases)} instances up to 100x20)")


def test_criterion_label_spreading_oracle():
    """Iterated diffusion within 1e-6 (inf-norm) of (1-a)(I-aS)^-1 Y on graphs <= 10 nodes."""
    checked = 0
    for n in range(2, 11):
        for seed in range(3):
            rng = np.random.default_rng(100 * n + seed)
            x = rng.normal(size=(n, 3))
            for k in (1, 3, n - 1):
                if k < 1 or k > n - 1:
                    continue
                params = SpreadParams(k_neighbors=k)
                graph = build_graph(x, params)
                y = np.zeros((n, 3))
                for i in range(n):
                    if i % 2 == 0:
                        y[i, i % 3] = 1.0
                f = spread_iterate(graph, y, params.alpha, params.max_iter, params.tol)
                s = graph.propagation.toarray()
                f_star = (1.0 - params.alpha) * np.linalg.solve(
                    np.eye(n) - params.alpha * s, y
                )
                assert np.abs(f - f_star).max() <= 1e-6
                checked += 1
    print(f"{PASS} label-spreading closed-form oracle ({checked} graphs, <= 10 nodes)")


def test_criterion_metrics_hand_worked():
    class_index = ClassIndex(("neg", "pos"))
    truth = {0: 0, 1: 0, 2: 1, 3: 1}
    preds = {0: 0, 1: 1, 2: 1, 3: 1}  # confusion [[1, 1], [0, 2]]
    report = compute_metrics(preds, truth, class_index)
    assert abs(report.per_class_f1["neg"] - 2.0 / 3.0) <= 1e-12
    assert abs(report.per_class_f1["pos"] - 0.8) <= 1e-12
    assert abs(report.macro_f1 - 0.7333333333333334) <= 1e-12

    # Zero-division convention: no predictions and no positives -> 0.
    three = ClassIndex(("a", "b", "c"))
    report = compute_metrics({0: 0, 1: 1}, {0: 0, 1: 1}, three)
    assert report.per_class_f1["c"] == 0.0
    assert abs(report.macro_f1 - (1.0 + 1.0 + 0.0) / 3.0) <= 1e-12

    perfect = compute_metrics({0: 0, 1: 1}, {0: 0, 1: 1}, ClassIndex(("a", "b")))
    assert perfect.accuracy == 1.0 and perfect.macro_f1 == 1.0
    print(f"{PASS} metrics (hand-worked confusions, macro F1 0.7333..., zero-division)")


# ------------------------------------------------------ synthetic end-to-end

END_TO_END_MODEL = {
    "num_layers": 4,
    "hidden_dim": 32,
    "num_heads": 4,
    "mlp_hidden_dim": 64,
    "patch_size": 16,
    "image_side": 64,
    "num_register_tokens": 2,
    "seed": 0,
}
END_TO_END_BUDGETS = ["2cls", "50pct", "100pct"]


@pytest.fixture(scope="module")
def end_to_end_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("e2e")
    make_synthetic_dataset(
        base / "data", num_classes=4, per_class_train=12, per_class_test=6,
        image_side=64, seed=7,
    )
    cfg = RunConfig(
        dataset_root=str(base / "data"),
        synthetic_model=dict(END_TO_END_MODEL),
        circuits="all",  # 6 duplicated circuits of a 4-layer model + standard
        pca_dim=8,
        budgets=list(END_TO_END_BUDGETS),
        repeat_seeds=[0, 1, 2],
        val_fraction=0.4,
        output_dir=str(base / "out"),
    )
    summary = run_experiment(cfg)
    return base, cfg, summary


def _averaged_val_reports(out_dir: Path, class_names: list[str]):
    """Re-aggregate per-repeat validation rows from trials.csv."""
    rows = list(csv.DictReader((out_dir / "trials.csv").open()))
    grouped = defaultdict(list)
    for row in rows:
        if row["target"] != "val":
            continue
        if row["circuit_i"] == "standard":
            circuit = CircuitSpec.standard()
        else:
            circuit = CircuitSpec.duplicated(int(row["circuit_i"]), int(row["circuit_j"]))
        grouped[(row["budget"], circuit, row["method"])].append(row)
    reports: dict[str, dict] = defaultdict(dict)
    for (budget, circuit, method), entries in grouped.items():
        per_class = {
            name: float(np.mean([float(e[f"f1_{name}"]) for e in entries]))
            for name in class_names
        }
        reports[budget][(circuit, method)] = MetricReport(
            accuracy=float(np.mean([float(e["accuracy"]) for e in entries])),
            macro_f1=float(np.mean(list(per_class.values()))),
            per_class_f1=per_class,
            support={name: 1 for name in class_names},
        )
    return reports


def test_criterion_selection_invariants_end_to_end(end_to_end_run):
    """On validation: class-specific macro >= global macro >= standard baseline."""
    base, cfg, summary = end_to_end_run
    class_names = [f"class_{c:02d}" for c in range(4)]
    class_index = ClassIndex(tuple(class_names))
    val_reports = _averaged_val_reports(Path(cfg.output_dir), class_names)
    assert set(val_reports) == set(END_TO_END_BUDGETS)
    for budget in END_TO_END_BUDGETS:
        reports = val_reports[budget]
        assert len(reports) == 7 * 5  # (6 duplicated + standard) x 5 methods
        global_sel = select_global(reports)
        per_class_sel = select_per_class(reports, class_index)
        standard_macro = max(r.macro_f1 for (c, _), r in reports.items() if c.is_standard)
        global_report = reports[(global_sel.circuit, global_sel.method)]
        class_specific_macro = float(
            np.mean([per_class_sel[n].score for n in class_names])
        )
        assert class_specific_macro >= global_sel.score >= standard_macro
        for name in class_names:
            assert per_class_sel[name].score >= global_report.per_class_f1[name]
    print(f"{PASS} selection invariants on synthetic end-to-end run "
          f"(4 classes, 7 candidates, {len(END_TO_END_BUDGETS)} budgets)")


def test_criterion_planted_circuits_recovered():
    """select_per_class recovers class-dependent planted circuits in a synthetic sweep."""
    class_names = ("cls_a", "cls_b", "cls_c", "cls_d")
    class_index = ClassIndex(class_names)
    records = []
    next_id = 0
    for split, count in (("train", 12), ("test", 6)):
        for name in class_names:
            for _ in range(count):
                records.append(ManifestRecord(next_id, f"{split}/{name}/{next_id}", name, split))
                next_id += 1
    manifest = DatasetManifest(records)
    labels = {r.id: class_index.id_of(r.class_name) for r in manifest.records}
    candidates = [CircuitSpec.standard()] + enumerate_circuits(4)
    planted = {
        0: CircuitSpec.duplicated(0, 1),
        1: CircuitSpec.duplicated(0, 3),
        2: CircuitSpec.duplicated(1, 2),
        3: CircuitSpec.duplicated(2, 3),
    }
    dim = 6
    features = {}
    for circuit in candidates:
        rng = np.random.default_rng(abs(hash((circuit.entry, circuit.exit))) % (2**32))
        x = np.zeros((len(records), dim))
        for row, record in enumerate(manifest.records):
            c = labels[record.id]
            direction = np.eye(dim)[c]
            if circuit.is_standard:
                x[row] = 2.0 * direction + rng.normal(0.0, 1.0, dim)
            elif planted[c] == circuit:
                x[row] = 8.0 * direction + rng.normal(0.0, 0.2, dim)
            else:
                x[row] = rng.normal(0.0, 1.0, dim)
        features[circuit] = CircuitFeatures(
            circuit=circuit, ids=np.array(manifest.ids(), np.int64), x=x
        )

    plan = carve_pools(manifest, class_index, val_fraction=0.4, seed=0)
    budgets = [Budget.per_class(2), Budget.fraction(0.5), Budget.fraction(1.0)]
    for budget in budgets:
        val_reports = {}
        for circuit in candidates:
            for method in ("knn_baseline", "label_spreading"):
                avg, _ = evaluate_trial(
                    features[circuit], labels, class_index, plan,
                    method, budget, [0, 1, 2], "val",
                )
                val_reports[(circuit, method)] = avg
        winners = select_per_class(val_reports, class_index)
        for name in class_names:
            c = class_index.id_of(name)
            assert winners[name].circuit == planted[c], (
                f"{budget.label}/{name}: expected {planted[c].label}, "
                f"got {winners[name].circuit.label}"
            )
        global_sel = select_global(val_reports)
        breakdown = strategy_breakdown(winners, global_sel)
        assert breakdown.baseline_best + breakdown.global_best + breakdown.unique_best == 4
    print(f"{PASS} planted class-dependent circuits recovered at all "
          f"{len(budgets)} budgets")


def test_criterion_budget_arithmetic():
    records = []
    for i in range(100):
        records.append(ManifestRecord(i, f"train/only/{i}.png", "only", "train"))
    for i in range(100, 110):
        records.append(ManifestRecord(i, f"test/only/{i}.png", "only", "test"))
    manifest = DatasetManifest(records)
    class_index = ClassIndex(("only",))
    plan = carve_pools(manifest, class_index, val_fraction=0.4, seed=0)
    assert len(plan.val_ids) == 40 and len(plan.seedpool_ids) == 60

    labels = {r.id: 0 for r in manifest.records}
    seeds = draw_seeds(plan, labels, class_index, Budget.fraction(0.10), seed=0)
    assert len(seeds) == 6  # ceil(0.10 * 60) = 6, ~6% of the original 100
    seeds = draw_seeds(plan, labels, class_index, Budget.fraction(1.0), seed=0)
    assert len(seeds) == 60
    print(f"{PASS} budget arithmetic (40/60 carve, 10% -> 6 of 60, 100% -> 60)")


def test_criterion_run_determinism(end_to_end_run):
    """A second cmd_run with the identical config reproduces every byte."""
    base, cfg, _ = end_to_end_run
    out = Path(cfg.output_dir)
    artifacts = sorted(p for p in out.iterdir() if p.is_file())
    assert artifacts, "first run produced no artifacts"
    before = {p.name: p.read_bytes() for p in artifacts}
    config_path = base / "rerun.json"
    config_path.write_text(json.dumps(cfg.to_dict()))
    assert main(["run", "--config", str(config_path)]) == 0
    after = {p.name: p.read_bytes() for p in artifacts}
    assert before == after
    print(f"{PASS} determinism ({len(artifacts)} artifact files byte-identical)")


FULL_SCALE_DATASET = os.environ.get("CIRCUITVIT_AQUA20_ROOT")
FULL_SCALE_MODEL = os.environ.get("CIRCUITVIT_MODEL_CONTAINER")


@pytest.mark.skipif(
    not (FULL_SCALE_DATASET and FULL_SCALE_MODEL),
    reason="optional full-scale criterion: set CIRCUITVIT_AQUA20_ROOT and "
    "CIRCUITVIT_MODEL_CONTAINER to run against the real checkpoint and dataset",
)
def test_criterion_full_scale_reproduction(tmp_path):
    """Optional: 100%-budget scores within +-0.02 of the published table."""
    cfg = RunConfig(
        dataset_root=FULL_SCALE_DATASET,
        model_path=FULL_SCALE_MODEL,
        circuits="all",
        pca_dim=128,
        budgets=["5cls", "10cls", "20cls", "5pct", "10pct", "15pct", "100pct"],
        repeat_seeds=[0, 1, 2],
        val_fraction=0.4,
        output_dir=str(tmp_path / "full"),
    )
    summary = run_experiment(cfg)
    full = summary["global"]["100pct"]
    assert abs(full["standard_baseline"]["macro_f1"] - 0.832) <= 0.02
    assert abs(full["global_circuit"]["macro_f1"] - 0.855) <= 0.02
    assert abs(full["class_specific"]["macro_f1"] - 0.875) <= 0.02
    octopus = summary["per_class"]["classes"]["octopus"]["class_specific_f1"]
    assert octopus >= 0.85
    for label, counts in summary["breakdown"].items():
        total = counts["baseline_best"] + counts["global_best"] + counts["unique_best"]
        assert counts["unique_best"] / total >= 0.60, label
    print(f"{PASS} full-scale reproduction within published tolerances")
