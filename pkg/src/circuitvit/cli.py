"""Command-line entry point and experiment orchestration.

Subcommands: scan | synth | embed | run | verify-weights. The run
configuration is a JSON document; command-line flags override config
keys, which override built-in defaults. Exit codes: 2 invalid
configuration, 3 data errors, 4 parity failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalsel, reporting
from .backbone import (
    FORWARD_COUNTER,
    CircuitSpec,
    ModelConfig,
    enumerate_circuits,
)
from .errors import CircuitVitError, InvalidConfigError
from .evalsel import Budget, CircuitFeatures, MethodParams, carve_pools
from .ingest import (
    DatasetManifest,
    PreprocessSpec,
    compute_embeddings,
    make_synthetic_dataset,
    read_manifest_csv,
    scan_directory,
    write_manifest_csv,
)
from .model_io import (
    fingerprint_file,
    fingerprint_weights,
    load_weights,
    read_model_config,
    read_reference_bundle,
    synthesize_weights,
    verify_reference,
)
from .reduce import fit_pca, transform
from .reporting import TrialRow
from .semisup import (
    METHOD_NAMES,
    KmeansParams,
    SelfTrainParams,
    SpreadParams,
    SvmParams,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PARITY = 4


@dataclass
class RunConfig:
    dataset_root: str | None = None
    manifest: str | None = None
    model_path: str | None = None
    synthetic_model: dict | None = None
    preprocess: dict = field(default_factory=dict)
    circuits: str | list = "all"
    pca_dim: int = 128
    inductive_pca: bool = False
    methods: list[str] = field(default_factory=lambda: list(METHOD_NAMES))
    budgets: list[str] = field(default_factory=lambda: ["5cls", "10cls", "20cls"])
    repeat_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    val_fraction: float = 0.4
    split_seed: int = 0
    output_dir: str = "results"
    cache_dir: str | None = None
    classifier: dict = field(default_factory=dict)
    workers: int | None = None

    @classmethod
    def load(cls, config_path: str | None, overrides: dict) -> "RunConfig":
        data: dict = {}
        if config_path:
            try:
                data = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise InvalidConfigError(f"cannot read config {config_path}: {e}") from e
            if not isinstance(data, dict):
                raise InvalidConfigError("config file must hold a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.dataset_root and not self.manifest:
            raise InvalidConfigError("one of dataset_root or manifest is required")
        if not self.model_path and self.synthetic_model is None:
            raise InvalidConfigError("one of model_path or synthetic_model is required")
        if not self.budgets:
            raise InvalidConfigError("budgets must be nonempty")
        bad = [m for m in self.methods if m not in METHOD_NAMES]
        if bad:
            raise InvalidConfigError(f"unknown methods {bad}; choose from {list(METHOD_NAMES)}")
        if not self.methods:
            raise InvalidConfigError("methods must be nonempty")
        if not self.repeat_seeds:
            raise InvalidConfigError("repeat_seeds must be nonempty")
        if self.pca_dim < 1:
            raise InvalidConfigError("pca_dim must be >= 1")
        for label in self.budgets:
            Budget.parse(label)

    def to_dict(self) -> dict:
        return {
            "dataset_root": self.dataset_root,
            "manifest": self.manifest,
            "model_path": self.model_path,
            "synthetic_model": self.synthetic_model,
            "preprocess": self.preprocess,
            "circuits": self.circuits,
            "pca_dim": self.pca_dim,
            "inductive_pca": self.inductive_pca,
            "methods": list(self.methods),
            "budgets": list(self.budgets),
            "repeat_seeds": list(self.repeat_seeds),
            "val_fraction": self.val_fraction,
            "split_seed": self.split_seed,
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
            "classifier": self.classifier,
            "workers": self.workers,
        }


def parse_circuit_arg(value: str | list, num_layers: int) -> list[CircuitSpec]:
    """Candidate circuits; the standard pass always leads the list."""
    circuits = [CircuitSpec.standard()]
    if value == "standard":
        return circuits
    if value == "all":
        circuits.extend(enumerate_circuits(num_layers))
        return circuits
    pairs: list[tuple[int, int]] = []
    if isinstance(value, str):
        for chunk in value.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                i, j = chunk.split("-")
                pairs.append((int(i), int(j)))
            except ValueError as e:
                raise InvalidConfigError(f"unparseable circuit {chunk!r}; use i-j") from e
    elif isinstance(value, list):
        for item in value:
            if not (isinstance(item, (list, tuple)) and len(item) == 2):
                raise InvalidConfigError(f"circuit entries must be [i, j] pairs, got {item!r}")
            pairs.append((int(item[0]), int(item[1])))
    else:
        raise InvalidConfigError(f"unsupported circuits value {value!r}")
    seen = set()
    for i, j in pairs:
        spec = CircuitSpec.duplicated(i, j)
        spec.validate_for(num_layers)
        if spec not in seen:
            circuits.append(spec)
            seen.add(spec)
    return circuits


def method_params_from_config(raw: dict) -> MethodParams:
    raw = dict(raw or {})
    known = {"spread", "self_train", "svm", "kmeans", "knn_k"}
    unknown = set(raw) - known
    if unknown:
        raise InvalidConfigError(f"unknown classifier sections: {sorted(unknown)}")
    try:
        return MethodParams(
            spread=SpreadParams(**raw.get("spread", {})),
            self_train=SelfTrainParams(**raw.get("self_train", {})),
            svm=SvmParams(**raw.get("svm", {})),
            kmeans=KmeansParams(**raw.get("kmeans", {})),
            knn_k=int(raw.get("knn_k", 5)),
        )
    except TypeError as e:
        raise InvalidConfigError(f"bad classifier parameters: {e}") from e


def _load_dataset(cfg: RunConfig):
    if cfg.manifest:
        manifest, class_index = read_manifest_csv(cfg.manifest)
        root = Path(cfg.dataset_root) if cfg.dataset_root else Path(cfg.manifest).parent
    else:
        manifest, class_index = scan_directory(cfg.dataset_root)
        root = Path(cfg.dataset_root)
    return manifest, class_index, root


def _load_model(cfg: RunConfig):
    if cfg.model_path:
        config = read_model_config(cfg.model_path)
        if config is None:
            raise InvalidConfigError(
                f"{cfg.model_path} has no embedded model.config; re-export it"
            )
        weights = load_weights(cfg.model_path, config)
        fingerprint = fingerprint_file(cfg.model_path)
    else:
        raw = dict(cfg.synthetic_model)
        seed = int(raw.pop("seed", 0))
        config = ModelConfig.from_dict(raw)
        weights = synthesize_weights(config, seed)
        fingerprint = fingerprint_weights(weights, config)
    return weights, config, fingerprint


def _preprocess_spec(cfg: RunConfig, model_config: ModelConfig) -> PreprocessSpec:
    raw = dict(cfg.preprocess or {})
    raw.setdefault("resize_side", model_config.image_side)
    spec = PreprocessSpec(
        resize_side=int(raw["resize_side"]),
        channel_mean=tuple(raw.get("channel_mean", (0.485, 0.456, 0.406))),
        channel_std=tuple(raw.get("channel_std", (0.229, 0.224, 0.225))),
    )
    if spec.resize_side != model_config.image_side:
        raise InvalidConfigError(
            f"preprocess resize_side {spec.resize_side} != model image_side "
            f"{model_config.image_side}"
        )
    return spec


def _compute_feature_spaces(cfg, manifest, class_index, root, weights, model_config, prep, fingerprint):
    """Embed every record under every candidate circuit and reduce per circuit."""
    circuits = parse_circuit_arg(cfg.circuits, model_config.num_layers)
    cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else Path(cfg.output_dir) / "cache"
    stores = {}
    for circuit in circuits:
        stores[circuit] = compute_embeddings(
            manifest.records, root, weights, model_config, circuit, prep,
            fingerprint, cache_dir=cache_dir, workers=cfg.workers,
        )
    common = set(stores[circuits[0]].ids.tolist())
    for store in stores.values():
        common &= set(store.ids.tolist())
    common_ids = sorted(common)
    dropped = len(manifest.records) - len(common_ids)
    if dropped:
        logger.warning("%d records lack embeddings under some circuit; dropped", dropped)
    train_ids = {r.id for r in manifest.split_records("train")}
    features: dict[CircuitSpec, CircuitFeatures] = {}
    for circuit in circuits:
        store = stores[circuit]
        row_of = store.row_of()
        x_full = store.matrix[[row_of[i] for i in common_ids]]
        if cfg.inductive_pca:
            fit_x = x_full[[k for k, i in enumerate(common_ids) if i in train_ids]]
        else:
            fit_x = x_full
        pca = fit_pca(fit_x, cfg.pca_dim)
        features[circuit] = CircuitFeatures(
            circuit=circuit,
            ids=np.asarray(common_ids, dtype=np.int64),
            x=transform(pca, x_full),
        )
    filtered = DatasetManifest([r for r in manifest.records if r.id in common])
    return circuits, features, filtered


def _budget_totals(plan, labels_by_id, class_index, budgets):
    totals = {}
    for budget in budgets:
        seeds = evalsel.draw_seeds(plan, labels_by_id, class_index, budget, seed=0)
        totals[budget] = len(seeds)
    return totals


def run_experiment(cfg: RunConfig) -> dict:
    """Full sweep: embeddings, reduction, trials, selection, artifacts on disk."""
    manifest, class_index, root = _load_dataset(cfg)
    weights, model_config, fingerprint = _load_model(cfg)
    prep = _preprocess_spec(cfg, model_config)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    circuits, features, filtered = _compute_feature_spaces(
        cfg, manifest, class_index, root, weights, model_config, prep, fingerprint
    )
    plan = carve_pools(filtered, class_index, cfg.val_fraction, cfg.split_seed)
    labels_by_id = {r.id: class_index.id_of(r.class_name) for r in filtered.records}
    params = method_params_from_config(cfg.classifier)
    budgets = [Budget.parse(label) for label in cfg.budgets]

    trial_rows: list[TrialRow] = []
    avg_reports: dict[str, dict[str, dict]] = {"val": {}, "test": {}}
    for budget in budgets:
        for target in evalsel.TARGETS:
            avg_reports[target][budget.label] = {}
        for circuit in circuits:
            for method in cfg.methods:
                for target in evalsel.TARGETS:
                    avg, singles = evalsel.evaluate_trial(
                        features[circuit], labels_by_id, class_index, plan,
                        method, budget, cfg.repeat_seeds, target, params,
                    )
                    avg_reports[target][budget.label][(circuit, method)] = avg
                    for seed, report in zip(cfg.repeat_seeds, singles):
                        trial_rows.append(
                            TrialRow(budget, circuit, method, seed, target, report)
                        )

    reference = reporting.load_reference_scores()
    selections: dict[str, dict] = {}
    breakdowns: dict[str, evalsel.StrategyBreakdown] = {}
    plot_f1: dict[str, dict] = {}
    plot_acc: dict[str, dict] = {}
    summary_global: dict[str, dict] = {}
    for budget in budgets:
        val_reports = avg_reports["val"][budget.label]
        test_reports = avg_reports["test"][budget.label]
        global_sel = evalsel.select_global(val_reports)
        per_class_sel = evalsel.select_per_class(val_reports, class_index)
        standard_only = {k: v for k, v in val_reports.items() if k[0].is_standard}
        baseline_sel = evalsel.select_global(standard_only)
        class_table, class_macro = evalsel.assemble_class_specific_report(
            test_reports, per_class_sel, class_index
        )
        breakdowns[budget.label] = evalsel.strategy_breakdown(per_class_sel, global_sel)

        global_test = test_reports[(global_sel.circuit, global_sel.method)]
        baseline_test = test_reports[(baseline_sel.circuit, baseline_sel.method)]
        selections[budget.label] = {
            "global": global_sel,
            "per_class": per_class_sel,
            "baseline": baseline_sel,
            "global_test_macro_f1": global_test.macro_f1,
            "baseline_test_macro_f1": baseline_test.macro_f1,
            "per_class_test_f1": class_table,
            "class_specific_test_macro_f1": class_macro,
        }
        plot_f1[budget.label] = {
            "standard_baseline": baseline_test.macro_f1,
            "global_circuit": global_test.macro_f1,
            "class_specific": class_macro,
        }
        plot_acc[budget.label] = {
            "standard_baseline": baseline_test.accuracy,
            "global_circuit": global_test.accuracy,
        }
        ref_macro = reference["global"]["macro_f1"]
        summary_global[budget.label] = {
            "standard_baseline": {
                "macro_f1": baseline_test.macro_f1,
                "accuracy": baseline_test.accuracy,
                "circuit": baseline_sel.circuit.label,
                "method": baseline_sel.method,
                "val_macro_f1": baseline_sel.score,
                "delta_macro_f1": baseline_test.macro_f1 - ref_macro,
            },
            "global_circuit": {
                "macro_f1": global_test.macro_f1,
                "accuracy": global_test.accuracy,
                "circuit": global_sel.circuit.label,
                "method": global_sel.method,
                "val_macro_f1": global_sel.score,
                "delta_macro_f1": global_test.macro_f1 - ref_macro,
            },
            "class_specific": {
                "macro_f1": class_macro,
                "delta_macro_f1": class_macro - ref_macro,
            },
        }

    budget_totals = _budget_totals(plan, labels_by_id, class_index, budgets)
    max_budget = max(budgets, key=lambda b: (budget_totals[b], budgets.index(b)))
    max_sel = selections[max_budget.label]
    ref_per_class = reference["per_class_f1"]
    per_class_summary: dict[str, dict] = {}
    plot_per_class: dict[str, dict] = {}
    test_reports = avg_reports["test"][max_budget.label]
    global_test = test_reports[(max_sel["global"].circuit, max_sel["global"].method)]
    baseline_test = test_reports[(max_sel["baseline"].circuit, max_sel["baseline"].method)]
    for name in class_index.names:
        entry = max_sel["per_class"][name]
        convnext = ref_per_class.get(name)
        specific = max_sel["per_class_test_f1"][name]
        delta = specific - convnext if convnext is not None else None
        per_class_summary[name] = {
            "best_method": entry.method,
            "circuit": entry.circuit.label,
            "class_specific_f1": specific,
            "global_circuit_f1": global_test.per_class_f1[name],
            "baseline_f1": baseline_test.per_class_f1[name],
            "convnext_f1": convnext,
            "delta": delta,
        }
        plot_per_class[name] = {
            "baseline": baseline_test.per_class_f1[name],
            "global_circuit": global_test.per_class_f1[name],
            "class_specific": specific,
            "convnext": convnext,
            "delta": delta,
        }

    reporting.write_trials_csv(out_dir / "trials.csv", trial_rows, class_index)
    reporting.write_selections_csv(out_dir / "selections.csv", selections, class_index)
    reporting.write_breakdown_csv(out_dir / "breakdown.csv", breakdowns)
    reporting.write_plot_global(out_dir / "plot_global_macro_f1.csv", "macro_f1", plot_f1, reference)
    reporting.write_plot_global(out_dir / "plot_global_accuracy.csv", "accuracy", plot_acc, reference)
    reporting.write_plot_per_class(out_dir / "plot_per_class.csv", plot_per_class, class_index)
    reporting.write_plot_breakdown(out_dir / "plot_strategy_breakdown.csv", breakdowns)

    summary = {
        "config": cfg.to_dict(),
        "model_fingerprint": fingerprint,
        "budgets": [b.label for b in budgets],
        "global": summary_global,
        "per_class": {
            "budget": max_budget.label,
            "classes": per_class_summary,
            "macro": {
                "class_specific_f1": max_sel["class_specific_test_macro_f1"],
                "global_circuit_f1": global_test.macro_f1,
                "baseline_f1": baseline_test.macro_f1,
                "convnext_f1": reference["global"]["macro_f1"],
                "delta": max_sel["class_specific_test_macro_f1"] - reference["global"]["macro_f1"],
            },
        },
        "breakdown": {
            label: {
                "baseline_best": b.baseline_best,
                "global_best": b.global_best,
                "unique_best": b.unique_best,
            }
            for label, b in breakdowns.items()
        },
        "reference": reference,
    }
    reporting.write_summary_json(out_dir / "summary.json", summary)
    return summary


def _common_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--dataset-root", dest="dataset_root")
    parser.add_argument("--manifest")
    parser.add_argument("--model", dest="model_path")
    parser.add_argument("--circuits", help='"all", "standard", or "0-1,2-5"')
    parser.add_argument("--pca-dim", dest="pca_dim", type=int)
    parser.add_argument("--inductive-pca", dest="inductive_pca", action="store_const", const=True)
    parser.add_argument("--methods", help="comma-separated method names")
    parser.add_argument("--budgets", help='comma-separated labels, e.g. "5cls,10pct"')
    parser.add_argument("--repeats", help="comma-separated repeat seeds")
    parser.add_argument("--val-fraction", dest="val_fraction", type=float)
    parser.add_argument("--split-seed", dest="split_seed", type=int)
    parser.add_argument("--output", dest="output_dir")
    parser.add_argument("--cache-dir", dest="cache_dir")
    parser.add_argument("--workers", type=int)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "dataset_root": args.dataset_root,
        "manifest": args.manifest,
        "model_path": args.model_path,
        "circuits": args.circuits,
        "pca_dim": args.pca_dim,
        "inductive_pca": args.inductive_pca,
        "methods": args.methods.split(",") if args.methods else None,
        "budgets": args.budgets.split(",") if args.budgets else None,
        "repeat_seeds": [int(s) for s in args.repeats.split(",")] if args.repeats else None,
        "val_fraction": args.val_fraction,
        "split_seed": args.split_seed,
        "output_dir": args.output_dir,
        "cache_dir": args.cache_dir,
        "workers": args.workers,
    }
    return RunConfig.load(args.config, overrides)


def cmd_scan(args: argparse.Namespace) -> int:
    manifest, class_index = scan_directory(args.root)
    write_manifest_csv(manifest, args.output)
    print(f"scanned {len(manifest.records)} records, "
          f"{class_index.num_classes} classes -> {args.output}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    manifest, class_index = make_synthetic_dataset(
        args.root, args.classes, args.train, args.test, args.side, args.seed
    )
    print(f"wrote {len(manifest.records)} images in {class_index.num_classes} "
          f"classes under {args.root}")
    return EXIT_OK


def cmd_embed(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    manifest, class_index, root = _load_dataset(cfg)
    weights, model_config, fingerprint = _load_model(cfg)
    prep = _preprocess_spec(cfg, model_config)
    circuits = parse_circuit_arg(cfg.circuits, model_config.num_layers)
    cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else Path(cfg.output_dir) / "cache"
    for circuit in circuits:
        before = FORWARD_COUNTER.count
        store = compute_embeddings(
            manifest.records, root, weights, model_config, circuit, prep,
            fingerprint, cache_dir=cache_dir, workers=cfg.workers,
        )
        executed = FORWARD_COUNTER.count - before
        print(f"{circuit.label}: {store.matrix.shape[0]} embeddings "
              f"({executed} forward passes, {len(store.failed_ids)} failed)")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    summary = run_experiment(cfg)
    out_dir = Path(cfg.output_dir)
    print(f"artifacts written to {out_dir}")
    for label, entry in summary["global"].items():
        print(f"  {label}: baseline {entry['standard_baseline']['macro_f1']:.4f}  "
              f"global {entry['global_circuit']['macro_f1']:.4f} "
              f"({entry['global_circuit']['circuit']})  "
              f"class-specific {entry['class_specific']['macro_f1']:.4f}")
    return EXIT_OK


def cmd_verify_weights(args: argparse.Namespace) -> int:
    if args.model_config:
        config = ModelConfig.from_dict(json.loads(Path(args.model_config).read_text()))
    else:
        config = read_model_config(args.model)
        if config is None:
            raise InvalidConfigError(
                "container has no embedded model.config; pass --model-config"
            )
    weights = load_weights(args.model, config)
    bundle = read_reference_bundle(args.bundle)
    report = verify_reference(weights, config, bundle)
    if report.warning:
        print(f"warning: {report.warning}")
    for case in report.cases:
        status = "PASS" if case.passed else "FAIL"
        print(f"{case.circuit.label}: max abs deviation {case.max_abs_deviation:.3e} "
              f"(tolerance {report.tolerance:.1e}) {status}")
    if not report.passed:
        print("parity verification FAILED")
        return EXIT_PARITY
    print("parity verification passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuitvit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_scan = sub.add_parser("scan", help="index a dataset tree into a manifest CSV")
    p_scan.add_argument("root")
    p_scan.add_argument("--output", default="manifest.csv")
    p_scan.set_defaults(func=cmd_scan)

    p_synth = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p_synth.add_argument("--root", required=True)
    p_synth.add_argument("--classes", type=int, default=4)
    p_synth.add_argument("--train", type=int, default=12)
    p_synth.add_argument("--test", type=int, default=6)
    p_synth.add_argument("--side", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_embed = sub.add_parser("embed", help="populate embedding caches for all circuits")
    _common_run_flags(p_embed)
    p_embed.set_defaults(func=cmd_embed)

    p_run = sub.add_parser("run", help="full experiment: trials, selection, reports")
    _common_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify-weights", help="check a model against a reference bundle")
    p_verify.add_argument("--model", required=True)
    p_verify.add_argument("--bundle", required=True)
    p_verify.add_argument("--model-config", dest="model_config")
    p_verify.set_defaults(func=cmd_verify_weights)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CircuitVitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
