"""Three-pool evaluation, label budgets, metrics, and circuit selection.

The training split is carved into a validation pool (circuit selection
only) and a seed pool (labeled draws only); the official test split is
held out for final scores. Classifiers see the seed-pool rows plus the
target-pool rows of one circuit's reduced space; validation and test
samples are never used as labeled data.

Selection is a pure argmax over validation scores with deterministic
tie-breaks (standard circuit first, then smaller span, then smaller
entry layer, then method name), so selected scores dominate every
candidate's by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import CircuitSpec
from .errors import EvaluationError, InvalidConfigError, SplitError
from .ingest import ClassIndex, DatasetManifest
from .semisup import (
    KmeansParams,
    SelfTrainParams,
    SpreadParams,
    SvmParams,
    knn_baseline,
    label_spreading,
    seeded_kmeans,
    self_train_knn,
    self_train_svm,
)

TARGETS = ("val", "test")


@dataclass(frozen=True)
class Budget:
    """Label budget: a per-class seed count or a fraction of each class's seed pool."""

    kind: str  # "per_class" | "fraction"
    amount: float

    def __post_init__(self) -> None:
        if self.kind == "per_class":
            if self.amount < 1 or self.amount != int(self.amount):
                raise InvalidConfigError(f"per-class budget must be a count >= 1, got {self.amount}")
        elif self.kind == "fraction":
            if not 0.0 < self.amount <= 1.0:
                raise InvalidConfigError(f"fraction budget must be in (0, 1], got {self.amount}")
        else:
            raise InvalidConfigError(f"unknown budget kind {self.kind!r}")

    @classmethod
    def per_class(cls, n: int) -> "Budget":
        return cls(kind="per_class", amount=float(n))

    @classmethod
    def fraction(cls, f: float) -> "Budget":
        return cls(kind="fraction", amount=float(f))

    @property
    def label(self) -> str:
        if self.kind == "per_class":
            return f"{int(self.amount)}cls"
        percent = self.amount * 100.0
        if percent == int(percent):
            return f"{int(percent)}pct"
        return f"{percent:g}pct"

    @classmethod
    def parse(cls, label: str) -> "Budget":
        if label.endswith("cls"):
            return cls.per_class(int(label[:-3]))
        if label.endswith("pct"):
            return cls.fraction(float(label[:-3]) / 100.0)
        raise InvalidConfigError(f"unparseable budget label {label!r}")


@dataclass(frozen=True)
class SplitPlan:
    val_ids: tuple[int, ...]
    seedpool_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


@dataclass(frozen=True)
class MethodParams:
    spread: SpreadParams = SpreadParams()
    self_train: SelfTrainParams = SelfTrainParams()
    svm: SvmParams = SvmParams()
    kmeans: KmeansParams = KmeansParams()
    knn_k: int = 5


@dataclass
class MetricReport:
    accuracy: float
    macro_f1: float
    per_class_f1: dict[str, float]
    support: dict[str, int]


@dataclass(frozen=True)
class SelectionEntry:
    circuit: CircuitSpec
    method: str
    score: float


@dataclass
class SelectionOutcome:
    global_best: SelectionEntry
    per_class: dict[str, SelectionEntry]


@dataclass
class StrategyBreakdown:
    baseline_best: int
    global_best: int
    unique_best: int


@dataclass
class CircuitFeatures:
    """Reduced feature rows for one circuit, aligned to manifest ids."""

    circuit: CircuitSpec
    ids: np.ndarray  # (N,) manifest ids
    x: np.ndarray  # (N, out_dim)

    def rows_for(self, ids: list[int]) -> np.ndarray:
        row_of = {int(i): r for r, i in enumerate(self.ids)}
        try:
            idx = [row_of[int(i)] for i in ids]
        except KeyError as e:
            raise EvaluationError(f"no features for manifest id {e.args[0]}") from e
        return self.x[idx]


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def carve_pools(
    manifest: DatasetManifest,
    class_index: ClassIndex,
    val_fraction: float = 0.4,
    seed: int = 0,
) -> SplitPlan:
    """Stratified validation/seed-pool split of the training records.

    Per class, round-half-up(val_fraction * count) samples go to the
    validation pool, clamped to [1, count - 1]; the remainder stays in
    the seed pool. Deterministic for a fixed seed.
    """
    if not 0.0 < val_fraction < 1.0:
        raise SplitError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {name: [] for name in class_index.names}
    for record in manifest.split_records("train"):
        by_class[record.class_name].append(record.id)
    val_ids: list[int] = []
    pool_ids: list[int] = []
    for name in class_index.names:
        ids = sorted(by_class[name])
        if len(ids) < 2:
            raise SplitError(f"class {name!r} has {len(ids)} train samples; need >= 2")
        n_val = min(max(_round_half_up(val_fraction * len(ids)), 1), len(ids) - 1)
        perm = rng.permutation(len(ids))
        chosen = [ids[p] for p in perm[:n_val]]
        val_ids.extend(chosen)
        pool_ids.extend(sorted(set(ids) - set(chosen)))
    test_ids = [r.id for r in manifest.split_records("test")]
    return SplitPlan(
        val_ids=tuple(sorted(val_ids)),
        seedpool_ids=tuple(sorted(pool_ids)),
        test_ids=tuple(sorted(test_ids)),
    )


def draw_seeds(
    plan: SplitPlan,
    labels_by_id: dict[int, int],
    class_index: ClassIndex,
    budget: Budget,
    seed: int,
) -> dict[int, int]:
    """Draw labeled seeds from the seed pool under a budget, stratified per class.

    Absolute budgets clip to the available pool; fractional budgets take
    ceil(f * pool size) with a minimum of one seed per class, so a 100%
    fraction is the entire pool.
    """
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {c: [] for c in range(class_index.num_classes)}
    for i in plan.seedpool_ids:
        by_class[labels_by_id[i]].append(i)
    seeds: dict[int, int] = {}
    for c in range(class_index.num_classes):
        ids = sorted(by_class[c])
        if not ids:
            continue
        if budget.kind == "per_class":
            take = min(int(budget.amount), len(ids))
        else:
            take = min(int(np.ceil(budget.amount * len(ids))), len(ids))
            take = max(take, 1)
        chosen = rng.permutation(len(ids))[:take]
        for p in chosen:
            seeds[ids[p]] = c
    return seeds


def compute_metrics(
    predictions: dict[int, int], truth: dict[int, int], class_index: ClassIndex
) -> MetricReport:
    """Accuracy and per-class/macro F1 with the zero-division-to-0 convention."""
    if not truth:
        raise EvaluationError("empty truth set")
    missing = sorted(set(truth) - set(predictions))
    if missing:
        raise EvaluationError(f"missing predictions for ids {missing[:10]}")
    num_classes = class_index.num_classes
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    support = np.zeros(num_classes, dtype=np.int64)
    correct = 0
    for i, t in truth.items():
        p = predictions[i]
        support[t] += 1
        if p == t:
            tp[t] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[t] += 1
    per_class: dict[str, float] = {}
    for c, name in enumerate(class_index.names):
        denom = 2 * tp[c] + fp[c] + fn[c]
        per_class[name] = (2.0 * tp[c] / denom) if denom > 0 else 0.0
    macro = float(np.mean([per_class[name] for name in class_index.names]))
    return MetricReport(
        accuracy=correct / len(truth),
        macro_f1=macro,
        per_class_f1=per_class,
        support={name: int(support[c]) for c, name in enumerate(class_index.names)},
    )


def run_classifier(
    method: str,
    x: np.ndarray,
    seeds: dict[int, int],
    num_classes: int,
    params: MethodParams,
):
    if method == "label_spreading":
        return label_spreading(x, seeds, num_classes, params.spread)
    if method == "self_train_knn":
        return self_train_knn(x, seeds, params.knn_k, params.self_train)
    if method == "self_train_svm":
        return self_train_svm(x, seeds, params.svm, params.self_train, num_classes)
    if method == "seeded_kmeans":
        return seeded_kmeans(x, seeds, num_classes, params.kmeans)
    if method == "knn_baseline":
        return knn_baseline(x, seeds, params.knn_k)
    raise InvalidConfigError(f"unknown method {method!r}")


def run_trial(
    features: CircuitFeatures,
    labels_by_id: dict[int, int],
    class_index: ClassIndex,
    plan: SplitPlan,
    method: str,
    budget: Budget,
    repeat_seed: int,
    target: str,
    params: MethodParams | None = None,
) -> MetricReport:
    """One (circuit, method, budget, repeat) evaluation against one target pool.

    The classifier's feature matrix holds the seed-pool rows followed by
    the target-pool rows; only seed labels are revealed.
    """
    if target not in TARGETS:
        raise InvalidConfigError(f"target must be one of {TARGETS}, got {target!r}")
    params = params or MethodParams()
    target_ids = list(plan.val_ids if target == "val" else plan.test_ids)
    pool_ids = list(plan.seedpool_ids)
    pool_set = set(pool_ids)
    ordered = pool_ids + [i for i in target_ids if i not in pool_set]
    x = features.rows_for(ordered)
    row_of = {i: r for r, i in enumerate(ordered)}

    seed_map = draw_seeds(plan, labels_by_id, class_index, budget, repeat_seed)
    row_seeds = {row_of[i]: c for i, c in seed_map.items()}
    predictions = run_classifier(method, x, row_seeds, class_index.num_classes, params)
    pred_by_id = {i: predictions.labels[row_of[i]] for i in target_ids}
    truth = {i: labels_by_id[i] for i in target_ids}
    return compute_metrics(pred_by_id, truth, class_index)


def average_reports(reports: list[MetricReport], class_index: ClassIndex) -> MetricReport:
    """Mean over repeats; macro F1 recomputed from the averaged per-class values."""
    if not reports:
        raise EvaluationError("cannot average zero reports")
    per_class = {
        name: float(np.mean([r.per_class_f1[name] for r in reports]))
        for name in class_index.names
    }
    return MetricReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        macro_f1=float(np.mean([per_class[name] for name in class_index.names])),
        per_class_f1=per_class,
        support=dict(reports[0].support),
    )


def evaluate_trial(
    features: CircuitFeatures,
    labels_by_id: dict[int, int],
    class_index: ClassIndex,
    plan: SplitPlan,
    method: str,
    budget: Budget,
    repeat_seeds: list[int],
    target: str,
    params: MethodParams | None = None,
) -> tuple[MetricReport, list[MetricReport]]:
    """Repeat-averaged report plus the individual per-repeat reports."""
    singles = [
        run_trial(features, labels_by_id, class_index, plan, method, budget, s, target, params)
        for s in repeat_seeds
    ]
    return average_reports(singles, class_index), singles


def _candidate_key(circuit: CircuitSpec, method: str) -> tuple:
    return (*circuit.sort_key(), method)


def select_global(
    val_reports: dict[tuple[CircuitSpec, str], MetricReport]
) -> SelectionEntry:
    """Argmax of validation macro F1 over all (circuit, method) candidates."""
    if not val_reports:
        raise EvaluationError("no candidates to select from")
    best = min(
        val_reports.items(),
        key=lambda item: (-item[1].macro_f1, *_candidate_key(*item[0])),
    )
    (circuit, method), report = best
    return SelectionEntry(circuit=circuit, method=method, score=report.macro_f1)


def select_per_class(
    val_reports: dict[tuple[CircuitSpec, str], MetricReport],
    class_index: ClassIndex,
) -> dict[str, SelectionEntry]:
    """Per class, argmax of validation per-class F1 over all candidates."""
    if not val_reports:
        raise EvaluationError("no candidates to select from")
    out: dict[str, SelectionEntry] = {}
    for name in class_index.names:
        best = min(
            val_reports.items(),
            key=lambda item: (-item[1].per_class_f1[name], *_candidate_key(*item[0])),
        )
        (circuit, method), report = best
        out[name] = SelectionEntry(circuit=circuit, method=method, score=report.per_class_f1[name])
    return out


def assemble_class_specific_report(
    test_reports: dict[tuple[CircuitSpec, str], MetricReport],
    per_class_selection: dict[str, SelectionEntry],
    class_index: ClassIndex,
) -> tuple[dict[str, float], float]:
    """Per-class test F1 under each class's own winner, plus their unweighted mean.

    This mirrors per-class reporting over heterogeneous configurations;
    it does not correspond to a single deployable classifier.
    """
    table: dict[str, float] = {}
    for name in class_index.names:
        entry = per_class_selection[name]
        key = (entry.circuit, entry.method)
        if key not in test_reports:
            raise EvaluationError(
                f"no test report for selected configuration {entry.circuit.label}/{entry.method}"
            )
        table[name] = test_reports[key].per_class_f1[name]
    macro = float(np.mean([table[name] for name in class_index.names]))
    return table, macro


def strategy_breakdown(
    per_class_selection: dict[str, SelectionEntry],
    global_selection: SelectionEntry,
) -> StrategyBreakdown:
    """Count classes whose winner is the standard pass, the global circuit, or unique.

    Precedence is baseline > global > unique, so when the global winner
    is itself the standard pass, its classes count as baseline.
    """
    baseline = global_best = unique = 0
    for entry in per_class_selection.values():
        if entry.circuit.is_standard:
            baseline += 1
        elif entry.circuit == global_selection.circuit:
            global_best += 1
        else:
            unique += 1
    return StrategyBreakdown(baseline_best=baseline, global_best=global_best, unique_best=unique)
