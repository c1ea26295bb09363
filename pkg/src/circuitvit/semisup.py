"""Deterministic semi-supervised classifiers over reduced embeddings.

Five methods share one calling convention: a feature matrix X (rows are
samples, row index is the sample id), a seed map {id: class id}, and the
number of classes. Each returns a PredictionSet labeling every row, with
seed rows clamped to their seed labels. All tie-breaks resolve to the
lowest class id after the method's primary rule, so identical inputs
give identical outputs on any platform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.spatial.distance import cdist

from .errors import InvalidConfigError, InvalidSeedError

logger = logging.getLogger(__name__)

METHOD_NAMES = (
    "label_spreading",
    "self_train_knn",
    "self_train_svm",
    "seeded_kmeans",
    "knn_baseline",
)


@dataclass(frozen=True)
class SpreadParams:
    alpha: float = 0.2
    k_neighbors: int = 7
    rbf_gamma: float | None = None  # None -> 1 / (2 * median nonzero squared edge distance)
    max_iter: int = 1000
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.k_neighbors < 1:
            raise InvalidConfigError("k_neighbors must be >= 1")


@dataclass(frozen=True)
class SelfTrainParams:
    confidence_threshold: float = 0.8
    max_rounds: int = 10

    def __post_init__(self) -> None:
        if not 0.5 < self.confidence_threshold <= 1.0:
            raise InvalidConfigError(
                f"confidence_threshold must be in (0.5, 1], got {self.confidence_threshold}"
            )
        if self.max_rounds < 1:
            raise InvalidConfigError("max_rounds must be >= 1")


@dataclass(frozen=True)
class SvmParams:
    C: float = 1.0
    epochs: int = 50
    learning_rate: float = 0.1  # initial step; decays as 1/(1+t)

    def __post_init__(self) -> None:
        if self.C <= 0:
            raise InvalidConfigError(f"C must be > 0, got {self.C}")
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")


@dataclass(frozen=True)
class KmeansParams:
    tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise InvalidConfigError("max_iter must be >= 1")


@dataclass
class PredictionSet:
    """Labels and confidences for every requested sample id."""

    labels: dict[int, int]
    confidence: dict[int, float]
    num_promoted: int | None = None  # self-training only
    objective_history: list[float] | None = None  # seeded k-means only


@dataclass
class AffinityGraph:
    weights: sparse.csr_matrix  # symmetric, nonnegative, zero diagonal
    propagation: sparse.csr_matrix  # D^{-1/2} W D^{-1/2}


def _check_seeds(x: np.ndarray, seeds: dict[int, int], num_classes: int) -> None:
    if not seeds:
        raise InvalidSeedError("seed set is empty")
    n = x.shape[0]
    for i, c in seeds.items():
        if not 0 <= i < n:
            raise InvalidSeedError(f"seed id {i} outside feature matrix of {n} rows")
        if not 0 <= c < num_classes:
            raise InvalidSeedError(f"seed class {c} outside [0, {num_classes})")


def _seed_majority(seeds: dict[int, int], num_classes: int) -> int:
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in seeds.values():
        counts[c] += 1
    return int(np.argmax(counts))  # argmax takes the lowest class id on ties


def build_graph(x: np.ndarray, params: SpreadParams | None = None) -> AffinityGraph:
    """Symmetric k-NN graph with RBF edge weights exp(-gamma * dist^2).

    Neighbor lists are symmetrized by union. Duplicate points are fine:
    a zero distance simply yields edge weight 1.
    """
    params = params or SpreadParams()
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise InvalidConfigError("need at least 2 samples to build a graph")
    k = min(params.k_neighbors, n - 1)
    dist = cdist(x, x)
    rows, cols = [], []
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        picked = [j for j in order if j != i][:k]
        rows.extend([i] * len(picked))
        cols.extend(picked)
    d2 = dist[rows, cols] ** 2
    if params.rbf_gamma is not None:
        gamma = params.rbf_gamma
    else:
        nonzero = d2[d2 > 0]
        gamma = 1.0 / (2.0 * np.median(nonzero)) if nonzero.size else 1.0
    vals = np.exp(-gamma * d2)
    w = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    w = w.maximum(w.T)  # union symmetrization; weights agree where both exist
    w.setdiag(0.0)
    w.eliminate_zeros()
    deg = np.asarray(w.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    dhalf = sparse.diags(dinv)
    s = (dhalf @ w @ dhalf).tocsr()
    return AffinityGraph(weights=w, propagation=s)


def spread_iterate(
    graph: AffinityGraph, y: np.ndarray, alpha: float, max_iter: int, tol: float
) -> np.ndarray:
    """Iterate F <- alpha*S*F + (1-alpha)*Y from F0 = Y to convergence."""
    f = y.copy()
    for _ in range(max_iter):
        f_next = alpha * (graph.propagation @ f) + (1.0 - alpha) * y
        delta = np.max(np.abs(f_next - f))
        f = f_next
        if delta <= tol:
            break
    return f


def label_spreading(
    x: np.ndarray,
    seeds: dict[int, int],
    num_classes: int,
    params: SpreadParams | None = None,
) -> PredictionSet:
    """Diffuse seed labels over the affinity graph.

    Rows that receive no mass (isolated nodes, or components without any
    seed) fall back to the global seed-majority label with confidence 0.
    """
    params = params or SpreadParams()
    x = np.asarray(x, dtype=np.float64)
    _check_seeds(x, seeds, num_classes)
    n = x.shape[0]
    graph = build_graph(x, params)
    y = np.zeros((n, num_classes), dtype=np.float64)
    for i, c in seeds.items():
        y[i, c] = 1.0
    f = spread_iterate(graph, y, params.alpha, params.max_iter, params.tol)

    majority = _seed_majority(seeds, num_classes)
    labels, confidence = {}, {}
    row_sums = f.sum(axis=1)
    for i in range(n):
        if row_sums[i] <= 0.0:
            labels[i] = majority
            confidence[i] = 0.0
        else:
            labels[i] = int(np.argmax(f[i]))
            confidence[i] = float(f[i].max() / row_sums[i])
    for i, c in seeds.items():
        labels[i] = c
    return PredictionSet(labels=labels, confidence=confidence)


def _knn_predict(
    x: np.ndarray, seed_ids: np.ndarray, seed_labels: np.ndarray, query_ids: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote among the k nearest seeds for each query row.

    Vote ties go to the closest seed whose class is among the tied
    leaders; equidistant seeds order by seed id. Returns (labels, vote
    fractions).
    """
    if k > seed_ids.size:
        logger.warning("k=%d exceeds %d seeds; clipping", k, seed_ids.size)
        k = seed_ids.size
    dist = cdist(x[query_ids], x[seed_ids])
    labels = np.empty(query_ids.size, dtype=np.int64)
    conf = np.empty(query_ids.size, dtype=np.float64)
    for qi in range(query_ids.size):
        order = np.lexsort((seed_ids, dist[qi]))
        top = order[:k]
        votes = seed_labels[top]
        classes, counts = np.unique(votes, return_counts=True)
        best = counts.max()
        tied = set(classes[counts == best].tolist())
        if len(tied) == 1:
            label = int(next(iter(tied)))
        else:
            label = int(next(int(seed_labels[j]) for j in top if int(seed_labels[j]) in tied))
        labels[qi] = label
        conf[qi] = best / k
    return labels, conf


def knn_baseline(x: np.ndarray, seeds: dict[int, int], k: int = 5) -> PredictionSet:
    """Nearest-neighbor classification from the labeled seeds alone."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    num_classes = max(seeds.values()) + 1 if seeds else 0
    _check_seeds(x, seeds, max(num_classes, 1))
    seed_ids = np.array(sorted(seeds), dtype=np.int64)
    seed_labels = np.array([seeds[i] for i in seed_ids], dtype=np.int64)
    query_ids = np.arange(x.shape[0], dtype=np.int64)
    labels, conf = _knn_predict(x, seed_ids, seed_labels, query_ids, k)
    out_labels = {int(i): int(l) for i, l in zip(query_ids, labels)}
    out_conf = {int(i): float(c) for i, c in zip(query_ids, conf)}
    for i, c in seeds.items():
        out_labels[i] = c
    return PredictionSet(labels=out_labels, confidence=out_conf)


def _self_train(
    x: np.ndarray,
    seeds: dict[int, int],
    predict_fn,
    st: SelfTrainParams,
) -> PredictionSet:
    """Shared pseudo-labeling loop.

    predict_fn(labeled) must return (labels, confidence) arrays over all
    rows given the current labeled map. Every prediction at or above the
    confidence threshold is promoted each round; remaining unlabeled rows
    take the final round's predictions regardless of confidence.
    """
    n = x.shape[0]
    labeled = dict(seeds)
    labeled_conf = {i: 1.0 for i in seeds}
    last_labels = last_conf = None
    promoted_total = 0
    for _ in range(st.max_rounds):
        unlabeled = [i for i in range(n) if i not in labeled]
        if not unlabeled:
            break
        last_labels, last_conf = predict_fn(labeled)
        promoted = {
            i: int(last_labels[i]) for i in unlabeled if last_conf[i] >= st.confidence_threshold
        }
        promoted_total += len(promoted)
        if not promoted:
            break
        labeled.update(promoted)
        labeled_conf.update({i: float(last_conf[i]) for i in promoted})

    remaining = [i for i in range(n) if i not in labeled]
    if remaining and last_labels is None:
        last_labels, last_conf = predict_fn(labeled)
    labels, confidence = {}, {}
    for i in range(n):
        if i in labeled:
            labels[i] = labeled[i]
            confidence[i] = labeled_conf[i]
        else:
            labels[i] = int(last_labels[i])
            confidence[i] = float(last_conf[i])
    return PredictionSet(labels=labels, confidence=confidence, num_promoted=promoted_total)


def self_train_knn(
    x: np.ndarray,
    seeds: dict[int, int],
    k: int = 5,
    st: SelfTrainParams | None = None,
) -> PredictionSet:
    """k-NN with iterative pseudo-labeling; confidence is the vote fraction."""
    st = st or SelfTrainParams()
    x = np.asarray(x, dtype=np.float64)
    num_classes = max(seeds.values()) + 1 if seeds else 0
    _check_seeds(x, seeds, max(num_classes, 1))

    all_ids = np.arange(x.shape[0], dtype=np.int64)

    def predict(labeled: dict[int, int]) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(sorted(labeled), dtype=np.int64)
        lab = np.array([labeled[i] for i in ids], dtype=np.int64)
        return _knn_predict(x, ids, lab, all_ids, k)

    return _self_train(x, seeds, predict, st)


@dataclass
class SvmModel:
    classes: np.ndarray  # class ids with training data, ascending
    weights: np.ndarray  # (num_trained, D)
    biases: np.ndarray  # (num_trained,)
    num_classes: int


def linear_svm_ovr(
    x: np.ndarray, y: np.ndarray, params: SvmParams | None = None, num_classes: int | None = None
) -> SvmModel:
    """One-vs-rest linear hinge classifiers via full-batch subgradient descent.

    The loss is (1/2)||w||^2 + C * mean(hinge), so duplicating every
    training point leaves the trajectory unchanged. Steps decay as
    lr/(1+t) and the returned model is the average of the iterates;
    with no sampling anywhere, training is exactly reproducible.
    """
    params = params or SvmParams()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise InvalidSeedError("one-vs-rest training needs at least 2 classes")
    if num_classes is None:
        num_classes = int(classes.max()) + 1
    n, d = x.shape
    weights = np.zeros((classes.size, d))
    biases = np.zeros(classes.size)
    for ci, c in enumerate(classes):
        sign = np.where(y == c, 1.0, -1.0)
        w = np.zeros(d)
        b = 0.0
        w_avg = np.zeros(d)
        b_avg = 0.0
        for t in range(params.epochs):
            lr = params.learning_rate / (1.0 + t)
            margins = sign * (x @ w + b)
            viol = margins < 1.0
            grad_w = w - params.C * ((viol * sign) @ x) / n
            grad_b = -params.C * np.sum(viol * sign) / n
            w = w - lr * grad_w
            b = b - lr * grad_b
            w_avg += w
            b_avg += b
        weights[ci] = w_avg / params.epochs
        biases[ci] = b_avg / params.epochs
    return SvmModel(classes=classes, weights=weights, biases=biases, num_classes=num_classes)


def svm_predict(model: SvmModel, x: np.ndarray) -> np.ndarray:
    """Signed margins, (N, num_classes); classes never trained score -inf."""
    x = np.asarray(x, dtype=np.float64)
    scores = np.full((x.shape[0], model.num_classes), -np.inf)
    scores[:, model.classes] = x @ model.weights.T + model.biases
    return scores


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    finite = np.where(np.isfinite(scores), scores, -np.inf)
    shifted = finite - finite.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def self_train_svm(
    x: np.ndarray,
    seeds: dict[int, int],
    params: SvmParams | None = None,
    st: SelfTrainParams | None = None,
    num_classes: int | None = None,
) -> PredictionSet:
    """SVM-based pseudo-labeling; confidence is the softmax over margins."""
    params = params or SvmParams()
    st = st or SelfTrainParams()
    x = np.asarray(x, dtype=np.float64)
    if num_classes is None:
        num_classes = max(seeds.values()) + 1 if seeds else 0
    _check_seeds(x, seeds, max(num_classes, 1))

    def predict(labeled: dict[int, int]) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(sorted(labeled), dtype=np.int64)
        lab = np.array([labeled[i] for i in ids], dtype=np.int64)
        model = linear_svm_ovr(x[ids], lab, params, num_classes)
        scores = svm_predict(model, x)
        probs = _softmax_rows(scores)
        return np.argmax(scores, axis=1), probs.max(axis=1)

    return _self_train(x, seeds, predict, st)


def seeded_kmeans(
    x: np.ndarray,
    seeds: dict[int, int],
    num_classes: int,
    params: KmeansParams | None = None,
) -> PredictionSet:
    """Lloyd iterations from per-class seed-mean centroids.

    The cluster-to-class mapping is fixed by the initialization; an empty
    cluster keeps its previous centroid. The reported labels are the
    assignment against the centroids in effect before the converging
    update, so a huge tolerance yields the nearest-seed-mean assignment.
    """
    params = params or KmeansParams()
    x = np.asarray(x, dtype=np.float64)
    _check_seeds(x, seeds, num_classes)
    missing = [c for c in range(num_classes) if c not in set(seeds.values())]
    if missing:
        raise InvalidSeedError(f"classes without seeds: {missing}")

    centroids = np.zeros((num_classes, x.shape[1]))
    for c in range(num_classes):
        members = [i for i, lab in seeds.items() if lab == c]
        centroids[c] = x[members].mean(axis=0)

    history: list[float] = []
    assign = last_dist = None
    for _ in range(params.max_iter):
        last_dist = cdist(x, centroids)
        assign = np.argmin(last_dist, axis=1)  # ties -> lowest class id
        history.append(float(np.sum(last_dist[np.arange(x.shape[0]), assign] ** 2)))
        new_centroids = centroids.copy()
        for c in range(num_classes):
            members = assign == c
            if members.any():
                new_centroids[c] = x[members].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift <= params.tol:
            break

    labels, confidence = {}, {}
    for i in range(x.shape[0]):
        order = np.sort(last_dist[i])
        d2 = order[1] if order.size > 1 else order[0]
        if d2 == 0.0:
            conf = 1.0
        else:
            conf = 1.0 - order[0] / d2
        labels[i] = int(assign[i])
        confidence[i] = float(max(0.0, min(1.0, conf)))
    for i, c in seeds.items():
        labels[i] = c
    return PredictionSet(
        labels=labels, confidence=confidence, objective_history=history
    )
