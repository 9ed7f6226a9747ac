"""Random-forest position regression over raw ToA vectors, and the KNN learner.

Trees are multi-output: each split minimizes the summed squared deviation of both
coordinates in the two children, and each leaf predicts the mean (x, y) of the rows
routed to it. Candidate thresholds are midpoints between consecutive distinct
feature values; a row goes left when ``x[feature] <= threshold``.
"""

import concurrent.futures
import dataclasses
import json
import logging
import math

import numpy as np
from scipy.spatial.distance import cdist

from . import seeding
from .errors import InvalidInputError, ModelFormatError, StageInputError, StageOutputError

logger = logging.getLogger(__name__)

FORMAT = "rfmodel-v1"

CV_TREES = (25, 50, 100)
CV_DEPTHS = (8, 12, 16)
CV_FOLDS = 5


@dataclasses.dataclass(frozen=True)
class Leaf:
    mean_position: tuple[float, float]


@dataclasses.dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float  # s
    left: "TreeNode"
    right: "TreeNode"


type TreeNode = Leaf | Split


@dataclasses.dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf_size: int = 2
    features_per_split: int = 0  # 0 selects ceil(N / 3)
    bootstrap: bool = True
    bootstrap_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidInputError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth < 0:
            raise InvalidInputError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_leaf_size < 1:
            raise InvalidInputError(f"min_leaf_size must be >= 1, got {self.min_leaf_size}")
        if self.features_per_split < 0:
            raise InvalidInputError(f"features_per_split must be >= 0, got {self.features_per_split}")

    def resolved_features(self, n_features):
        if self.features_per_split == 0:
            return math.ceil(n_features / 3)
        return min(self.features_per_split, n_features)


@dataclasses.dataclass(frozen=True)
class RandomForestModel:
    trees: tuple[TreeNode, ...]
    params: ForestParams
    n_features: int


@dataclasses.dataclass(frozen=True)
class KnnModel:
    train_features: np.ndarray
    train_positions: np.ndarray
    k_neighbors: int = 3

    def __post_init__(self):
        if not 1 <= self.k_neighbors <= len(self.train_features):
            raise InvalidInputError(f"k_neighbors={self.k_neighbors} needs 1..{len(self.train_features)}")


def _best_split(X, Y, features, min_leaf):
    """(sse, feature, threshold) of the best split, or None. Ties keep the lower
    feature index, then the lower threshold."""
    m = len(X)
    Yc = Y - Y.mean(axis=0)
    best = None
    positions = np.arange(min_leaf - 1, m - min_leaf)
    if len(positions) == 0:
        return None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = Yc[order]
        csum = np.cumsum(ys, axis=0)
        csq = np.cumsum(ys * ys, axis=0)
        i = positions[xs[positions] < xs[positions + 1]]
        if len(i) == 0:
            continue
        n_left = (i + 1)[:, None]
        n_right = m - n_left
        sse_left = np.sum(csq[i] - csum[i] ** 2 / n_left, axis=1)
        sse_right = np.sum((csq[-1] - csq[i]) - (csum[-1] - csum[i]) ** 2 / n_right, axis=1)
        sse = sse_left + sse_right
        j = int(np.argmin(sse))
        if best is None or sse[j] < best[0]:
            lo, hi = xs[i[j]], xs[i[j] + 1]
            threshold = (lo + hi) / 2.0
            if not lo <= threshold < hi:
                threshold = lo
            best = (float(sse[j]), int(f), float(threshold))
    return best


def fit_tree(features, targets, params, rng, depth=0):
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if len(X) == 0:
        raise InvalidInputError("Cannot fit a tree on an empty sample")

    leaf = Leaf((float(Y[:, 0].mean()), float(Y[:, 1].mean())))
    if depth >= params.max_depth or len(X) < 2 * params.min_leaf_size or np.all(Y == Y[0]):
        return leaf

    n_features = X.shape[1]
    k = params.resolved_features(n_features)
    features = range(n_features) if k >= n_features else np.sort(rng.choice(n_features, k, replace=False))
    best = _best_split(X, Y, features, params.min_leaf_size)
    if best is None:
        return leaf

    _, f, threshold = best
    go_left = X[:, f] <= threshold
    return Split(
        f,
        threshold,
        fit_tree(X[go_left], Y[go_left], params, rng, depth + 1),
        fit_tree(X[~go_left], Y[~go_left], params, rng, depth + 1),
    )


def predict_tree(node, x):
    while isinstance(node, Split):
        node = node.left if x[node.feature_index] <= node.threshold else node.right
    return node.mean_position


def bootstrap_rows(n_rows, bootstrap, rng):
    """Row indices a tree trains on: n_rows draws with replacement, or every row once."""
    if not bootstrap:
        return np.arange(n_rows)
    return rng.integers(0, n_rows, n_rows)


def fit_forest(features, targets, params, seed, workers=1):
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if len(X) == 0:
        raise InvalidInputError("Cannot fit a forest on an empty training set")

    def fit_one(tree_index):
        rng = seeding.stream(seed, tree_index)
        rows = bootstrap_rows(len(X), params.bootstrap, rng)
        return fit_tree(X[rows], Y[rows], params, rng)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        trees = tuple(pool.map(fit_one, range(params.n_trees)))
    return RandomForestModel(trees, dataclasses.replace(params, bootstrap_seed=seed), X.shape[1])


def train_rf(dataset, params, seed, workers=1):
    model = fit_forest(dataset.toa_matrix, dataset.positions, params, seed, workers)
    logger.info(
        "rf: Fitted %d trees on %d rows (depth <= %d, min leaf %d, %d features/split, bootstrap %s)",
        params.n_trees,
        len(dataset),
        params.max_depth,
        params.min_leaf_size,
        params.resolved_features(model.n_features),
        "on" if params.bootstrap else "off",
    )
    return model


def predict_rf(model, tau):
    """Forest mean and the (k, 2) per-tree predictions."""
    tau = np.asarray(tau, dtype=np.float64)
    if len(tau) != model.n_features or not np.all(np.isfinite(tau)):
        raise InvalidInputError(f"Expected {model.n_features} finite ToAs, got {tau}")
    per_tree = np.array([predict_tree(tree, tau) for tree in model.trees])
    return per_tree.mean(axis=0), per_tree


def fit_knn(dataset, k_neighbors=3):
    return KnnModel(dataset.toa_matrix, dataset.positions, k_neighbors)


def predict_knn(model, tau):
    """Mean position of the nearest training rows; ties keep the lower row index."""
    distances = cdist(np.atleast_2d(np.asarray(tau, dtype=np.float64)), model.train_features)[0]
    nearest = np.argsort(distances, kind="stable")[: model.k_neighbors]
    return model.train_positions[nearest].mean(axis=0)


def cross_validate(features, targets, base, seed, workers=1):
    """Pick n_trees x max_depth from the CV grid by mean held-out position error."""
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    folds = np.array_split(seeding.get_rng(seed).permutation(len(X)), CV_FOLDS)

    best_params, best_error = None, math.inf
    for n_trees in CV_TREES:
        for depth in CV_DEPTHS:
            params = dataclasses.replace(base, n_trees=n_trees, max_depth=depth)
            errors = []
            for k, held_out in enumerate(folds):
                train_rows = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != k]))
                model = fit_forest(X[train_rows], Y[train_rows], params, seeding.derive_seed(seed, f"fold-{k}"), workers)
                predicted = np.array([predict_rf(model, x)[0] for x in X[held_out]])
                errors.append(np.linalg.norm(predicted - Y[held_out], axis=1))
            error = float(np.mean(np.concatenate(errors)))
            logger.info("rf: CV %d trees, depth %d: mean error %.3f m", n_trees, depth, error)
            if error < best_error:
                best_params, best_error = params, error

    logger.info("rf: CV selected %d trees, depth %d", best_params.n_trees, best_params.max_depth)
    return best_params


def _encode(node, out):
    match node:
        case Split(feature_index=f, threshold=t, left=left, right=right):
            out.append(["split", f, t])
            _encode(left, out)
            _encode(right, out)
        case Leaf(mean_position=(x, y)):
            out.append(["leaf", x, y])


def _decode(nodes):
    kind, a, b = next(nodes)
    match kind:
        case "split":
            left = _decode(nodes)
            right = _decode(nodes)
            return Split(int(a), float(b), left, right)
        case "leaf":
            return Leaf((float(a), float(b)))
        case _:
            raise ModelFormatError(f"Unknown node kind: {kind}")


def save_forest(model, path):
    trees = []
    for tree in model.trees:
        nodes = []
        _encode(tree, nodes)
        trees.append(nodes)
    doc = {
        "format": FORMAT,
        "params": dataclasses.asdict(model.params),
        "n_features": model.n_features,
        "trees": trees,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc) + "\n")
    except OSError as e:
        raise StageOutputError(f"Cannot write forest {path}: {e}") from e
    logger.info("rf: Wrote %d trees to %s", len(trees), path)


def load_forest(path):
    if not path.exists():
        raise StageInputError(f"Forest file {path} not found; run `train` first")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not a {FORMAT} file: {e}") from e
    if doc.get("format") != FORMAT:
        raise ModelFormatError(f"{path}: expected format {FORMAT}, found {doc.get('format')!r}")
    trees = []
    try:
        for i, nodes in enumerate(doc["trees"]):
            try:
                trees.append(_decode(iter(nodes)))
            except StopIteration:
                raise ModelFormatError(f"{path}: truncated listing for tree {i}") from None
        return RandomForestModel(tuple(trees), ForestParams(**doc["params"]), int(doc["n_features"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"{path}: malformed {FORMAT} file: {e!r}") from e
