"""Per-BS Gaussian-process regression from ToA (s) to distance (m).

Zero mean function, squared-exponential kernel. Hyperparameters maximize the log
marginal likelihood with a deterministic, derivative-free search: a log-spaced grid
of starts scaled to the data, then coordinate-wise golden-section refinement in
log-parameter space. All linear algebra goes through the Cholesky factor of
K + sigma^2 I.
"""

import concurrent.futures
import dataclasses
import json
import logging
import math

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from . import seeding
from .errors import (
    InvalidInputError,
    ModelFormatError,
    NotPositiveDefiniteError,
    StageInputError,
    StageOutputError,
    TrainingFailedError,
)

logger = logging.getLogger(__name__)

FORMAT = "gpmodel-v1"

JITTER_START = 1e-10  # relative to sigma_k^2
JITTER_MAX = 1e-4

SUBSAMPLE_CAP = 1000

# Grid of starts, as multiples of data-derived scales.
SIGNAL_GRID = (0.5, 1.0, 2.0)
LENGTH_GRID = (0.01, 0.1, 1.0, 10.0)
NOISE_GRID = (0.01, 0.1, 0.5)

REFINE_HALF_WIDTH = math.log(10.0)
REFINE_TOLERANCE = 1e-6  # log-likelihood gain per sweep
WINDOW_SHRINK = 4.0
MIN_HALF_WIDTH = 1e-2
MAX_SWEEPS = 40
GOLDEN_RESOLUTION = 1e-3  # log-parameter
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclasses.dataclass(frozen=True)
class GpHyperparams:
    signal_std: float  # sigma_k, m
    length_scale: float  # l, s
    noise_std: float  # sigma, m

    def __post_init__(self):
        for name in ("signal_std", "length_scale", "noise_std"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidInputError(f"GP {name} must be finite and > 0, got {value}")

    @classmethod
    def from_log(cls, theta):
        return cls(*(float(math.exp(t)) for t in theta))

    def to_log(self):
        return np.log([self.signal_std, self.length_scale, self.noise_std])


@dataclasses.dataclass(frozen=True)
class GpModel:
    train_toas: np.ndarray
    train_distances: np.ndarray
    hyperparams: GpHyperparams
    chol_factor: np.ndarray  # lower triangular, L L^T = K + (sigma^2 + jitter) I
    alpha: np.ndarray  # (K + sigma^2 I)^-1 d
    jitter: float
    log_likelihood: float


def se_kernel(tau, tau_prime, h):
    diff = np.asarray(tau, dtype=np.float64) - np.asarray(tau_prime, dtype=np.float64)
    value = h.signal_std**2 * np.exp(-(diff**2) / (2.0 * h.length_scale**2))
    return float(value) if np.ndim(value) == 0 else value


def _cross_kernel(a, b, h):
    sq = cdist(np.reshape(a, (-1, 1)), np.reshape(b, (-1, 1)), "sqeuclidean")
    return h.signal_std**2 * np.exp(-sq / (2.0 * h.length_scale**2))


def kernel_matrix(taus, h):
    taus = np.asarray(taus, dtype=np.float64)
    if taus.size < 1:
        raise InvalidInputError("kernel_matrix needs at least one input")
    return _cross_kernel(taus, taus, h)


def _factorize(taus, h):
    """Cholesky of K + sigma^2 I, escalating the diagonal jitter on failure."""
    K = kernel_matrix(taus, h)
    K[np.diag_indices_from(K)] += h.noise_std**2
    scale = h.signal_std**2
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            L = scipy.linalg.cholesky(K + jitter * scale * np.eye(len(K)), lower=True)
            if jitter > JITTER_START:
                logger.debug(f"gp: Cholesky needed jitter {jitter:.0e} * sigma_k^2")
            return L, jitter * scale
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefiniteError(f"K + sigma^2 I not positive definite for {h} even with jitter {JITTER_MAX} * sigma_k^2")


def _log_likelihood_from_factor(L, alpha, d):
    return float(-0.5 * d @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(d) * math.log(2.0 * math.pi))


def _check_training_data(taus, distances, min_size):
    taus = np.asarray(taus, dtype=np.float64).ravel()
    distances = np.asarray(distances, dtype=np.float64).ravel()
    if len(taus) != len(distances):
        raise InvalidInputError(f"{len(taus)} ToAs but {len(distances)} distances")
    if len(taus) < min_size:
        raise InvalidInputError(f"Need at least {min_size} training points, got {len(taus)}")
    if not (np.all(np.isfinite(taus)) and np.all(np.isfinite(distances))):
        raise InvalidInputError("Non-finite GP training data")
    return taus, distances


def log_marginal_likelihood(taus, distances, h):
    taus, distances = _check_training_data(taus, distances, 1)
    L, _ = _factorize(taus, h)
    alpha = scipy.linalg.cho_solve((L, True), distances)
    return _log_likelihood_from_factor(L, alpha, distances)


def build_model(taus, distances, h):
    taus, distances = _check_training_data(taus, distances, 1)
    L, jitter = _factorize(taus, h)
    if jitter > JITTER_START * h.signal_std**2 * (1 + 1e-9):
        logger.warning("gp: Final model needed jitter %.1e on the diagonal", jitter)
    alpha = scipy.linalg.cho_solve((L, True), distances)
    return GpModel(taus, distances, h, L, alpha, jitter, _log_likelihood_from_factor(L, alpha, distances))


class _Objective:
    """Log marginal likelihood over log-hyperparameters, remembering the best point."""

    def __init__(self, taus, distances):
        self.taus = taus
        self.distances = distances
        self.best_theta = None
        self.best_value = -math.inf
        self.failures = 0
        self.evaluations = 0

    def __call__(self, theta):
        self.evaluations += 1
        try:
            value = log_marginal_likelihood(self.taus, self.distances, GpHyperparams.from_log(theta))
        except (NotPositiveDefiniteError, InvalidInputError):
            self.failures += 1
            return -math.inf
        if value > self.best_value:
            self.best_value = value
            self.best_theta = np.array(theta, dtype=np.float64)
        return value


def _golden_section_max(f, lo, hi):
    a, b = lo, hi
    iterations = max(1, math.ceil(math.log((b - a) / GOLDEN_RESOLUTION) / -math.log(INV_PHI)))
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iterations):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)


def _data_scales(taus, distances):
    d_rms = float(np.sqrt(np.mean(distances**2))) or 1.0
    d_std = float(np.std(distances)) or d_rms
    tau_scale = float(np.std(taus)) or max(abs(float(np.mean(taus))) * 1e-3, 1e-12)
    return d_rms, tau_scale, d_std


def grid_starts(taus, distances):
    """The hyperparameter starts tried before refinement, scaled to the data."""
    taus, distances = _check_training_data(taus, distances, 1)
    d_rms, tau_scale, d_std = _data_scales(taus, distances)
    return [
        GpHyperparams(d_rms * s, tau_scale * l, d_std * n) for s in SIGNAL_GRID for l in LENGTH_GRID for n in NOISE_GRID
    ]


def _sweep(objective, lower, upper, half_width):
    for coord in range(3):
        centre = objective.best_theta.copy()

        def along(t, centre=centre, coord=coord):
            theta = centre.copy()
            theta[coord] = t
            return objective(theta)

        lo = max(lower[coord], centre[coord] - half_width)
        hi = min(upper[coord], centre[coord] + half_width)
        if hi > lo:
            _golden_section_max(along, lo, hi)


def train_gp(taus, distances, seed=0, subsample_cap=SUBSAMPLE_CAP):
    taus, distances = _check_training_data(taus, distances, 2)
    if len(taus) > subsample_cap:
        keep = np.sort(seeding.get_rng(seed).choice(len(taus), subsample_cap, replace=False))
        logger.debug(f"gp: Subsampling {len(taus)} -> {subsample_cap} training points")
        taus, distances = taus[keep], distances[keep]

    d_rms, tau_scale, d_std = _data_scales(taus, distances)
    lower = np.log([d_rms * 1e-2, tau_scale * 1e-3, d_std * 1e-4])
    upper = np.log([d_rms * 1e2, tau_scale * 1e2, d_std * 10.0])

    objective = _Objective(taus, distances)
    for h in grid_starts(taus, distances):
        objective(h.to_log())
    if objective.best_theta is None:
        raise TrainingFailedError(f"Every hyperparameter start failed to factorize ({objective.failures} starts)")

    # Sweep until a full pass gains less than REFINE_TOLERANCE; a stalled pass
    # narrows the window, and the search ends once it is below MIN_HALF_WIDTH.
    half_width = REFINE_HALF_WIDTH
    sweeps = 0
    while sweeps < MAX_SWEEPS and half_width >= MIN_HALF_WIDTH:
        before = objective.best_value
        _sweep(objective, lower, upper, half_width)
        sweeps += 1
        if objective.best_value - before < REFINE_TOLERANCE:
            half_width /= WINDOW_SHRINK
    if sweeps == MAX_SWEEPS:
        logger.debug(f"gp: Refinement stopped after {MAX_SWEEPS} sweeps with window {half_width:.2g}")

    model = build_model(taus, distances, GpHyperparams.from_log(objective.best_theta))
    logger.debug(
        f"gp: {sweeps} sweeps, {objective.evaluations} evaluations ({objective.failures} failed), "
        f"best log-likelihood {model.log_likelihood:.3f}"
    )
    return model


def predict_distance(model, tau_star):
    """Posterior mean (m) and variance (m^2) at ``tau_star``; scalar or array."""
    tau_star = np.asarray(tau_star, dtype=np.float64)
    if not np.all(np.isfinite(tau_star)):
        raise InvalidInputError("Non-finite ToA for GP prediction")
    h = model.hyperparams
    k_star = _cross_kernel(tau_star.ravel(), model.train_toas, h)
    mean = k_star @ model.alpha
    v = scipy.linalg.solve_triangular(model.chol_factor, k_star.T, lower=True)
    prior = h.signal_std**2 + h.noise_std**2
    var = np.clip(prior - np.sum(v * v, axis=0), h.noise_std**2, prior)
    if tau_star.ndim == 0:
        return float(mean[0]), float(var[0])
    return mean.reshape(tau_star.shape), var.reshape(tau_star.shape)


def predict_distances(models, toas):
    """Per-BS mean and variance for one ToA vector (one model per BS)."""
    pairs = [predict_distance(model, tau) for model, tau in zip(models, toas, strict=True)]
    return np.array([m for m, _ in pairs]), np.array([v for _, v in pairs])


def train_per_bs(toa_matrix, distance_matrix, seed, subsample_cap=SUBSAMPLE_CAP, workers=1):
    """One independent GP per BS column."""
    n_bs = toa_matrix.shape[1]

    def train_one(i):
        model = train_gp(toa_matrix[:, i], distance_matrix[:, i], seed=seeding.derive_seed(seed, f"bs-{i}"), subsample_cap=subsample_cap)
        h = model.hyperparams
        logger.info(
            "gp: BS %d: sigma_k=%.3g m, l=%.3g s, sigma=%.3g m (log-lik %.2f)",
            i,
            h.signal_std,
            h.length_scale,
            h.noise_std,
            model.log_likelihood,
        )
        return model

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(train_one, range(n_bs)))


def save_models(models, path, deployment):
    doc = {
        "format": FORMAT,
        "deployment": deployment,
        "models": [
            {
                "bs_index": i,
                "signal_std_m": m.hyperparams.signal_std,
                "length_scale_s": m.hyperparams.length_scale,
                "noise_std_m": m.hyperparams.noise_std,
                "train_toas_s": m.train_toas.tolist(),
                "train_distances_m": m.train_distances.tolist(),
            }
            for i, m in enumerate(models)
        ],
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1) + "\n")
    except OSError as e:
        raise StageOutputError(f"Cannot write GP models {path}: {e}") from e
    logger.info("gp: Wrote %d models to %s", len(models), path)


def load_models(path):
    if not path.exists():
        raise StageInputError(f"GP model file {path} not found; run `train` first")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not a {FORMAT} file: {e}") from e
    if doc.get("format") != FORMAT:
        raise ModelFormatError(f"{path}: expected format {FORMAT}, found {doc.get('format')!r}")

    try:
        entries = sorted(doc["models"], key=lambda e: e["bs_index"])
        params = [
            (
                GpHyperparams(entry["signal_std_m"], entry["length_scale_s"], entry["noise_std_m"]),
                entry["train_toas_s"],
                entry["train_distances_m"],
            )
            for entry in entries
        ]
        deployment = doc["deployment"]
    except (KeyError, TypeError, InvalidInputError) as e:
        raise ModelFormatError(f"{path}: malformed {FORMAT} file: {e!r}") from e
    models = []
    for h, toas, distances in params:
        try:
            models.append(build_model(toas, distances, h))
        except (InvalidInputError, ValueError) as e:
            raise ModelFormatError(f"{path}: bad training data in model {len(models)}: {e}") from e
    return deployment, models
