"""Per-estimate uncertainty: GP distance sampling, RF ensemble spread and CNK.

Every estimator yields per-coordinate variances (v_x, v_y) in m^2; the combined
metric c = sqrt(v_x + v_y) summarizes them in metres.
"""

import concurrent.futures
import dataclasses
import enum
import logging
import math

import numpy as np

from . import gp, otdoa, seeding
from .errors import (
    InsufficientEnsembleError,
    InvalidInputError,
    PositioningError,
    UncertaintyUnavailableError,
)

logger = logging.getLogger(__name__)

NUM_SAMPLES = 200
MAX_REDRAWS = 5
# Negative distance draws are redrawn this often before being clamped to zero.
MAX_NEGATIVE_REDRAWS = 100


class Method(enum.StrEnum):
    GP = "gp"
    RF = "rf"
    RF_CNK = "rf_cnk"


@dataclasses.dataclass(frozen=True)
class PositionEstimate:
    position: np.ndarray  # (x, y) m
    variance: tuple[float, float]  # (v_x, v_y) m^2
    combined: float  # m
    method: Method

    def __post_init__(self):
        if self.combined != combined_metric(self.variance):
            raise InvalidInputError(f"combined {self.combined} != sqrt(v_x + v_y) for {self.variance}")

    @classmethod
    def from_variance(cls, position, variance, method):
        variance = (float(variance[0]), float(variance[1]))
        return cls(np.asarray(position, dtype=np.float64), variance, combined_metric(variance), Method(method))


def combined_metric(variance):
    v_x, v_y = variance
    if not (v_x >= 0 and v_y >= 0):
        raise InvalidInputError(f"Variances must be >= 0, got ({v_x}, {v_y})")
    return math.sqrt(v_x + v_y)


def rf_ensemble_uncertainty(per_tree, p_hat):
    per_tree = np.asarray(per_tree, dtype=np.float64)
    if len(per_tree) < 2:
        raise InsufficientEnsembleError(f"Ensemble variance needs at least 2 trees, got {len(per_tree)}")
    v = np.sum((per_tree - np.asarray(p_hat, dtype=np.float64)) ** 2, axis=0) / (len(per_tree) - 1)
    return float(v[0]), float(v[1])


def cnk_uncertainty(p_hat, p_knn):
    diff = np.asarray(p_hat, dtype=np.float64) - np.asarray(p_knn, dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise InvalidInputError("Non-finite position for CNK uncertainty")
    return float(diff[0] ** 2), float(diff[1] ** 2)


def _draw_distances(means, stds, rng):
    d = means + stds * rng.standard_normal(len(means))
    for _ in range(MAX_NEGATIVE_REDRAWS):
        negative = d < 0
        if not negative.any():
            return d
        d[negative] = means[negative] + stds[negative] * rng.standard_normal(int(negative.sum()))
    return np.maximum(d, 0.0)


def _sample_position(slot, means, stds, deployment, settings, seed):
    """Solve one distance draw. A solve that raises, does not converge or lands
    out of reach of the footprint is redrawn."""
    rng = seeding.stream(seed, slot)
    for attempt in range(1 + MAX_REDRAWS):
        distances = _draw_distances(means, stds, rng)
        try:
            result = otdoa.locate(distances, deployment, settings)
        except PositioningError as e:
            logger.debug(f"uq: Sample {slot} attempt {attempt} failed: {e}")
            continue
        if result.converged and otdoa.within_reach(result.position, deployment):
            return result.position
        logger.debug(f"uq: Sample {slot} attempt {attempt} ended at {result.position} (converged={result.converged})")
    logger.warning("uq: Skipping sample %d after %d redraws", slot, MAX_REDRAWS)
    return None


def sample_positions(means, variances, deployment, n_samples, seed, settings, workers=1):
    """Positions solved from Normal(means, variances) distance draws, one row per
    sample that could be solved. Draws for slot i depend only on (seed, i)."""
    if n_samples < 2:
        raise InvalidInputError(f"Need at least 2 samples, got {n_samples}")
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if np.any(variances < 0):
        raise InvalidInputError("Negative predictive variance")
    stds = np.sqrt(variances)

    def solve(slot):
        return _sample_position(slot, means, stds, deployment, settings, seed)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            positions = list(pool.map(solve, range(n_samples)))
    else:
        positions = [solve(slot) for slot in range(n_samples)]
    return np.array([p for p in positions if p is not None]).reshape(-1, 2)


def sample_position_spread(means, variances, deployment, p_hat, n_samples, seed, settings, workers=1):
    """Variance of sampled positions taken around ``p_hat`` (not around the sample
    mean). Returns (v, samples used)."""
    positions = sample_positions(means, variances, deployment, n_samples, seed, settings, workers)
    if len(positions) < 2:
        raise UncertaintyUnavailableError(f"Only {len(positions)} of {n_samples} samples could be solved")
    v = np.sum((positions - np.asarray(p_hat, dtype=np.float64)) ** 2, axis=0) / (len(positions) - 1)
    return (float(v[0]), float(v[1])), len(positions)


def gp_sampling_uncertainty(gp_models, deployment, tau, n_samples, seed, settings=otdoa.SolverSettings(), workers=1):
    tau = np.asarray(tau, dtype=np.float64)
    if len(tau) != len(gp_models) or len(tau) != deployment.n_bs:
        raise InvalidInputError(f"Expected {deployment.n_bs} ToAs and GP models, got {len(tau)} and {len(gp_models)}")
    means, variances = gp.predict_distances(gp_models, tau)
    p_hat = otdoa.solve_from_distances(means, deployment, settings)
    v, used = sample_position_spread(means, variances, deployment, p_hat, n_samples, seed, settings, workers)
    if used < n_samples:
        logger.warning("uq: GP uncertainty used %d of %d samples", used, n_samples)
    return PositionEstimate.from_variance(p_hat, v, Method.GP)
