"""OTDoA multilateration: RSTD formation and a 2D Levenberg-Marquardt solver.

Ranges are evaluated in 3D with the UE fixed at the deployment's UE height, so
noiseless RSTDs invert exactly; only (x, y) is estimated. The damped iteration is
MINPACK's, through scipy.optimize.least_squares.
"""

import dataclasses
import functools
import logging

import numpy as np
import scipy.optimize

from .errors import DegenerateGeometryError, InsufficientGeometryError, InvalidInputError
from .radio_sim import SPEED_OF_LIGHT, distances_3d

logger = logging.getLogger(__name__)

# Undamped Gauss-Newton steps taken after the damped iteration converges.
POLISH_STEPS = 3
# MINPACK rejects tolerances below machine epsilon.
TOLERANCE_FLOOR = 1e-15

# Starting points come from the RSTD cost evaluated on a grid over the footprint.
GRID_STEP = 1.0  # m
GRID_MIN_POINTS = 20  # per axis
# Extra grid starts tried when the first run fails, this far from earlier ones.
FALLBACK_GRID_STARTS = 2
START_SEPARATION = 10.0  # m

# Positions further outside the footprint than this share of its longer side
# are not plausible UE positions.
REACH_MARGIN = 0.25


@dataclasses.dataclass(frozen=True)
class RstdVector:
    reference_bs: int
    values: np.ndarray  # s, toa_ref - toa_j for every j != reference_bs, by BS index

    @property
    def n_bs(self):
        return len(self.values) + 1

    @property
    def neighbors(self):
        return np.array([j for j in range(self.n_bs) if j != self.reference_bs])


@dataclasses.dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 50  # residual evaluations per run
    position_tolerance: float = 1e-4  # m

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidInputError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.position_tolerance > 0:
            raise InvalidInputError(f"position_tolerance must be > 0, got {self.position_tolerance}")


@dataclasses.dataclass(frozen=True)
class SolverResult:
    position: np.ndarray
    iterations: int
    converged: bool
    cost: float  # sum of squared residuals, m^2
    initial_cost: float


def form_rstd(toas, reference_bs):
    toas = np.asarray(toas, dtype=np.float64)
    if len(toas) < 3:
        raise InsufficientGeometryError(f"OTDoA needs at least 3 BSs, got {len(toas)}")
    if not 0 <= reference_bs < len(toas):
        raise InvalidInputError(f"Reference BS {reference_bs} out of range for {len(toas)} BSs")
    neighbors = np.arange(len(toas)) != reference_bs
    return RstdVector(reference_bs, toas[reference_bs] - toas[neighbors])


class _HyperbolicModel:
    """Residuals r_j = c*RSTD_j - (|p - b_ref| - |p - b_j|) and their Jacobian."""

    def __init__(self, rstd, deployment):
        bs = deployment.bs_array
        self.bs_xy = bs[:, :2]
        self.dz2 = (bs[:, 2] - deployment.ue_height) ** 2
        self.ref = rstd.reference_bs
        self.neighbors = rstd.neighbors
        self.target = SPEED_OF_LIGHT * rstd.values

    def _ranges(self, p):
        diff = p - self.bs_xy
        r = np.sqrt(np.sum(diff * diff, axis=1) + self.dz2)
        return np.maximum(r, 1e-12), diff

    def residual(self, p):
        r, _ = self._ranges(p)
        return self.target - (r[self.ref] - r[self.neighbors])

    def jacobian(self, p):
        r, diff = self._ranges(p)
        unit = diff / r[:, None]
        return -(unit[self.ref] - unit[self.neighbors])


def lm_solve(rstd, deployment, init, settings):
    if rstd.n_bs != deployment.n_bs:
        raise InvalidInputError(f"{rstd.n_bs} BSs in RSTD vector, {deployment.n_bs} in deployment")
    if rstd.n_bs < 3:
        raise InsufficientGeometryError(f"OTDoA needs at least 3 BSs, got {rstd.n_bs}")
    init = np.asarray(init, dtype=np.float64)
    if not (np.all(np.isfinite(rstd.values)) and np.all(np.isfinite(init))):
        raise InvalidInputError("Non-finite RSTD or initial position")
    if not deployment.contains(init, margin=max(deployment.area_length, deployment.area_width)):
        raise InvalidInputError(f"Initial position {init} far outside the deployment footprint")

    model = _HyperbolicModel(rstd, deployment)
    f0 = model.residual(init)
    extent = max(deployment.area_length, deployment.area_width, 1.0)
    fit = scipy.optimize.least_squares(
        model.residual,
        init,
        jac=model.jacobian,
        method="lm",
        xtol=max(settings.position_tolerance / extent, TOLERANCE_FLOOR),
        ftol=TOLERANCE_FLOOR,
        gtol=TOLERANCE_FLOOR,
        max_nfev=settings.max_iterations,
    )
    p, f = fit.x, model.residual(fit.x)
    J = model.jacobian(p)
    if np.linalg.matrix_rank(J) < 2 and np.linalg.matrix_rank(model.jacobian(init)) < 2:
        raise DegenerateGeometryError("Jacobian is rank-deficient at the start and the solution (collinear geometry?)")

    converged = fit.status > 0
    cost = float(f @ f)
    if converged:
        for _ in range(POLISH_STEPS):
            if cost == 0.0 or np.linalg.matrix_rank(J) < 2:
                break
            step = np.linalg.lstsq(J, -f, rcond=None)[0]
            f_new = model.residual(p + step)
            cost_new = float(f_new @ f_new)
            if not cost_new < cost:
                break
            p = p + step
            f, cost = f_new, cost_new
            J = model.jacobian(p)

    return SolverResult(p, int(fit.nfev), converged, cost, float(f0 @ f0))


def solve_position(rstd, deployment, init, settings):
    return lm_solve(rstd, deployment, init, settings).position


def within_reach(position, deployment):
    return deployment.contains(position, margin=REACH_MARGIN * max(deployment.area_length, deployment.area_width))


@functools.lru_cache(maxsize=8)
def _grid(deployment):
    nx = max(GRID_MIN_POINTS, int(deployment.area_length / GRID_STEP) + 1)
    ny = max(GRID_MIN_POINTS, int(deployment.area_width / GRID_STEP) + 1)
    xs, ys = np.meshgrid(np.linspace(0.0, deployment.area_length, nx), np.linspace(0.0, deployment.area_width, ny))
    points = np.column_stack([xs.ravel(), ys.ravel()])
    return points, distances_3d(points, deployment)


def grid_cost(rstd, deployment):
    """Grid points over the footprint and the RSTD cost at each."""
    points, ranges = _grid(deployment)
    residual = SPEED_OF_LIGHT * rstd.values - (ranges[:, [rstd.reference_bs]] - ranges[:, rstd.neighbors])
    return points, np.sum(residual * residual, axis=1)


def _fallback_starts(rstd, deployment, first, points, cost):
    yield deployment.centroid
    yield deployment.bs_array[rstd.reference_bs, :2]
    taken = [first]
    for _ in range(FALLBACK_GRID_STARTS):
        far = np.all([np.linalg.norm(points - t, axis=1) >= START_SEPARATION for t in taken], axis=0)
        if not far.any():
            return
        start = points[int(np.argmin(np.where(far, cost, np.inf)))]
        taken.append(start)
        yield start


def locate(distances, deployment, settings):
    """OTDoA on ranges with the nearest BS as reference.

    The solver starts from the lowest-cost grid point. If that run does not converge
    to a plausible position, it is retried from the centroid, the nearest BS and
    the next grid minima; the lowest-cost plausible run wins, or the lowest-cost run
    when none is plausible.
    """
    distances = np.asarray(distances, dtype=np.float64)
    if len(distances) != deployment.n_bs:
        raise InvalidInputError(f"Expected {deployment.n_bs} distances, got {len(distances)}")
    if not np.all(np.isfinite(distances)):
        raise InvalidInputError("Non-finite distance")

    pseudo_toas = distances / SPEED_OF_LIGHT
    rstd = form_rstd(pseudo_toas, int(np.argmin(pseudo_toas)))
    points, cost = grid_cost(rstd, deployment)
    first = points[int(np.argmin(cost))]

    results = []
    error = None
    for start in (first, *_fallback_starts(rstd, deployment, first, points, cost)):
        try:
            result = lm_solve(rstd, deployment, start, settings)
        except DegenerateGeometryError as e:
            error = e
            continue
        if result.converged and within_reach(result.position, deployment):
            if not results:
                return result
            results.append(result)
            continue
        if not results:
            logger.debug(f"otdoa: Run from {start} ended at {result.position} (converged={result.converged}), trying other starts")
        results.append(result)

    if not results:
        raise error
    plausible = [r for r in results if r.converged and within_reach(r.position, deployment)]
    return min(plausible or results, key=lambda r: r.cost)


def solve_from_distances(distances, deployment, settings):
    return locate(distances, deployment, settings).position
