"""Deployment geometry and UE drops.

Deployments are a registry of named builders, so adding a layout is a data-entry
task: write a builder returning a ``Deployment`` and list it in ``DEPLOYMENTS``.
Positioning is 2D throughout; BS and UE heights only enter the 3D distance used to
synthesize ToAs and to evaluate ranges in the solver.
"""

import dataclasses
import enum
import functools
import logging
from collections.abc import Callable

import numpy as np

from . import seeding
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Deployment:
    """BS positions (x, y, z) in metres over an ``area_length`` (x) by
    ``area_width`` (y) footprint."""

    bs_positions: tuple[tuple[float, float, float], ...]
    area_width: float
    area_length: float
    bs_height: float
    ue_height: float

    def __post_init__(self):
        if len(self.bs_positions) == 0:
            raise ConfigError("deployment needs at least one BS")
        for i, (x, y, z) in enumerate(self.bs_positions):
            if z != self.bs_height:
                raise ConfigError(f"BS {i} height {z} differs from bs_height {self.bs_height}")
            if not (0 <= x <= self.area_length and 0 <= y <= self.area_width):
                raise ConfigError(f"BS {i} at ({x}, {y}) lies outside the footprint")
        if len(set(self.bs_positions)) != len(self.bs_positions):
            raise ConfigError("BS positions must be distinct")

    @property
    def n_bs(self):
        return len(self.bs_positions)

    @functools.cached_property
    def bs_array(self):
        """(N, 3) array of BS coordinates."""
        return np.asarray(self.bs_positions, dtype=np.float64)

    @property
    def centroid(self):
        return np.array([self.area_length / 2, self.area_width / 2])

    def contains(self, point, margin=0.0):
        x, y = point
        return -margin <= x <= self.area_length + margin and -margin <= y <= self.area_width + margin


class LosModel(enum.StrEnum):
    ALWAYS_LOS = "always-los"
    DISTANCE_PROBABILISTIC = "distance-probabilistic"


@dataclasses.dataclass(frozen=True)
class ScenarioConfig:
    n_ues: int = 1000
    rng_seed: int = 2021
    noise_std: float = 3e-9  # s
    nlos_excess_mean: float = 15e-9  # s
    los_model: LosModel = LosModel.DISTANCE_PROBABILISTIC

    # Keys of the [scenario] table in the run configuration file.
    FILE_KEYS = {
        "n_ues": "n_ues",
        "rng_seed": "rng_seed",
        "noise_std_s": "noise_std",
        "nlos_excess_mean_s": "nlos_excess_mean",
        "los_model": "los_model",
    }

    def __post_init__(self):
        if self.n_ues < 1:
            raise ConfigError(f"n_ues must be >= 1, got {self.n_ues}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std_s must be >= 0, got {self.noise_std}")
        if self.nlos_excess_mean < 0:
            raise ConfigError(f"nlos_excess_mean_s must be >= 0, got {self.nlos_excess_mean}")
        try:
            object.__setattr__(self, "los_model", LosModel(self.los_model))
        except ValueError:
            raise ConfigError(f"Invalid los_model: {self.los_model}") from None

    @classmethod
    def from_mapping(cls, table):
        unknown = set(table) - set(cls.FILE_KEYS)
        if unknown:
            raise ConfigError(f"Unknown [scenario] keys: {', '.join(sorted(unknown))}")
        return cls(**{cls.FILE_KEYS[key]: value for key, value in table.items()})


# Indoor open office: 120 m x 50 m hall, two rows of six ceiling-mounted BSs.
IOO_LENGTH = 120.0
IOO_WIDTH = 50.0
IOO_BS_HEIGHT = 3.0
IOO_UE_HEIGHT = 1.5
IOO_ROWS_Y = (15.0, 35.0)
IOO_FIRST_X = 10.0
IOO_SPACING = 20.0
IOO_PER_ROW = 6


def build_indoor_open_office():
    positions = tuple(
        (IOO_FIRST_X + IOO_SPACING * i, y, IOO_BS_HEIGHT)
        for y in IOO_ROWS_Y
        for i in range(IOO_PER_ROW)
    )
    return Deployment(
        bs_positions=positions,
        area_width=IOO_WIDTH,
        area_length=IOO_LENGTH,
        bs_height=IOO_BS_HEIGHT,
        ue_height=IOO_UE_HEIGHT,
    )


DEPLOYMENTS: dict[str, Callable[[], Deployment]] = {
    "indoor-open-office": build_indoor_open_office,
}


def get_deployment(name):
    try:
        return DEPLOYMENTS[name]()
    except KeyError:
        raise ConfigError(f"Unknown deployment: {name}. Choose one of {', '.join(DEPLOYMENTS)}") from None


def drop_ues(deployment, n, seed):
    """Drop ``n`` UEs uniformly over the footprint. Returns an (n, 2) array."""
    if n < 1:
        raise ConfigError(f"Need at least one UE, got {n}")
    rng = seeding.get_rng(seed)
    xs = rng.uniform(0.0, deployment.area_length, n)
    ys = rng.uniform(0.0, deployment.area_width, n)
    logger.debug(f"sim: Dropped {n} UEs (seed {seed})")
    return np.column_stack([xs, ys])
