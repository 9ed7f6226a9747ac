"""Statistical ToA synthesis and the measurement datasets built from it.

A ToA is the 3D flight time plus zero-mean Gaussian measurement noise, plus an
exponentially distributed excess delay when the link is NLoS. The result is clamped
to at least ``true_toa - 3 * noise_std`` and to non-negative values.
"""

import csv
import dataclasses
import enum
import logging
import math

import numpy as np

from . import seeding
from .errors import DatasetSchemaError, StageInputError, StageOutputError
from .scenario import Deployment, LosModel, drop_ues

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# LoS probability: certain up to LOS_BREAKPOINT metres, then exponential decay.
LOS_BREAKPOINT = 5.0
LOS_DECAY = 70.8


def geometric_toa(ue, bs, ue_height):
    ue3 = np.array([ue[0], ue[1], ue_height], dtype=np.float64)
    return float(np.linalg.norm(ue3 - np.asarray(bs, dtype=np.float64)) / SPEED_OF_LIGHT)


def distances_3d(positions, deployment):
    """(M, N) distances from each 2D position (at UE height) to every BS."""
    positions = np.atleast_2d(positions)
    ue3 = np.column_stack([positions, np.full(len(positions), deployment.ue_height)])
    return np.linalg.norm(ue3[:, None, :] - deployment.bs_array[None, :, :], axis=2)


def los_probability(distance_2d):
    d = np.asarray(distance_2d, dtype=np.float64)
    return np.where(d <= LOS_BREAKPOINT, 1.0, np.exp(-(d - LOS_BREAKPOINT) / LOS_DECAY))


def synthesize_toa(true_toa, los, noise_std, nlos_excess_mean, rng):
    """Measured ToA for a true flight time. Works elementwise on arrays."""
    true_toa = np.asarray(true_toa, dtype=np.float64)
    los = np.asarray(los, dtype=bool)
    noise = rng.normal(0.0, noise_std, size=true_toa.shape)
    excess = rng.exponential(nlos_excess_mean, size=true_toa.shape) if nlos_excess_mean > 0 else np.zeros(true_toa.shape)
    measured = true_toa + noise + np.where(los, 0.0, excess)
    measured = np.maximum(measured, np.maximum(true_toa - 3.0 * noise_std, 0.0))
    return float(measured) if measured.ndim == 0 else measured


class SplitTag(enum.StrEnum):
    ALL = "all"
    TRAIN = "train"
    TEST = "test"


@dataclasses.dataclass(frozen=True)
class ToaRecord:
    ue_index: int
    toa: np.ndarray  # s, one per BS
    los_flags: np.ndarray
    true_position: np.ndarray  # (x, y) m

    def __post_init__(self):
        if len(self.toa) != len(self.los_flags):
            raise DatasetSchemaError(f"UE {self.ue_index}: {len(self.toa)} ToAs but {len(self.los_flags)} LoS flags")
        if np.any(self.toa < 0):
            raise DatasetSchemaError(f"UE {self.ue_index}: negative ToA")


@dataclasses.dataclass(frozen=True)
class MeasurementSet:
    records: tuple[ToaRecord, ...]
    deployment: Deployment
    split_tag: SplitTag = SplitTag.ALL

    def __post_init__(self):
        for record in self.records:
            if len(record.toa) != self.deployment.n_bs:
                raise DatasetSchemaError(
                    f"UE {record.ue_index}: {len(record.toa)} ToAs for a {self.deployment.n_bs}-BS deployment"
                )

    def __len__(self):
        return len(self.records)

    @property
    def ue_indices(self):
        return np.array([r.ue_index for r in self.records], dtype=np.int64)

    @property
    def toa_matrix(self):
        return np.array([r.toa for r in self.records], dtype=np.float64).reshape(len(self), self.deployment.n_bs)

    @property
    def los_matrix(self):
        return np.array([r.los_flags for r in self.records], dtype=bool).reshape(len(self), self.deployment.n_bs)

    @property
    def positions(self):
        return np.array([r.true_position for r in self.records], dtype=np.float64).reshape(len(self), 2)

    def true_distances(self):
        return distances_3d(self.positions, self.deployment)

    def subset(self, rows, split_tag):
        return MeasurementSet(tuple(self.records[i] for i in rows), self.deployment, split_tag)


def _record(ue_index, position, deployment, config, noise_seed):
    rng = seeding.stream(noise_seed, ue_index)
    true_toas = distances_3d(position, deployment)[0] / SPEED_OF_LIGHT
    match config.los_model:
        case LosModel.ALWAYS_LOS:
            los = np.ones(deployment.n_bs, dtype=bool)
        case LosModel.DISTANCE_PROBABILISTIC:
            d2 = np.linalg.norm(deployment.bs_array[:, :2] - position, axis=1)
            los = rng.random(deployment.n_bs) < los_probability(d2)
    toa = synthesize_toa(true_toas, los, config.noise_std, config.nlos_excess_mean, rng)
    return ToaRecord(ue_index, np.atleast_1d(toa), los, np.asarray(position, dtype=np.float64))


def generate_dataset(deployment, config, seed):
    positions = drop_ues(deployment, config.n_ues, seeding.derive_seed(seed, "drop"))
    noise_seed = seeding.derive_seed(seed, "noise")
    records = tuple(_record(i, positions[i], deployment, config, noise_seed) for i in range(config.n_ues))
    los_ratio = float(np.mean([r.los_flags.mean() for r in records]))
    logger.info("sim: Generated %d UEs x %d BSs (LoS ratio %.2f)", len(records), deployment.n_bs, los_ratio)
    return MeasurementSet(records, deployment)


def split_dataset(measurements, fraction, seed):
    """Random split by UE. Both halves keep ascending UE order."""
    n_train = int(round(fraction * len(measurements)))
    order = seeding.get_rng(seed).permutation(len(measurements))
    train_rows = np.sort(order[:n_train])
    test_rows = np.sort(order[n_train:])
    return measurements.subset(train_rows, SplitTag.TRAIN), measurements.subset(test_rows, SplitTag.TEST)


def csv_header(n_bs):
    return [
        "ue_index",
        "true_x",
        "true_y",
        *(f"los_{i}" for i in range(n_bs)),
        *(f"toa_{i}" for i in range(n_bs)),
    ]


def write_csv(measurements, path):
    n_bs = measurements.deployment.n_bs
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(csv_header(n_bs))
            for r in measurements.records:
                writer.writerow(
                    [
                        r.ue_index,
                        repr(float(r.true_position[0])),
                        repr(float(r.true_position[1])),
                        *(int(flag) for flag in r.los_flags),
                        *(repr(float(t)) for t in r.toa),
                    ]
                )
    except OSError as e:
        raise StageOutputError(f"Cannot write dataset {path}: {e}") from e
    logger.info("sim: Wrote %d rows to %s", len(measurements), path)


def read_csv(path, deployment, split_tag):
    if not path.exists():
        raise StageInputError(f"Dataset {path} not found; run `simulate` first")

    n_bs = deployment.n_bs
    expected = csv_header(n_bs)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader, [])
        for i, name in enumerate(expected):
            if i >= len(header) or header[i] != name:
                found = header[i] if i < len(header) else "<missing>"
                raise DatasetSchemaError(f"{path}: bad column {i}: expected '{name}', found '{found}'")
        if len(header) != len(expected):
            raise DatasetSchemaError(f"{path}: unexpected extra column '{header[len(expected)]}'")

        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetSchemaError(f"{path}:{lineno}: expected {len(expected)} fields, found {len(row)}")
            try:
                toa = np.array([float(v) for v in row[3 + n_bs :]])
                if not all(math.isfinite(t) for t in toa):
                    raise ValueError("non-finite ToA")
                records.append(
                    ToaRecord(
                        ue_index=int(row[0]),
                        toa=toa,
                        los_flags=np.array([v == "1" for v in row[3 : 3 + n_bs]]),
                        true_position=np.array([float(row[1]), float(row[2])]),
                    )
                )
            except ValueError as e:
                raise DatasetSchemaError(f"{path}:{lineno}: {e}") from e

    logger.debug(f"sim: Read {len(records)} rows from {path}")
    return MeasurementSet(tuple(records), deployment, split_tag)
