"""Run configuration: one TOML file, every key optional.

See README.md for a complete default example. Relative paths resolve against the
directory of the configuration file; CLI flags override file values.
"""

import dataclasses
import logging
import tomllib
from collections.abc import Mapping
from pathlib import Path

from .errors import ConfigError
from .gp import SUBSAMPLE_CAP
from .otdoa import SolverSettings
from .rf import ForestParams
from .scenario import DEPLOYMENTS, ScenarioConfig
from .uncertainty import NUM_SAMPLES

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Paths:
    dataset: Path = Path("out/dataset")
    models: Path = Path("out/models")
    report: Path = Path("out/report")

    @property
    def train_csv(self):
        return self.dataset / "train.csv"

    @property
    def test_csv(self):
        return self.dataset / "test.csv"

    @property
    def gp_models(self):
        return self.models / "gp_models.json"

    @property
    def rf_model(self):
        return self.models / "rf_model.json"

    @property
    def summary_csv(self):
        return self.report / "summary.csv"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    deployment: str = "indoor-open-office"
    scenario: ScenarioConfig = ScenarioConfig()
    split_fraction: float = 0.7
    solver: SolverSettings = SolverSettings()
    gp_subsample_cap: int = SUBSAMPLE_CAP
    forest: ForestParams = ForestParams()
    cross_validate: bool = False
    knn_neighbors: int = 3
    num_samples: int = NUM_SAMPLES
    paths: Paths = Paths()
    workers: int = 4

    def __post_init__(self):
        if self.deployment not in DEPLOYMENTS:
            raise ConfigError(f"Unknown deployment: {self.deployment}. Choose one of {', '.join(DEPLOYMENTS)}")
        if not 0 < self.split_fraction < 1:
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.gp_subsample_cap < 2:
            raise ConfigError(f"gp.subsample_cap must be >= 2, got {self.gp_subsample_cap}")
        if self.knn_neighbors < 1:
            raise ConfigError(f"rf.knn_neighbors must be >= 1, got {self.knn_neighbors}")
        if self.num_samples < 2:
            raise ConfigError(f"uncertainty.num_samples must be >= 2, got {self.num_samples}")
        if self.workers < 1:
            raise ConfigError(f"runtime.workers must be >= 1, got {self.workers}")

    @property
    def root_seed(self):
        return self.scenario.rng_seed


TOP_LEVEL_KEYS = {"deployment", "split_fraction", "scenario", "solver", "gp", "rf", "uncertainty", "paths", "runtime"}

SOLVER_KEYS = {"max_iterations": "max_iterations", "position_tolerance_m": "position_tolerance"}
FOREST_KEYS = {"n_trees", "max_depth", "min_leaf_size", "features_per_split", "bootstrap"}
RF_EXTRA_KEYS = {"cross_validate", "knn_neighbors"}


def _table(doc, name, allowed):
    table = doc.get(name, {})
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"Unknown [{name}] keys: {', '.join(sorted(unknown))}")
    return dict(table)


def from_mapping(doc, base_dir=Path(".")):
    unknown = set(doc) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}")

    scenario_table = _table(doc, "scenario", ScenarioConfig.FILE_KEYS)
    solver_table = _table(doc, "solver", SOLVER_KEYS)
    rf_table = _table(doc, "rf", FOREST_KEYS | RF_EXTRA_KEYS)
    gp_table = _table(doc, "gp", {"subsample_cap"})
    uq_table = _table(doc, "uncertainty", {"num_samples"})
    runtime_table = _table(doc, "runtime", {"workers"})
    path_table = _table(doc, "paths", {"dataset", "models", "report"})

    try:
        return RunConfig(
            deployment=doc.get("deployment", RunConfig.deployment),
            scenario=ScenarioConfig.from_mapping(scenario_table),
            split_fraction=float(doc.get("split_fraction", RunConfig.split_fraction)),
            solver=SolverSettings(**{SOLVER_KEYS[k]: v for k, v in solver_table.items()}),
            gp_subsample_cap=int(gp_table.get("subsample_cap", SUBSAMPLE_CAP)),
            forest=ForestParams(**{k: v for k, v in rf_table.items() if k in FOREST_KEYS}),
            cross_validate=bool(rf_table.get("cross_validate", False)),
            knn_neighbors=int(rf_table.get("knn_neighbors", 3)),
            num_samples=int(uq_table.get("num_samples", NUM_SAMPLES)),
            paths=_resolve_paths(path_table, base_dir),
            workers=int(runtime_table.get("workers", RunConfig.workers)),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid configuration value: {e}") from e


def _resolve_paths(table, base_dir):
    defaults = Paths()
    return Paths(**{f.name: base_dir / table.get(f.name, getattr(defaults, f.name)) for f in dataclasses.fields(Paths)})


def load_config(path):
    if path is None:
        logger.debug("config: No configuration file, using defaults")
        return RunConfig()
    try:
        with path.open("rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Configuration file {path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_mapping(doc, path.parent)


def with_overrides(
    config,
    seed=None,
    num_samples=None,
    max_iterations=None,
    position_tolerance=None,
    workers=None,
    cross_validate=None,
):
    changes = {}
    if seed is not None:
        changes["scenario"] = dataclasses.replace(config.scenario, rng_seed=seed)
    if num_samples is not None:
        changes["num_samples"] = num_samples
    if max_iterations is not None or position_tolerance is not None:
        changes["solver"] = dataclasses.replace(
            config.solver,
            max_iterations=config.solver.max_iterations if max_iterations is None else max_iterations,
            position_tolerance=config.solver.position_tolerance if position_tolerance is None else position_tolerance,
        )
    if workers is not None:
        changes["workers"] = workers
    if cross_validate:
        changes["cross_validate"] = True
    return dataclasses.replace(config, **changes)
