import blinker
import concurrent.futures
import logging
import threading

import numpy as np

from . import evaluation, gp, otdoa, radio_sim, rf, seeding
from .errors import EmptySplitError, InvalidInputError, ModelFormatError, PositioningError
from .radio_sim import SPEED_OF_LIGHT, SplitTag
from .scenario import get_deployment
from .uncertainty import (
    Method,
    PositionEstimate,
    cnk_uncertainty,
    gp_sampling_uncertainty,
    rf_ensemble_uncertainty,
)

logger = logging.getLogger(__name__)

# Position-only methods scored next to the three uncertainty methods.
BASELINES = ("knn", "otdoa")


class ReportCollector:
    """Gathers per-UE results from the estimate-ready signal, keyed by test row so
    the report does not depend on the order workers finish in."""

    def __init__(self, n_rows):
        self.n_rows = n_rows
        self.estimates = {method.value: {} for method in Method}
        self.baselines = {name: {} for name in BASELINES}
        self._lock = threading.Lock()

    def estimate_callback(self, sender, method, row, estimate):
        with self._lock:
            if isinstance(estimate, PositionEstimate):
                self.estimates[method][row] = estimate
            else:
                self.baselines[method][row] = estimate

    def ordered(self):
        estimates = {m: [by_row[i] for i in range(self.n_rows)] for m, by_row in self.estimates.items()}
        baselines = {m: np.array([by_row[i] for i in range(self.n_rows)]) for m, by_row in self.baselines.items()}
        return estimates, baselines


class Pipeline:
    def __init__(self, config):
        self.config = config
        self.deployment = get_deployment(config.deployment)
        self.sig = blinker.Signal("estimate-ready")
        self.sig.connect(self._log_estimate)

    def _seed(self, label):
        return seeding.derive_seed(self.config.root_seed, label)

    def _log_estimate(self, sender, method, row, estimate):
        if isinstance(estimate, PositionEstimate):
            logger.debug(f"pipeline: Row {row} {method} at ({estimate.position[0]:.2f}, {estimate.position[1]:.2f}), c={estimate.combined:.3f} m")

    def simulate(self):
        config = self.config
        dataset = radio_sim.generate_dataset(self.deployment, config.scenario, config.root_seed)
        train, test = radio_sim.split_dataset(dataset, config.split_fraction, self._seed("split"))
        radio_sim.write_csv(train, config.paths.train_csv)
        radio_sim.write_csv(test, config.paths.test_csv)
        return train, test

    def train(self):
        config = self.config
        train = radio_sim.read_csv(config.paths.train_csv, self.deployment, SplitTag.TRAIN)
        if len(train) < 2:
            raise InvalidInputError(f"{config.paths.train_csv}: need at least 2 training rows, got {len(train)}")

        gp_models = gp.train_per_bs(
            train.toa_matrix,
            train.true_distances(),
            self._seed("gp-subsample"),
            config.gp_subsample_cap,
            config.workers,
        )
        gp.save_models(gp_models, config.paths.gp_models, config.deployment)

        params = config.forest
        if config.cross_validate:
            params = rf.cross_validate(train.toa_matrix, train.positions, params, self._seed("cv"), config.workers)
        forest = rf.train_rf(train, params, self._seed("rf"), config.workers)
        rf.save_forest(forest, config.paths.rf_model)
        return gp_models, forest

    def _load_models(self):
        config = self.config
        deployment_name, gp_models = gp.load_models(config.paths.gp_models)
        if deployment_name != config.deployment or len(gp_models) != self.deployment.n_bs:
            raise ModelFormatError(
                f"{config.paths.gp_models}: {len(gp_models)} models for '{deployment_name}', "
                f"expected {self.deployment.n_bs} for '{config.deployment}'"
            )
        forest = rf.load_forest(config.paths.rf_model)
        if forest.n_features != self.deployment.n_bs:
            raise ModelFormatError(f"{config.paths.rf_model}: forest expects {forest.n_features} ToAs, deployment has {self.deployment.n_bs}")
        return gp_models, forest

    def _estimate(self, row, record, gp_models, forest, knn, uq_seed):
        config = self.config
        try:
            gp_estimate = gp_sampling_uncertainty(
                gp_models,
                self.deployment,
                record.toa,
                config.num_samples,
                seeding.derive_seed(uq_seed, f"ue-{record.ue_index}"),
                config.solver,
            )
            p_rf, per_tree = rf.predict_rf(forest, record.toa)
            p_knn = rf.predict_knn(knn, record.toa)
            p_otdoa = otdoa.solve_from_distances(record.toa * SPEED_OF_LIGHT, self.deployment, config.solver)
        except PositioningError as e:
            raise type(e)(f"UE {record.ue_index}: {e}") from e

        self.sig.send(self, method=Method.GP.value, row=row, estimate=gp_estimate)
        self.sig.send(self, method=Method.RF.value, row=row, estimate=PositionEstimate.from_variance(p_rf, rf_ensemble_uncertainty(per_tree, p_rf), Method.RF))
        self.sig.send(self, method=Method.RF_CNK.value, row=row, estimate=PositionEstimate.from_variance(p_rf, cnk_uncertainty(p_rf, p_knn), Method.RF_CNK))
        self.sig.send(self, method="knn", row=row, estimate=p_knn)
        self.sig.send(self, method="otdoa", row=row, estimate=p_otdoa)

    def evaluate(self):
        config = self.config
        test = radio_sim.read_csv(config.paths.test_csv, self.deployment, SplitTag.TEST)
        if len(test) == 0:
            raise EmptySplitError(f"{config.paths.test_csv}: test split is empty")
        train = radio_sim.read_csv(config.paths.train_csv, self.deployment, SplitTag.TRAIN)
        gp_models, forest = self._load_models()
        knn = rf.fit_knn(train, config.knn_neighbors)

        collector = ReportCollector(len(test))
        self.sig.connect(collector.estimate_callback)
        uq_seed = self._seed("uncertainty")
        logger.info("pipeline: Evaluating %d test UEs with %d GP samples each", len(test), config.num_samples)
        try:
            with concurrent.futures.ThreadPoolExecutor(max_workers=config.workers) as pool:
                futures = [
                    pool.submit(self._estimate, row, record, gp_models, forest, knn, uq_seed)
                    for row, record in enumerate(test.records)
                ]
                for future in futures:
                    future.result()
        finally:
            self.sig.disconnect(collector.estimate_callback)

        estimates, baselines = collector.ordered()
        report = evaluation.build_report(estimates, test.positions, test.ue_indices, baselines)
        evaluation.write_report(report, config.paths.report)
        return report

    def report(self):
        return evaluation.read_summary(self.config.paths.summary_csv)
