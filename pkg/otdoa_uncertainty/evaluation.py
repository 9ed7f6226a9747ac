"""Positioning-error statistics and uncertainty-quality scoring.

The per-UE "RMSE" is the 2D Euclidean error of the single estimate. Uncertainty
quality is the Pearson correlation between the combined metric c and that error,
pooled over the test set, one pair per UE.
"""

import csv
import dataclasses
import logging
import math

import numpy as np

from .errors import InvalidInputError, StageInputError, StageOutputError, UndefinedCorrelationError

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ["method", "correlation", "median_error_m", "p90_error_m"]
REPORT_HEADER = ["method", "ue_index", "error_m", "uncertainty_m"]
ESTIMATES_HEADER = ["method", "ue_index", "est_x", "est_y", "true_x", "true_y", "uncertainty_m"]


def position_error(p_hat, truth):
    diff = np.asarray(p_hat, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise InvalidInputError("Non-finite position")
    return float(math.hypot(diff[0], diff[1]))


def empirical_cdf(values):
    values = np.sort(np.asarray(values, dtype=np.float64))
    if len(values) == 0:
        raise InvalidInputError("CDF of an empty list")
    n = len(values)
    return [(float(v), (i + 1) / n) for i, v in enumerate(values)]


def pearson_correlation(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise InvalidInputError(f"Correlation needs two equal-length lists of >= 2 values, got {len(a)} and {len(b)}")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("Correlation is undefined for a constant list")
    return max(-1.0, min(1.0, float(da @ db) / (sa * sb)))


@dataclasses.dataclass(frozen=True)
class MethodReport:
    ue_indices: np.ndarray
    estimates: np.ndarray  # (M, 2)
    truths: np.ndarray  # (M, 2)
    per_ue_errors: np.ndarray
    per_ue_uncertainty: np.ndarray | None  # None for position-only baselines
    correlation: float  # nan when undefined or not applicable
    cdf: list[tuple[float, float]]

    @property
    def correlation_defined(self):
        return not math.isnan(self.correlation)

    @property
    def scatter(self):
        """(error, uncertainty) pairs, one per UE."""
        if self.per_ue_uncertainty is None:
            return []
        return list(zip(self.per_ue_errors.tolist(), self.per_ue_uncertainty.tolist()))

    def percentile_error(self, q):
        return float(np.percentile(self.per_ue_errors, q))


@dataclasses.dataclass(frozen=True)
class EvaluationReport:
    per_method: dict[str, MethodReport]
    baselines: dict[str, MethodReport]


def _method_report(ue_indices, positions, truths, uncertainty, name):
    errors = np.array([position_error(p, t) for p, t in zip(positions, truths, strict=True)])
    correlation = math.nan
    if uncertainty is not None:
        try:
            correlation = pearson_correlation(uncertainty, errors)
        except UndefinedCorrelationError as e:
            logger.warning("eval: %s: %s", name, e)
    return MethodReport(
        np.asarray(ue_indices),
        np.asarray(positions, dtype=np.float64).reshape(-1, 2),
        np.asarray(truths, dtype=np.float64).reshape(-1, 2),
        errors,
        uncertainty,
        correlation,
        empirical_cdf(errors),
    )


def build_report(estimates, truths, ue_indices=None, baselines=None):
    """Score each method's estimates (one per test UE, in ``truths`` order)."""
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    if ue_indices is None:
        ue_indices = np.arange(len(truths))

    per_method = {}
    for name, method_estimates in estimates.items():
        if len(method_estimates) != len(truths):
            raise InvalidInputError(f"{name}: {len(method_estimates)} estimates for {len(truths)} UEs")
        positions = np.array([e.position for e in method_estimates])
        uncertainty = np.array([e.combined for e in method_estimates])
        per_method[name] = _method_report(ue_indices, positions, truths, uncertainty, name)
        logger.info(
            "eval: %s: median error %.3f m, correlation %.4f",
            name,
            per_method[name].percentile_error(50),
            per_method[name].correlation,
        )

    baseline_reports = {}
    for name, positions in (baselines or {}).items():
        if len(positions) != len(truths):
            raise InvalidInputError(f"{name}: {len(positions)} estimates for {len(truths)} UEs")
        baseline_reports[name] = _method_report(ue_indices, positions, truths, None, name)
        logger.info("eval: %s: median error %.3f m", name, baseline_reports[name].percentile_error(50))

    return EvaluationReport(per_method, baseline_reports)


def _fmt(value):
    return repr(float(value))


def _write_rows(path, header, rows):
    try:
        with path.open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise StageOutputError(f"Cannot write {path}: {e}") from e


def write_report(report, directory):
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StageOutputError(f"Cannot create report directory {directory}: {e}") from e

    _write_rows(
        directory / "report.csv",
        REPORT_HEADER,
        [
            [name, int(ue), _fmt(m.per_ue_errors[i]), _fmt(m.per_ue_uncertainty[i])]
            for name, m in report.per_method.items()
            for i, ue in enumerate(m.ue_indices)
        ],
    )

    # Estimated and true positions for every method, baselines included, so the
    # uncertainty circle around each estimate can be drawn.
    every = {**report.per_method, **report.baselines}
    rows = []
    for name, m in every.items():
        for i, ue in enumerate(m.ue_indices):
            uncertainty = "" if m.per_ue_uncertainty is None else _fmt(m.per_ue_uncertainty[i])
            rows.append(
                [
                    name,
                    int(ue),
                    _fmt(m.estimates[i, 0]),
                    _fmt(m.estimates[i, 1]),
                    _fmt(m.truths[i, 0]),
                    _fmt(m.truths[i, 1]),
                    uncertainty,
                ]
            )
    _write_rows(directory / "estimates.csv", ESTIMATES_HEADER, rows)

    for name, m in every.items():
        _write_rows(directory / f"cdf_{name}.csv", ["error_m", "probability"], [[_fmt(e), _fmt(p)] for e, p in m.cdf])

    for name, m in report.per_method.items():
        _write_rows(directory / f"scatter_{name}.csv", ["error_m", "uncertainty_m"], [[_fmt(e), _fmt(u)] for e, u in m.scatter])

    _write_rows(
        directory / "summary.csv",
        SUMMARY_HEADER,
        [
            [name, _fmt(m.correlation), _fmt(m.percentile_error(50)), _fmt(m.percentile_error(90))]
            for name, m in report.per_method.items()
        ],
    )

    _write_rows(
        directory / "errors.csv",
        ["method", "median_error_m", "p90_error_m", "rmse_m"],
        [
            [
                name,
                _fmt(m.percentile_error(50)),
                _fmt(m.percentile_error(90)),
                _fmt(math.sqrt(float(np.mean(m.per_ue_errors**2)))),
            ]
            for name, m in every.items()
        ],
    )
    logger.info("eval: Wrote report for %d methods to %s", len(every), directory)


def read_summary(path):
    if not path.exists():
        raise StageInputError(f"Summary {path} not found; run `evaluate` first")
    with path.open(newline="") as f:
        return list(csv.DictReader(f))
