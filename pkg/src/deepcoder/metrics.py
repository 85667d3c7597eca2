"""Evaluation metrics: ICC(3,1), MSE, ordinal accuracy, NLPD.

Degenerate ICC inputs raise UndefinedMetricError; report assembly
records those outputs as missing instead of coercing them to zero, and
averages run over the defined outputs only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DeepCoderError, InvalidArgumentError


class UndefinedMetricError(DeepCoderError):
    """The metric has no defined value for these inputs."""


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise InvalidArgumentError(
            f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    return pred, truth


def icc31(pred, truth) -> float:
    """Intra-class correlation ICC(3,1) of two rating series.

    Parameters
    ----------
    pred, truth : array_like, shape (n,)
        The two raters' scores over the same n targets.

    Returns
    -------
    float
        (BMS - EMS) / (BMS + (k-1) EMS) with k=2, from the two-way
        ANOVA decomposition (targets x raters, no interaction).

    Raises
    ------
    UndefinedMetricError
        If n < 2, both series are constant, or the denominator vanishes.
    """
    x, y = _pair(pred, truth)
    n = x.shape[0]
    if n < 2:
        raise UndefinedMetricError(f"ICC needs n >= 2, got {n}")
    data = np.stack([x, y], axis=1)  # [n targets, k raters]
    k = 2
    grand = data.mean()
    row_means = data.mean(axis=1)
    col_means = data.mean(axis=0)
    ss_total = np.sum((data - grand) ** 2)
    ss_rows = k * np.sum((row_means - grand) ** 2)
    ss_cols = n * np.sum((col_means - grand) ** 2)
    ss_err = ss_total - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    if denom <= 0.0 or not np.isfinite(denom):
        raise UndefinedMetricError("zero variance in both series")
    return float((bms - ems) / denom)


def mse(pred, truth) -> float:
    """Mean squared difference."""
    x, y = _pair(pred, truth)
    if x.shape[0] < 1:
        raise InvalidArgumentError("mse needs at least one sample")
    return float(np.mean((x - y) ** 2))


def ordinal_accuracy(pred, truth) -> float:
    """Fraction of exact level matches."""
    x, y = _pair(pred, truth)
    if x.shape[0] < 1:
        raise InvalidArgumentError("accuracy needs at least one sample")
    return float(np.mean(x == y))


def nlpd(z_true, pred_mean, pred_var) -> float:
    """Mean negative Gaussian log-density of z_true under the prediction.

    pred_var may be per point ([m]) or per point and dimension; it is
    broadcast against z_true.
    """
    z_true = np.atleast_2d(np.asarray(z_true, dtype=np.float64))
    pred_mean = np.atleast_2d(np.asarray(pred_mean, dtype=np.float64))
    pred_var = np.asarray(pred_var, dtype=np.float64)
    if pred_var.ndim == 1:
        pred_var = pred_var[:, None]
    if z_true.shape != pred_mean.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {z_true.shape} vs {pred_mean.shape}")
    if np.any(pred_var <= 0.0):
        raise InvalidArgumentError("predictive variances must be positive")
    dens = 0.5 * (np.log(2.0 * np.pi * pred_var)
                  + (z_true - pred_mean) ** 2 / pred_var)
    return float(np.mean(dens))


@dataclass
class MetricReport:
    """Per-output and averaged metrics of one evaluation pass."""

    per_output_icc: list[float | None]
    per_output_mse: list[float]
    per_output_accuracy: list[float]
    nlpd: float
    n_samples: int

    @property
    def avg_icc(self) -> float | None:
        defined = [v for v in self.per_output_icc if v is not None]
        return float(np.mean(defined)) if defined else None

    @property
    def avg_mse(self) -> float:
        return float(np.mean(self.per_output_mse))

    @property
    def avg_accuracy(self) -> float:
        return float(np.mean(self.per_output_accuracy))

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_outputs": len(self.per_output_mse),
            "per_output": {
                "icc": self.per_output_icc,
                "mse": self.per_output_mse,
                "accuracy": self.per_output_accuracy,
            },
            "average": {
                "icc": self.avg_icc,
                "mse": self.avg_mse,
                "accuracy": self.avg_accuracy,
            },
            "nlpd": self.nlpd,
        }


def build_report(pred_levels: np.ndarray, true_levels: np.ndarray,
                 z0_true: np.ndarray, z0_pred_mean: np.ndarray,
                 z0_pred_var: np.ndarray) -> MetricReport:
    """Assemble the report; ICC outputs that are undefined become None."""
    pred_levels = np.asarray(pred_levels)
    true_levels = np.asarray(true_levels)
    if pred_levels.shape != true_levels.shape or pred_levels.ndim != 2:
        raise InvalidArgumentError(
            f"level arrays must share a 2-D shape, got {pred_levels.shape} "
            f"vs {true_levels.shape}")
    iccs: list[float | None] = []
    mses: list[float] = []
    accs: list[float] = []
    for q in range(pred_levels.shape[1]):
        p, t = pred_levels[:, q], true_levels[:, q]
        try:
            iccs.append(icc31(p, t))
        except UndefinedMetricError:
            iccs.append(None)
        mses.append(mse(p, t))
        accs.append(ordinal_accuracy(p, t))
    return MetricReport(
        per_output_icc=iccs, per_output_mse=mses, per_output_accuracy=accs,
        nlpd=nlpd(z0_true, z0_pred_mean, z0_pred_var),
        n_samples=int(pred_levels.shape[0]))
