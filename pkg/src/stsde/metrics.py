"""Forecast evaluation: MAE, RMSE, empirical CRPS, and mean interval score.

CRPS uses the exact pairwise form of the empirical-CDF integral; MIS takes
its interval bounds from linear-interpolation empirical quantiles. All four
are intended to run on denormalized values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatch


class Empty(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise Empty("no points to evaluate")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.abs(pred - truth).mean())


def rmse(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def _ensemble_and_truth(ensemble, truth, min_m: int):
    ensemble = np.asarray(ensemble, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if ensemble.ndim < 1 or ensemble.shape[1:] != truth.shape:
        raise ShapeMismatch(f"ensemble {ensemble.shape} vs truth {truth.shape}")
    m = ensemble.shape[0]
    if m == 0 or truth.size == 0:
        raise Empty("empty ensemble or truth")
    if m < min_m:
        raise TooFewSamples(f"need at least {min_m} samples, got {m}")
    return ensemble.reshape(m, -1), truth.reshape(-1)


def crps_empirical(ensemble, truth) -> float:
    """Exact CRPS of the empirical CDF, averaged over target points.

    Per scalar y: (1/m) sum_i |x_i - y| - (1/(2 m^2)) sum_ij |x_i - x_j|.
    """
    ens, y = _ensemble_and_truth(ensemble, truth, min_m=1)
    m, p = ens.shape
    total = 0.0
    # chunk the flattened points so the m x m block stays small
    step = max(1, 1_000_000 // (m * m))
    for lo in range(0, p, step):
        e = ens[:, lo : lo + step]
        term1 = np.abs(e - y[lo : lo + step]).mean(axis=0)
        term2 = np.abs(e[:, None, :] - e[None, :, :]).mean(axis=(0, 1)) / 2.0
        total += float((term1 - term2).sum())
    return total / p


def interval_score(lower: float, upper: float, y: float, alpha: float) -> float:
    """Winkler interval score for a single (1 - alpha) interval."""
    score = upper - lower
    if y < lower:
        score += (2.0 / alpha) * (lower - y)
    elif y > upper:
        score += (2.0 / alpha) * (y - upper)
    return score


def mis(ensemble, truth, alpha: float = 0.05) -> float:
    """Mean interval score of the empirical alpha/2 .. 1-alpha/2 interval."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    ens, y = _ensemble_and_truth(ensemble, truth, min_m=2)
    lower = np.quantile(ens, alpha / 2.0, axis=0)
    upper = np.quantile(ens, 1.0 - alpha / 2.0, axis=0)
    width = upper - lower
    below = np.maximum(lower - y, 0.0)
    above = np.maximum(y - upper, 0.0)
    return float(np.mean(width + (2.0 / alpha) * (below + above)))


@dataclass(frozen=True)
class EvalReport:
    mae: float
    rmse: float
    crps: float
    crps_normalized: float
    mis: float
    n_points: int
    interval_alpha: float


def evaluate_ensemble(ensemble, truth, alpha: float = 0.05) -> EvalReport:
    """Deterministic metrics on the ensemble mean, probabilistic on the spread.

    A single-member ensemble still yields a report (CRPS degenerates to MAE);
    its mis is nan because an interval needs at least two members.
    """
    ens = np.asarray(ensemble, dtype=np.float64)
    truth_arr = np.asarray(truth, dtype=np.float64)
    point = ens.mean(axis=0)
    scale = float(np.abs(truth_arr).mean()) if truth_arr.size else 0.0
    crps = crps_empirical(ens, truth_arr)
    return EvalReport(
        mae=mae(point, truth_arr),
        rmse=rmse(point, truth_arr),
        crps=crps,
        crps_normalized=crps / scale if scale > 0 else float("nan"),
        mis=mis(ens, truth_arr, alpha) if ens.shape[0] >= 2 else float("nan"),
        n_points=int(truth_arr.size),
        interval_alpha=alpha,
    )


_REPORT_METRICS = ("mae", "rmse", "crps", "crps_normalized", "mis")


def write_report(report: EvalReport, path, n_samples: int, mode_flags: dict | None = None) -> None:
    """Five `metric,value` rows under a `# key=value,...` metadata header."""
    meta = {"n_samples": n_samples, "n_points": report.n_points, "alpha": report.interval_alpha}
    meta.update(mode_flags or {})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + ",".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name in _REPORT_METRICS:
            writer.writerow([name, repr(float(getattr(report, name)))])


def read_report(path) -> tuple[dict, dict]:
    """Inverse of write_report: (metadata strings, metric floats)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError("report is missing its metadata header")
    meta = {}
    for part in lines[0].lstrip("#").strip().split(","):
        key, _, value = part.partition("=")
        meta[key.strip()] = value
    rows = list(csv.reader(lines[1:]))
    if rows[0] != ["metric", "value"]:
        raise ValueError("report is missing the metric,value header row")
    metrics = {name: float(value) for name, value in rows[1:]}
    return meta, metrics
