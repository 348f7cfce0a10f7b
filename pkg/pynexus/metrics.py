"""Forecast skill metrics.

All metrics flatten their inputs and pool every sample; ``metrics_report``
computes them per species over all windows and sites.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from pynexus.data import POLLUTANTS
from pynexus.tensor import Array


logger = logging.getLogger("pynexus.metrics")

METRIC_NAMES = ("r2", "rmse", "mae", "smape_pct", "ioa", "nse")


class UndefinedVarianceError(ValueError):
    pass


def _pair(y: ArrayLike, y_hat: ArrayLike) -> tuple[Array, Array]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError(f"Shapes differ: {y.shape} and {y_hat.shape}")
    if not y.size:
        raise ValueError("Metrics need at least one sample")
    return y, y_hat


def _efficiency(y: Array, y_hat: Array) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedVarianceError("Observations have zero variance")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


def r2(y: ArrayLike, y_hat: ArrayLike) -> float:
    return _efficiency(*_pair(y, y_hat))


def nse(y: ArrayLike, y_hat: ArrayLike) -> float:
    """Nash-Sutcliffe efficiency, the same quantity as ``r2``."""
    return _efficiency(*_pair(y, y_hat))


def rmse(y: ArrayLike, y_hat: ArrayLike) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y: ArrayLike, y_hat: ArrayLike) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def smape(y: ArrayLike, y_hat: ArrayLike) -> float:
    """Symmetric MAPE in percent; pairs where both values are zero count as 0."""
    y, y_hat = _pair(y, y_hat)
    denom = (np.abs(y) + np.abs(y_hat)) / 2
    safe = np.where(denom == 0, 1.0, denom)
    terms = np.where(denom == 0, 0.0, np.abs(y - y_hat) / safe)
    return float(100.0 * terms.mean())


def ioa(y: ArrayLike, y_hat: ArrayLike) -> float:
    """Willmott's index of agreement."""
    y, y_hat = _pair(y, y_hat)
    mean = y.mean()
    potential = float(np.sum((np.abs(y_hat - mean) + np.abs(y - mean)) ** 2))
    if potential == 0.0:
        return 1.0
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / potential


METRICS: dict[str, Callable[[ArrayLike, ArrayLike], float]] = {
    "r2": r2,
    "rmse": rmse,
    "mae": mae,
    "smape_pct": smape,
    "ioa": ioa,
    "nse": nse,
}


@dataclass
class MetricsReport:
    species: dict[str, dict[str, float]]
    n_samples: int
    averages: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.averages:
            self.averages = {
                name: float(np.mean([m[name] for m in self.species.values()]))
                for name in METRIC_NAMES
            }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"species": name, **values, "n_samples": self.n_samples}
            for name, values in self.species.items()
        ]
        rows.append({"species": "mean", **self.averages, "n_samples": self.n_samples})
        return pd.DataFrame(rows, columns=["species", *METRIC_NAMES, "n_samples"])


def metrics_report(
    y: ArrayLike, y_hat: ArrayLike, species: Sequence[str] = POLLUTANTS
) -> MetricsReport:
    """Metrics per species; the last axis of ``y`` and ``y_hat`` indexes species."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.shape[-1] != len(species):
        raise ValueError(f"Expected (..., {len(species)}) arrays, got {y.shape}")
    table: dict[str, dict[str, float]] = {}
    for k, name in enumerate(species):
        values = {}
        for metric, fn in METRICS.items():
            try:
                values[metric] = fn(y[..., k], y_hat[..., k])
            except UndefinedVarianceError:
                logger.warning(f"{metric} is undefined for constant {name}")
                values[metric] = float("nan")
        table[name] = values
    return MetricsReport(table, int(y[..., 0].size))


def improvement_pct(model: float, baseline: float, higher_is_better: bool) -> float:
    """Relative improvement of ``model`` over ``baseline`` in percent."""
    if baseline == 0:
        return float("nan")
    change = (model - baseline) if higher_is_better else (baseline - model)
    return 100.0 * change / abs(baseline)
