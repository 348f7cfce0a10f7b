"""Spatiotemporal pollution patterns: composite index, diurnal and monthly
cycles, weather regimes, driver correlations, hotspots and residual
diagnostics.

Every function returns plot-ready ``pandas`` tables.
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from scipy import stats

from pynexus.data import POLLUTANTS, AlignedDataset
from pynexus.metrics import UndefinedVarianceError
from pynexus.tensor import Array, ConfigurationError


logger = logging.getLogger("pynexus.analysis")

DRIVERS = ("skt", "wind_speed", "tp", "ssr", "u10", "v10")
DIURNAL_BINS = tuple(f"{h:02d}-{h + 3:02d}" for h in range(0, 24, 3))
QUARTILES = ("Q1", "Q2", "Q3", "Q4")


def composite_pollution(
    co: ArrayLike, no: ArrayLike, so2: ArrayLike, maxima: Mapping[str, float]
) -> Array:
    """Sum of species values each divided by its training-span maximum."""
    for name in POLLUTANTS:
        if maxima.get(name, 0.0) <= 0:
            raise ConfigurationError(f"Maximum of {name} should be positive")
    return (
        np.asarray(co, dtype=np.float64) / maxima["co"]
        + np.asarray(no, dtype=np.float64) / maxima["no"]
        + np.asarray(so2, dtype=np.float64) / maxima["so2"]
    )


def composite_series(dataset: AlignedDataset, maxima: Mapping[str, float]) -> Array:
    """``L×N`` composite index of a dataset in physical units."""
    return composite_pollution(
        dataset.feature("co"), dataset.feature("no"), dataset.feature("so2"), maxima
    )


def _utc(timestamps: ArrayLike) -> pd.DatetimeIndex:
    return pd.DatetimeIndex(pd.to_datetime(timestamps, utc=True))


def diurnal_profile(series: ArrayLike, timestamps: ArrayLike) -> pd.Series:
    """Means in the eight 3-hour UTC bins ``00-03`` … ``21-24``."""
    hours = _utc(timestamps).hour.to_numpy()
    values = pd.Series(np.asarray(series, dtype=np.float64).reshape(-1))
    means = values.groupby(hours // 3).mean().reindex(range(8))
    means.index = pd.Index(DIURNAL_BINS, name="bin")
    return means


def monthly_means(series: ArrayLike, timestamps: ArrayLike) -> pd.Series:
    """Means per calendar month ``1…12``; months without data are NaN."""
    months = _utc(timestamps).month.to_numpy()
    values = pd.Series(np.asarray(series, dtype=np.float64).reshape(-1))
    means = values.groupby(months).mean().reindex(range(1, 13))
    means.index = pd.Index(range(1, 13), name="month")
    absent = [int(m) for m in means.index[means.isna()]]
    if absent:
        logger.debug(f"No data for months {absent}")
    return means


def quartile_bounds(values: ArrayLike) -> Array:
    """Quartile boundaries with linearly interpolated order statistics."""
    return np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])


def assign_quartile(values: ArrayLike, bounds: Array) -> Array:
    """Quartile index 0…3; a value on a boundary belongs to the upper quartile."""
    return np.searchsorted(bounds, np.asarray(values), side="right")


@dataclass
class RegimeTable:
    temperature_bounds: Array
    wind_bounds: Array
    counts: pd.DataFrame
    means: dict[str, pd.DataFrame]
    site_means: pd.DataFrame | None = None

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, t_label in enumerate(QUARTILES):
            for j, w_label in enumerate(QUARTILES):
                row = {
                    "temp_quartile": t_label,
                    "wind_quartile": w_label,
                    "temp_low": _bound(self.temperature_bounds, i),
                    "temp_high": _bound(self.temperature_bounds, i + 1),
                    "wind_low": _bound(self.wind_bounds, j),
                    "wind_high": _bound(self.wind_bounds, j + 1),
                    "count": int(self.counts.iat[i, j]),
                }
                for name, table in self.means.items():
                    row[name] = table.iat[i, j]
                rows.append(row)
        return pd.DataFrame(rows)


def _bound(bounds: Array, index: int) -> float:
    if index == 0:
        return float("-inf")
    if index == 4:
        return float("inf")
    return float(bounds[index - 1])


def regime_stratify(
    pollutants: Mapping[str, ArrayLike],
    temperature: ArrayLike,
    wind: ArrayLike,
    site_ids: ArrayLike | None = None,
) -> RegimeTable:
    """Mean pollution in each temperature quartile × wind-speed quartile cell."""
    temperature = np.asarray(temperature, dtype=np.float64).reshape(-1)
    wind = np.asarray(wind, dtype=np.float64).reshape(-1)
    t_bounds, w_bounds = quartile_bounds(temperature), quartile_bounds(wind)
    frame = pd.DataFrame(
        {
            "temp_quartile": assign_quartile(temperature, t_bounds),
            "wind_quartile": assign_quartile(wind, w_bounds),
        }
    )
    for name, values in pollutants.items():
        frame[name] = np.asarray(values, dtype=np.float64).reshape(-1)
    cells = pd.MultiIndex.from_product([range(4), range(4)])
    grouped = frame.groupby(["temp_quartile", "wind_quartile"])

    def as_grid(series: pd.Series) -> pd.DataFrame:
        grid = series.reindex(cells).to_numpy().reshape(4, 4)
        return pd.DataFrame(grid, index=QUARTILES, columns=QUARTILES)

    counts = as_grid(grouped.size()).fillna(0).astype(int)
    means = {name: as_grid(grouped[name].mean()) for name in pollutants}

    site_means = None
    if site_ids is not None:
        frame["site_id"] = np.asarray(site_ids).reshape(-1)
        site_means = (
            frame.groupby(["temp_quartile", "wind_quartile", "site_id"])[
                list(pollutants)
            ]
            .mean()
            .reset_index()
        )
        for column in ("temp_quartile", "wind_quartile"):
            site_means[column] = [QUARTILES[q] for q in site_means[column]]
    return RegimeTable(t_bounds, w_bounds, counts, means, site_means)


def regime_table(dataset: AlignedDataset) -> RegimeTable:
    n_steps = dataset.n_timestamps
    return regime_stratify(
        {name: dataset.feature(name) for name in POLLUTANTS},
        dataset.feature("skt"),
        dataset.feature("wind_speed"),
        site_ids=np.repeat(dataset.site_ids, n_steps),
    )


def pearson_correlation(x: ArrayLike, y: ArrayLike) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedVarianceError("Correlation needs two non-constant series")
    r, _ = stats.pearsonr(x, y)
    return float(r)


def correlation_table(
    dataset: AlignedDataset, drivers: Sequence[str] = DRIVERS
) -> pd.DataFrame:
    rows = []
    for pollutant in POLLUTANTS:
        for driver in drivers:
            try:
                r = pearson_correlation(
                    dataset.feature(pollutant), dataset.feature(driver)
                )
            except UndefinedVarianceError:
                r = float("nan")
            rows.append({"pollutant": pollutant, "driver": driver, "r": r})
    return pd.DataFrame(rows, columns=["pollutant", "driver", "r"])


def residual_diagnostics(y: ArrayLike, y_hat: ArrayLike) -> pd.DataFrame:
    """Residual, normal Q-Q and scale-location columns, one row per sample.

    The Q-Q columns pair the i-th theoretical normal quantile with the i-th
    smallest standardized residual.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError(f"Shapes differ: {y.shape} and {y_hat.shape}")
    residual = y - y_hat
    std = residual.std()
    standardized = (residual - residual.mean()) / std if std > 0 else residual * 0.0
    n = len(residual)
    positions = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    return pd.DataFrame(
        {
            "observed": y,
            "fitted": y_hat,
            "residual": residual,
            "standardized": standardized,
            "theoretical_quantile": stats.norm.ppf(positions),
            "sample_quantile": np.sort(standardized),
            "sqrt_abs_standardized": np.sqrt(np.abs(standardized)),
        }
    )


def qq_slope(diagnostics: pd.DataFrame) -> float:
    slope, _ = np.polyfit(
        diagnostics["theoretical_quantile"], diagnostics["sample_quantile"], 1
    )
    return float(slope)


def spatial_gradient(
    dataset: AlignedDataset, maxima: Mapping[str, float]
) -> pd.DataFrame:
    """Mean composite pollution per site relative to the cleanest site."""
    means = composite_series(dataset, maxima).mean(axis=1)
    cleanest = float(means.min())
    if cleanest > 0:
        ratios = means / cleanest
    else:
        logger.warning(f"Cleanest site mean composite is {cleanest:.3g}, no ratios")
        ratios = np.full_like(means, np.nan)
    return pd.DataFrame(
        {
            "site_id": dataset.site_ids,
            "lat": dataset.lat,
            "lon": dataset.lon,
            "mean_composite": means,
            "ratio_to_cleanest": ratios,
        }
    )


def hotspot_ranking(
    dataset: AlignedDataset, maxima: Mapping[str, float], quantile: float = 0.75
) -> pd.DataFrame:
    """Sites ranked by mean composite pollution within each weather regime.

    A site is a hotspot of a regime when its mean exceeds the ``quantile`` of
    all site means in that regime.
    """
    if not 0.0 < quantile < 1.0:
        raise ConfigurationError(f"Quantile should be in (0, 1), got {quantile}")
    temperature = dataset.feature("skt").reshape(-1)
    wind = dataset.feature("wind_speed").reshape(-1)
    frame = pd.DataFrame(
        {
            "temp_quartile": assign_quartile(temperature, quartile_bounds(temperature)),
            "wind_quartile": assign_quartile(wind, quartile_bounds(wind)),
            "site_id": np.repeat(dataset.site_ids, dataset.n_timestamps),
            "composite": composite_series(dataset, maxima).reshape(-1),
        }
    )
    regime = ["temp_quartile", "wind_quartile"]
    table = (
        frame.groupby([*regime, "site_id"])["composite"]
        .mean()
        .rename("mean_composite")
        .reset_index()
    )
    by_regime = table.groupby(regime)["mean_composite"]
    table["rank"] = by_regime.rank(ascending=False, method="min").astype(int)
    table["threshold"] = by_regime.transform(lambda means: means.quantile(quantile))
    table["hotspot"] = table["mean_composite"] > table["threshold"]
    table = table.sort_values([*regime, "rank"], ignore_index=True)
    for column in regime:
        table[column] = [QUARTILES[q] for q in table[column]]
    logger.debug(f"{int(table['hotspot'].sum())} hotspot cells in {len(table)} rows")
    return table

