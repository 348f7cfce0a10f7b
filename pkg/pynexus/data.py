"""Site time series ingestion, alignment and supervised windows.

Raw CSV rows are hourly meteorology at grid sites and 3-hourly pollutant
mixing ratios at monitoring sites. ``prepare`` aggregates meteorology to the
pollutant stamps, interpolates it onto the monitoring sites, drops incomplete
timestamps, splits the series in time and fits robust normalization on the
training span only.
"""

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, overload

import numpy as np
import pandas as pd
import pydantic
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike

from pynexus.tensor import Array, ConfigurationError


logger = logging.getLogger("pynexus.data")

RAW_COLUMNS = (
    "timestamp",
    "site_id",
    "lat",
    "lon",
    "co",
    "no",
    "so2",
    "tp",
    "ssr",
    "u10",
    "v10",
    "skt",
)
POLLUTANTS = ("co", "no", "so2")
RAW_MET = ("tp", "ssr", "u10", "v10", "skt")
MET_FEATURES = ("tp", "ssr", "u10", "v10", "wind_speed", "skt")
FEATURES = POLLUTANTS + MET_FEATURES
STEP = pd.Timedelta(hours=3)
EARTH_RADIUS_M = 6_371_008.8
CONSTANT_IQR = 1e-12
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
ALIGNED_CSV = "aligned.csv"
STATS_JSON = "stats.json"
QC_REPORT_JSON = "qc_report.json"


class IngestionError(Exception):
    pass


class GapError(Exception):
    pass


class DataConfig(pydantic.BaseModel):
    idw_power: float = pydantic.Field(2.0, gt=0.0)
    collocation_m: float = pydantic.Field(1.0, ge=0.0)
    horizon: int = pydantic.Field(1, ge=1)

    class Config:
        extra = "forbid"


class SplitConfig(pydantic.BaseModel):
    """Date boundaries, or fractions of the timeline when both are set."""

    train_end: datetime = datetime(2021, 1, 1, tzinfo=timezone.utc)
    val_end: datetime = datetime(2021, 7, 1, tzinfo=timezone.utc)
    train_frac: float | None = pydantic.Field(None, gt=0.0, lt=1.0)
    val_frac: float | None = pydantic.Field(None, ge=0.0, lt=1.0)

    class Config:
        extra = "forbid"

    @pydantic.validator("train_end", "val_end")
    def check_utc(cls, value: datetime) -> datetime:
        if value.tzinfo is None:
            return value.replace(tzinfo=timezone.utc)
        return value

    @pydantic.root_validator(skip_on_failure=True)
    def check_order(cls, values: dict) -> dict:
        if values["train_end"] > values["val_end"]:
            raise ValueError("train_end should not be later than val_end")
        train_frac, val_frac = values["train_frac"], values["val_frac"]
        if (train_frac is None) != (val_frac is None):
            raise ValueError("train_frac and val_frac should be set together")
        if train_frac is not None and train_frac + val_frac > 1.0:
            raise ValueError("train_frac + val_frac should not exceed 1")
        return values

    @property
    def fractional(self) -> bool:
        return self.train_frac is not None


class QCReport(pydantic.BaseModel):
    n_input_timestamps: int
    n_dropped: int
    dropped_timestamps: list[str] = []
    missing_by_feature: dict[str, int] = {}
    pollutant_sites: list[str] = []
    met_sites: list[str] = []
    split: dict[str, int] = {}


class NormalizationStats(pydantic.BaseModel):
    features: list[str]
    median: list[float]
    iqr: list[float]
    scale: list[float]
    constant: list[bool]
    maxima: dict[str, float] = {}

    class Config:
        extra = "forbid"

    def index(self, features: Sequence[str]) -> list[int]:
        try:
            return [self.features.index(name) for name in features]
        except ValueError as e:
            raise ConfigurationError(f"Unknown feature: {e}") from e


@dataclass
class RawRecord:
    timestamp: datetime
    site_id: str
    lat: float
    lon: float
    co: float | None = None
    no: float | None = None
    so2: float | None = None
    tp: float | None = None
    ssr: float | None = None
    u10: float | None = None
    v10: float | None = None
    skt: float | None = None


@dataclass
class AlignedDataset:
    site_ids: list[str]
    lat: Array
    lon: Array
    timestamps: pd.DatetimeIndex
    features: Array
    feature_names: tuple[str, ...] = FEATURES
    normalization: NormalizationStats | None = None

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    @property
    def n_timestamps(self) -> int:
        return len(self.timestamps)

    def subset(self, index: slice) -> "AlignedDataset":
        return AlignedDataset(
            self.site_ids,
            self.lat,
            self.lon,
            self.timestamps[index],
            self.features[:, index],
            self.feature_names,
            self.normalization,
        )

    def normalized(self, stats: NormalizationStats) -> "AlignedDataset":
        idx = stats.index(self.feature_names)
        median = np.array(stats.median)[idx]
        iqr = np.array(stats.iqr)[idx]
        values = robust_normalize(self.features, median, iqr)
        return AlignedDataset(
            self.site_ids,
            self.lat,
            self.lon,
            self.timestamps,
            values,
            self.feature_names,
            stats,
        )

    def feature(self, name: str) -> Array:
        """``L×N`` values of one feature."""
        return self.features[:, :, self.feature_names.index(name)]

    def stacked_timestamps(self) -> pd.DatetimeIndex:
        """Timestamps matching a row-major flattening of an ``L×N`` array."""
        return self.timestamps[np.tile(np.arange(self.n_timestamps), self.n_sites)]

    def to_frame(self) -> pd.DataFrame:
        n_sites, n_steps, _ = self.features.shape
        frame = pd.DataFrame(
            self.features.reshape(n_sites * n_steps, -1),
            columns=list(self.feature_names),
        )
        frame.insert(0, "timestamp", self.stacked_timestamps())
        frame.insert(1, "site_id", np.repeat(self.site_ids, n_steps))
        frame.insert(2, "lat", np.repeat(self.lat, n_steps))
        frame.insert(3, "lon", np.repeat(self.lon, n_steps))
        return frame.sort_values(["timestamp", "site_id"], kind="stable")


@dataclass
class WindowSample:
    x: Array
    y: Array
    t_target: pd.Timestamp


@dataclass
class PreparedData:
    dataset: AlignedDataset
    stats: NormalizationStats
    train_end: int
    val_end: int
    qc: QCReport

    def splits(self) -> tuple[AlignedDataset, AlignedDataset, AlignedDataset]:
        normalized = self.dataset.normalized(self.stats)
        return (
            normalized.subset(slice(0, self.train_end)),
            normalized.subset(slice(self.train_end, self.val_end)),
            normalized.subset(slice(self.val_end, None)),
        )


def compute_wind_speed(u: ArrayLike, v: ArrayLike) -> Any:
    return np.hypot(u, v)


def haversine(
    lat1: ArrayLike, lon1: ArrayLike, lat2: ArrayLike, lon2: ArrayLike
) -> Array:
    """Great-circle distance in meters."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def idw_weights(distances: Array, power: float = 2.0) -> Array:
    with np.errstate(divide="ignore"):
        return np.asarray(distances, dtype=np.float64) ** -power


def idw_align(
    values: Array,
    source_coords: Array,
    target_coords: Array,
    power: float = 2.0,
    collocation_m: float = 1.0,
    strict: bool = False,
) -> Array:
    """Inverse distance weighted values at target sites.

    ``values`` has the source site on axis 0 and any trailing shape; coordinates
    are ``(n, 2)`` arrays of ``(lat, lon)``. Missing source values are left out of
    the weighted mean; a target within ``collocation_m`` of a source takes that
    source's value exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    source_coords = np.atleast_2d(source_coords)
    target_coords = np.atleast_2d(target_coords)
    if values.shape[0] == 0:
        raise ConfigurationError("IDW needs at least one source site")
    distances = haversine(
        target_coords[:, None, 0],
        target_coords[:, None, 1],
        source_coords[None, :, 0],
        source_coords[None, :, 1],
    )
    present = ~np.isnan(values)
    filled = np.where(present, values, 0.0)
    expand = (slice(None),) + (None,) * (values.ndim - 1)
    out = np.empty((len(target_coords),) + values.shape[1:])
    for g, d in enumerate(distances):
        near = np.flatnonzero(d < collocation_m)
        if near.size:
            out[g] = values[near[np.argmin(d[near])]]
            continue
        w = idw_weights(d, power)[expand]
        den = (present * w).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[g] = np.where(den > 0, (filled * w).sum(axis=0) / den, np.nan)
    gaps = int(np.isnan(out).sum())
    if gaps:
        if strict:
            raise GapError(f"{gaps} interpolated values have no source data")
        logger.debug(f"IDW left {gaps} values without source data")
    return out


def aggregate_3hourly(hourly: pd.DataFrame) -> pd.DataFrame:
    """Aggregate an hourly frame with a UTC ``DatetimeIndex`` to 3-hour windows.

    A window covers the three hours up to and including its label, so the stamp
    of a window matches the pollutant stamp it precedes. Precipitation is summed,
    everything else averaged; windows without any data are left empty.

    A window with some hours missing sums only the hours present, so its
    precipitation total is a lower bound. The first stamp of a series covers
    a single hour when the hourly records start on a window boundary.
    """
    resampler = hourly.resample("3H", closed="right", label="right")
    columns = {}
    for name in hourly.columns:
        if name == "tp":
            columns[name] = resampler[name].sum(min_count=1)
        else:
            columns[name] = resampler[name].mean()
    return pd.DataFrame(columns, columns=list(hourly.columns))


def fit_robust_stats(values: ArrayLike) -> tuple[float, float]:
    """Median and interquartile range with linearly interpolated quartiles."""
    q25, q50, q75 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(q50), float(q75 - q25)


def robust_scale(iqr: ArrayLike) -> Array:
    iqr = np.asarray(iqr, dtype=np.float64)
    return np.where(iqr < CONSTANT_IQR, 1.0, iqr)


def robust_normalize(values: ArrayLike, median: ArrayLike, iqr: ArrayLike) -> Array:
    """``(x - median) / iqr`` along the last axis; constant features use scale 1."""
    values = np.asarray(values, dtype=np.float64)
    return (values - np.asarray(median)) / robust_scale(iqr)


def denormalize(
    values: ArrayLike, stats: NormalizationStats, features: Sequence[str]
) -> Array:
    idx = stats.index(features)
    scale = np.array(stats.scale)[idx]
    median = np.array(stats.median)[idx]
    return np.asarray(values, dtype=np.float64) * scale + median


def fit_normalization(train: AlignedDataset) -> NormalizationStats:
    if train.n_timestamps == 0:
        raise IngestionError("The training span is empty")
    medians, iqrs = [], []
    for i in range(len(train.feature_names)):
        median, iqr = fit_robust_stats(train.features[:, :, i].reshape(-1))
        medians.append(median)
        iqrs.append(iqr)
    constant = [iqr < CONSTANT_IQR for iqr in iqrs]
    for name, flag in zip(train.feature_names, constant):
        if flag:
            logger.warning(f"Feature {name} is constant over the training span")
    maxima = {
        name: float(train.feature(name).max())
        for name in POLLUTANTS
        if name in train.feature_names
    }
    return NormalizationStats(
        features=list(train.feature_names),
        median=medians,
        iqr=iqrs,
        scale=robust_scale(iqrs).tolist(),
        constant=constant,
        maxima=maxima,
    )


def quality_control(dataset: AlignedDataset) -> tuple[AlignedDataset, QCReport]:
    """Drop every timestamp with a missing feature at any site."""
    missing = np.isnan(dataset.features)
    incomplete = missing.any(axis=(0, 2))
    report = QCReport(
        n_input_timestamps=dataset.n_timestamps,
        n_dropped=int(incomplete.sum()),
        dropped_timestamps=[
            ts.strftime(TIMESTAMP_FORMAT) for ts in dataset.timestamps[incomplete]
        ],
        missing_by_feature={
            name: int(missing[:, :, i].sum())
            for i, name in enumerate(dataset.feature_names)
        },
    )
    if incomplete.all():
        raise IngestionError("No complete timestamps remain after quality control")
    keep = np.flatnonzero(~incomplete)
    cleaned = AlignedDataset(
        dataset.site_ids,
        dataset.lat,
        dataset.lon,
        dataset.timestamps[keep],
        dataset.features[:, keep],
        dataset.feature_names,
        dataset.normalization,
    )
    logger.info(
        f"Quality control dropped {report.n_dropped} of "
        f"{report.n_input_timestamps} timestamps"
    )
    return cleaned, report


def split_indices(timestamps: pd.DatetimeIndex, config: SplitConfig) -> tuple[int, int]:
    n = len(timestamps)
    if config.fractional:
        assert config.train_frac is not None and config.val_frac is not None
        train_end = int(round(config.train_frac * n))
        val_end = int(round((config.train_frac + config.val_frac) * n))
    else:
        train_end = int(timestamps.searchsorted(pd.Timestamp(config.train_end)))
        val_end = int(timestamps.searchsorted(pd.Timestamp(config.val_end)))
    if not 0 <= train_end <= val_end <= n:
        raise ConfigurationError(f"Overlapping split boundaries {train_end}, {val_end}")
    return train_end, val_end


def temporal_split(
    dataset: AlignedDataset, config: SplitConfig
) -> tuple[AlignedDataset, AlignedDataset, AlignedDataset]:
    """Contiguous train, validation and test spans.

    A timestamp equal to a boundary belongs to the later span.
    """
    train_end, val_end = split_indices(dataset.timestamps, config)
    return (
        dataset.subset(slice(0, train_end)),
        dataset.subset(slice(train_end, val_end)),
        dataset.subset(slice(val_end, None)),
    )


class WindowSet(Sequence[WindowSample]):
    """Stride-1 supervised windows over one split, as a view of its features.

    Windows whose span crosses a gap left by quality control are skipped.
    """

    def __init__(
        self,
        split: AlignedDataset,
        T: int,
        horizon: int = 1,
        n_targets: int = len(POLLUTANTS),
    ) -> None:
        self.split = split
        self.T = T
        self.horizon = horizon
        self.n_targets = n_targets
        n = split.n_timestamps
        span = T + horizon
        if n < span:
            self.starts = np.zeros(0, dtype=np.int64)
            self._view = np.zeros((split.n_sites, 0, split.features.shape[-1], T))
            return
        stamps = split.timestamps.asi8
        contiguous = np.diff(stamps) == STEP.value
        runs = sliding_window_view(contiguous, span - 1).all(axis=-1)
        self.starts = np.flatnonzero(runs)
        self._view = sliding_window_view(split.features, T, axis=1)
        skipped = len(runs) - len(self.starts)
        if skipped:
            logger.debug(f"Skipped {skipped} windows crossing gaps")

    def __len__(self) -> int:
        return len(self.starts)

    @overload
    def __getitem__(self, index: int) -> WindowSample:
        ...

    @overload
    def __getitem__(self, index: slice) -> list[WindowSample]:
        ...

    def __getitem__(self, index: int | slice) -> WindowSample | list[WindowSample]:
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        start = int(self.starts[index])
        target = start + self.T - 1 + self.horizon
        return WindowSample(
            x=np.ascontiguousarray(self._view[:, start].swapaxes(-1, -2)),
            y=self.split.features[:, target, : self.n_targets].copy(),
            t_target=self.split.timestamps[target],
        )

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]

    def target_index(self, indices: ArrayLike) -> Array:
        return self.starts[np.asarray(indices)] + self.T - 1 + self.horizon

    def batch(self, indices: ArrayLike) -> tuple[Array, Array]:
        """Inputs ``N×L×T×D`` and targets ``N×L×K`` for the given windows."""
        starts = self.starts[np.asarray(indices, dtype=np.int64)]
        x = self._view[:, starts].transpose(1, 0, 3, 2)
        targets = starts + self.T - 1 + self.horizon
        y = self.split.features[:, targets, : self.n_targets].transpose(1, 0, 2)
        return np.ascontiguousarray(x), np.ascontiguousarray(y)

    def arrays(self) -> tuple[Array, Array]:
        return self.batch(np.arange(len(self)))

    def target_timestamps(self) -> pd.DatetimeIndex:
        return self.split.timestamps[self.target_index(np.arange(len(self)))]


def build_windows(
    split: AlignedDataset,
    T: int = 168,
    horizon: int = 1,
    n_targets: int = len(POLLUTANTS),
) -> WindowSet:
    windows = WindowSet(split, T, horizon, n_targets)
    if not len(windows):
        logger.warning(
            f"No windows of length {T}+{horizon} fit into a span of "
            f"{split.n_timestamps} timestamps"
        )
    return windows


def read_raw_csv(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={"site_id": str})
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise IngestionError(f"Cannot read {path}: {e}") from e
    return validate_raw(frame)


def validate_raw(frame: pd.DataFrame) -> pd.DataFrame:
    for name in RAW_COLUMNS:
        if name not in frame.columns:
            raise IngestionError(f"Missing column {name!r}")
    extra = [name for name in frame.columns if name not in RAW_COLUMNS]
    if extra:
        raise IngestionError(f"Unexpected columns {extra}")
    frame = frame[list(RAW_COLUMNS)].copy()
    try:
        frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True)
        for name in RAW_COLUMNS[2:]:
            frame[name] = pd.to_numeric(frame[name]).astype(np.float64)
    except (ValueError, TypeError) as e:
        raise IngestionError(f"Malformed value: {e}") from e
    frame["site_id"] = frame["site_id"].astype(str)
    if not frame["lat"].between(-90, 90).all():
        raise IngestionError("Latitude outside [-90, 90]")
    if not frame["lon"].between(-180, 180).all():
        raise IngestionError("Longitude outside [-180, 180]")
    logger.info(f"Read {len(frame)} raw rows for {frame['site_id'].nunique()} sites")
    return frame


def records_to_frame(records: Sequence[RawRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([vars(record) for record in records], columns=RAW_COLUMNS)
    return validate_raw(frame)


def write_raw_csv(frame: pd.DataFrame, path: Path) -> None:
    out = frame[list(RAW_COLUMNS)].copy()
    out["timestamp"] = out["timestamp"].dt.strftime(TIMESTAMP_FORMAT)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    logger.debug(f"Wrote {len(out)} raw rows to {path.absolute()}")


def _site_table(frame: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    reporting = frame[list(columns)].notna().any(axis=1)
    sites = frame.loc[reporting].groupby("site_id")[["lat", "lon"]].first()
    return sites.sort_index()


def align(raw: pd.DataFrame, config: DataConfig | None = None) -> AlignedDataset:
    """Pollutant sites with meteorology interpolated onto them, before QC."""
    config = config or DataConfig()
    pollutant_sites = _site_table(raw, POLLUTANTS)
    met_sites = _site_table(raw, RAW_MET)
    if pollutant_sites.empty:
        raise IngestionError("No site reports pollutant values")
    if met_sites.empty:
        raise IngestionError("No site reports meteorological values")

    pollutants = raw[raw["site_id"].isin(pollutant_sites.index)]
    has_pollutant = pollutants[list(POLLUTANTS)].notna().any(axis=1)
    stamps = pd.DatetimeIndex(pollutants.loc[has_pollutant, "timestamp"].unique())
    stamps = stamps.sort_values()

    met = raw[raw["site_id"].isin(met_sites.index)].copy()
    met["wind_speed"] = compute_wind_speed(met["u10"], met["v10"])
    met_values = np.empty((len(met_sites), len(stamps), len(MET_FEATURES)))
    for i, (site_id, group) in enumerate(met.groupby("site_id", sort=True)):
        hourly = group.set_index("timestamp")[list(MET_FEATURES)].sort_index()
        met_values[i] = aggregate_3hourly(hourly).reindex(stamps).to_numpy()
    aligned_met = idw_align(
        met_values,
        met_sites[["lat", "lon"]].to_numpy(),
        pollutant_sites[["lat", "lon"]].to_numpy(),
        power=config.idw_power,
        collocation_m=config.collocation_m,
    )
    logger.debug(
        f"Interpolated {len(met_sites)} meteorological sites onto "
        f"{len(pollutant_sites)} pollutant sites"
    )

    pollutant_values = np.empty((len(pollutant_sites), len(stamps), len(POLLUTANTS)))
    for i, site_id in enumerate(pollutant_sites.index):
        site = pollutants[pollutants["site_id"] == site_id]
        site = site.drop_duplicates("timestamp").set_index("timestamp")
        pollutant_values[i] = site[list(POLLUTANTS)].reindex(stamps).to_numpy()

    return AlignedDataset(
        site_ids=list(pollutant_sites.index),
        lat=pollutant_sites["lat"].to_numpy(),
        lon=pollutant_sites["lon"].to_numpy(),
        timestamps=stamps,
        features=np.concatenate([pollutant_values, aligned_met], axis=-1),
    )


def prepare(
    raw: pd.DataFrame,
    split_config: SplitConfig | None = None,
    data_config: DataConfig | None = None,
) -> PreparedData:
    split_config = split_config or SplitConfig()
    aligned = align(raw, data_config)
    dataset, qc = quality_control(aligned)
    met_reporting = raw[list(RAW_MET)].notna().any(axis=1)
    qc.pollutant_sites = dataset.site_ids
    qc.met_sites = sorted(raw.loc[met_reporting, "site_id"].unique())
    train_end, val_end = split_indices(dataset.timestamps, split_config)
    stats = fit_normalization(dataset.subset(slice(0, train_end)))
    dataset.normalization = stats
    qc.split = {
        "train": train_end,
        "val": val_end - train_end,
        "test": dataset.n_timestamps - val_end,
    }
    logger.info(
        f"Split {dataset.n_timestamps} timestamps into {train_end} train, "
        f"{val_end - train_end} validation and {dataset.n_timestamps - val_end} test"
    )
    return PreparedData(dataset, stats, train_end, val_end, qc)


def write_aligned_csv(dataset: AlignedDataset, path: Path) -> None:
    frame = dataset.to_frame()
    frame["timestamp"] = pd.DatetimeIndex(frame["timestamp"]).strftime(
        TIMESTAMP_FORMAT
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_aligned_csv(path: Path) -> AlignedDataset:
    try:
        frame = pd.read_csv(path, dtype={"site_id": str})
    except OSError as e:
        raise IngestionError(f"Cannot read {path}: {e}") from e
    header = ["timestamp", "site_id", "lat", "lon", *FEATURES]
    if list(frame.columns) != header:
        raise IngestionError(f"Aligned CSV header should be {','.join(header)}")
    frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True)
    sites = frame.groupby("site_id", sort=True)[["lat", "lon"]].first()
    stamps = pd.DatetimeIndex(frame["timestamp"].unique()).sort_values()
    features = np.empty((len(sites), len(stamps), len(FEATURES)))
    for i, site_id in enumerate(sites.index):
        site = frame[frame["site_id"] == site_id].set_index("timestamp")
        features[i] = site[list(FEATURES)].reindex(stamps).to_numpy()
    return AlignedDataset(
        site_ids=list(sites.index),
        lat=sites["lat"].to_numpy(),
        lon=sites["lon"].to_numpy(),
        timestamps=stamps,
        features=features,
    )


def _canonical(value: Any, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "%.17g" % value
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            f"{pad}{json.dumps(key)}: {_canonical(value[key], indent + 1)}"
            for key in sorted(value)
        ]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{pad}{_canonical(item, indent + 1)}" for item in value]
        return "[\n" + ",\n".join(items) + "\n" + "  " * indent + "]"
    return json.dumps(value)


def dumps_stats(stats: NormalizationStats) -> str:
    """Canonical JSON: sorted keys, two-space indent, 17 significant digits."""
    return _canonical(stats.dict()) + "\n"


def dump_stats(stats: NormalizationStats, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_stats(stats))


def load_stats(path: Path) -> NormalizationStats:
    try:
        return NormalizationStats.parse_raw(path.read_text())
    except (OSError, pydantic.ValidationError) as e:
        raise IngestionError(f"Cannot load normalization stats from {path}: {e}") from e


def save_prepared(prepared: PreparedData, directory: Path) -> None:
    """Write ``aligned.csv``, ``stats.json`` and ``qc_report.json``."""
    directory.mkdir(parents=True, exist_ok=True)
    write_aligned_csv(prepared.dataset, directory / ALIGNED_CSV)
    dump_stats(prepared.stats, directory / STATS_JSON)
    (directory / QC_REPORT_JSON).write_text(
        prepared.qc.json(indent=2, sort_keys=True) + "\n"
    )
    logger.info(f"Prepared data written to {directory}")


def load_prepared(directory: Path) -> PreparedData:
    dataset = read_aligned_csv(directory / ALIGNED_CSV)
    stats = load_stats(directory / STATS_JSON)
    try:
        qc = QCReport.parse_file(directory / QC_REPORT_JSON)
    except (OSError, pydantic.ValidationError) as e:
        raise IngestionError(f"Cannot load the QC report: {e}") from e
    train_end = qc.split.get("train", 0)
    val_end = train_end + qc.split.get("val", 0)
    if val_end > dataset.n_timestamps or not train_end:
        raise IngestionError(f"Split {qc.split} does not fit the aligned dataset")
    dataset.normalization = stats
    return PreparedData(dataset, stats, train_end, val_end, qc)
