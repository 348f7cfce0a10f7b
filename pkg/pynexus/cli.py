"""Compact spatiotemporal air-quality forecasting from multi-site series.

Commands:
    generate   synthetic raw CSV
    prepare    aligned dataset, normalization stats and QC report
    train      checkpoint and training history
    evaluate   test metrics, baseline comparison and residual diagnostics
    ablate     component ablation table
    analyze    diurnal, monthly, regime, correlation and spatial tables
    predict    next 3-hour forecast per site
    grid       hyperparameter grid search
"""

import contextlib
import json
import logging
from pathlib import Path
from typing import Iterator, List, NoReturn, Optional

import numpy as np
import pandas as pd
import pydantic
import typer

from pynexus.analysis import (
    composite_series,
    correlation_table,
    diurnal_profile,
    hotspot_ranking,
    monthly_means,
    qq_slope,
    regime_table,
    residual_diagnostics,
    spatial_gradient,
)
from pynexus.baselines import LinearBaseline, persistence_forecast
from pynexus.checkpoint import (
    CheckpointMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from pynexus.data import (
    FEATURES,
    POLLUTANTS,
    STEP,
    TIMESTAMP_FORMAT,
    GapError,
    IngestionError,
    PreparedData,
    WindowSet,
    build_windows,
    denormalize,
    load_prepared,
    prepare as prepare_data,
    read_raw_csv,
    save_prepared,
    write_raw_csv,
)
from pynexus.metrics import METRIC_NAMES, improvement_pct, metrics_report
from pynexus.model import NexusConfig, StageError, measure_inference
from pynexus.profile import profiling
from pynexus.settings import RunConfig, load_run_config, setup_logging, write_config_ini
from pynexus.synth import generate as generate_synth
from pynexus.tensor import Array, ConfigurationError, ShapeError
from pynexus.training import (
    DEFAULT_GRID,
    DivergenceError,
    evaluate_windows,
    predict as predict_windows,
    run_ablation,
    run_grid,
    targets_for,
    train as train_model,
    write_history_csv,
)


logger = logging.getLogger("pynexus.cli")

cli_app = typer.Typer(add_completion=False)

CHECKPOINT = "checkpoint.nexus"
HIGHER_IS_BETTER = {"r2": True, "rmse": False, "mae": False, "smape_pct": False}


class CommonOpts:
    config_path: Optional[Path] = typer.Option(
        None,
        "-c",
        "--config",
        exists=True,
        dir_okay=False,
        help="Read [run], [model], [train], [synth], [split] and [data] sections "
        "of key = value lines from an INI file.",
    )
    seed: Optional[int] = typer.Option(
        None, help="Global seed of every random stream."
    )
    out_dir: Optional[Path] = typer.Option(
        None, "--out", help="Write outputs and the effective config.ini to DIR."
    )
    overrides: Optional[List[str]] = typer.Option(
        None,
        "--set",
        help="Override a config key as section.key=value (repeatable).",
    )
    data_dir: Optional[Path] = typer.Option(
        None,
        "--data",
        help="Read the prepared dataset from DIR instead of the output directory.",
    )
    profile_path: Optional[Path] = typer.Option(
        None,
        "--profile",
        help="Profile with Pyinstrument and write PATH/{PID}.html and "
        "PATH/{PID}.folded when the command finishes.",
    )
    debug: bool = typer.Option(False, help="Enable debug logging.")


def fail(code: int, error: Exception) -> NoReturn:
    typer.echo(f"Error: {error}", err=True)
    raise typer.Exit(code)


@contextlib.contextmanager
def exit_codes() -> Iterator[None]:
    """Map domain errors to exit codes: 2 invalid input, 3 artifact mismatch,
    4 numerical failure."""
    try:
        yield
    except (
        pydantic.ValidationError,
        ConfigurationError,
        IngestionError,
        GapError,
        ShapeError,
        StageError,
    ) as e:
        fail(2, e)
    except CheckpointMismatchError as e:
        fail(3, e)
    except DivergenceError as e:
        fail(4, e)


def run_config(
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Optional[Path],
    overrides: Optional[List[str]],
    data_dir: Optional[Path] = None,
    debug: bool = False,
) -> RunConfig:
    config = load_run_config(
        config_path,
        overrides or [],
        seed=seed,
        out_dir=out_dir,
        data_dir=data_dir,
        debug=debug or None,
    )
    setup_logging(config.debug)
    write_config_ini(config, config.out_dir)
    return config


def check_dataset(config: NexusConfig, prepared: PreparedData) -> None:
    dataset = prepared.dataset
    if config.L != dataset.n_sites:
        raise ConfigurationError(
            f"model.L={config.L} but the dataset has {dataset.n_sites} sites"
        )
    if config.D != len(FEATURES):
        raise ConfigurationError(
            f"model.D={config.D} but there are {len(FEATURES)} features"
        )
    if config.K > len(POLLUTANTS):
        raise ConfigurationError(
            f"model.K={config.K} exceeds {len(POLLUTANTS)} species"
        )


def load_windows(config: RunConfig) -> tuple[PreparedData, list[WindowSet]]:
    prepared = load_prepared(config.prepared_dir)
    check_dataset(config.model, prepared)
    windows = [
        build_windows(split, config.model.T, config.data.horizon, config.model.K)
        for split in prepared.splits()
    ]
    logger.info(
        "Windows: " + ", ".join(
            f"{name} {len(w)}" for name, w in zip(("train", "val", "test"), windows)
        )
    )
    return prepared, windows


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    logger.info(f"Wrote {path}")


def write_json(value: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(value, indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote {path}")


@cli_app.command()
def generate(
    days: Optional[int] = typer.Option(
        None, help="Number of days to simulate (at least 30)."
    ),
    output: Optional[Path] = typer.Option(
        None, "-o", "--output", help="Write the raw CSV to PATH [default: OUT/raw.csv]."
    ),
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    debug: bool = CommonOpts.debug,
) -> None:
    """Generate a synthetic raw CSV with known diurnal, seasonal and spatial
    structure at a 4×4 meteorological grid and four monitoring sites.
    """
    with exit_codes():
        extra = [f"synth.n_days={days}"] if days is not None else []
        config = run_config(
            config_path, seed, out_dir, [*(overrides or []), *extra], debug=debug
        )
        result = generate_synth(config.synth)
        path = output or config.out_dir / "raw.csv"
        write_raw_csv(result.raw, path)
        logger.info(
            f"Generated {len(result.raw)} rows, noise-limited R² bound "
            f"{result.r2_bound():.4f}"
        )


@cli_app.command()
def prepare(
    raw: Optional[Path] = typer.Option(
        None, help="Raw CSV to ingest [default: OUT/raw.csv]."
    ),
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    debug: bool = CommonOpts.debug,
) -> None:
    """Align meteorology onto the monitoring sites, drop incomplete timestamps,
    split in time and fit robust normalization on the training span.
    """
    with exit_codes():
        config = run_config(config_path, seed, out_dir, overrides, debug=debug)
        frame = read_raw_csv(raw or config.out_dir / "raw.csv")
        prepared = prepare_data(frame, config.split, config.data)
        save_prepared(prepared, config.out_dir)
        logger.info(f"Dropped {prepared.qc.n_dropped} incomplete timestamps")


@cli_app.command()
def train(
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    data_dir: Optional[Path] = CommonOpts.data_dir,
    profile_path: Optional[Path] = CommonOpts.profile_path,
    debug: bool = CommonOpts.debug,
) -> None:
    """Train with Adam and early stopping, keeping the best-validation weights."""
    with exit_codes():
        config = run_config(config_path, seed, out_dir, overrides, data_dir, debug)
        prepared, (train_w, val_w, _) = load_windows(config)
        with profiling(profile_path):
            params, report = train_model(
                config.model, train_w, val_w, config.train, stats=prepared.stats
            )
        save_checkpoint(config.out_dir / CHECKPOINT, params)
        write_history_csv(report, config.out_dir / "train_history.csv")
        summary = report.summary()
        x_val, _ = val_w.batch(np.arange(min(len(val_w), 64)))
        summary["inference_ms"] = measure_inference(params, x_val)
        write_json(summary, config.out_dir / "train_summary.json")


def baseline_rows(
    name: str,
    y: Array,
    y_hat: Array,
    reference: dict[tuple[str, str], float] | None,
) -> list[dict]:
    species = POLLUTANTS[: y.shape[-1]]
    frame = metrics_report(y, y_hat, species).to_frame()
    rows = []
    for row in frame.to_dict("records"):
        row = {"model": name, **row}
        if reference is not None:
            for metric, higher in HIGHER_IS_BETTER.items():
                row[f"{metric}_improvement_pct"] = improvement_pct(
                    reference[(row["species"], metric)], row[metric], higher
                )
        rows.append(row)
    return rows


@cli_app.command()
def evaluate(
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    data_dir: Optional[Path] = CommonOpts.data_dir,
    debug: bool = CommonOpts.debug,
) -> None:
    """Score the checkpoint on the test span against persistence and ridge
    baselines and write residual diagnostics.
    """
    with exit_codes():
        config = run_config(config_path, seed, out_dir, overrides, data_dir, debug)
        prepared, (train_w, _, test_w) = load_windows(config)
        if not len(test_w):
            raise ConfigurationError("The test span holds no complete window")
        params = load_checkpoint(config.out_dir / CHECKPOINT, expected=config.model)
        stats, model = prepared.stats, config.model
        species = POLLUTANTS[: model.K]

        y, y_hat = evaluate_windows(params, test_w, stats, config.train.eval_batch_size)
        report = metrics_report(y, y_hat, species)
        write_csv(report.to_frame(), config.out_dir / "metrics.csv")

        x_test, _ = test_w.arrays()
        x_train, y_train = train_w.arrays()
        ridge = LinearBaseline().fit(x_train, targets_for(model, y_train))
        persistence = persistence_forecast(x_test, model.K)
        if model.output_mode == "pooled":
            persistence = persistence.mean(axis=-2)
        reference = {
            (row["species"], metric): row[metric]
            for row in report.to_frame().to_dict("records")
            for metric in METRIC_NAMES
        }
        rows = baseline_rows("nexus", y, y_hat, None)
        for name, forecast in (
            ("persistence", persistence),
            ("linear", ridge.predict(x_test)),
        ):
            rows += baseline_rows(
                name, y, denormalize(forecast, stats, species), reference
            )
        write_csv(pd.DataFrame(rows), config.out_dir / "baselines.csv")

        tables = []
        for k, name in enumerate(species):
            diagnostics = residual_diagnostics(y[..., k], y_hat[..., k])
            logger.info(f"Q-Q slope of {name} residuals: {qq_slope(diagnostics):.3f}")
            diagnostics.insert(0, "species", name)
            tables.append(diagnostics)
        residuals = pd.concat(tables, ignore_index=True)
        write_csv(residuals, config.out_dir / "residuals.csv")


@cli_app.command()
def ablate(
    seeds: int = typer.Option(
        3, min=1, help="Train every variant with N seeds and report the median."
    ),
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    data_dir: Optional[Path] = CommonOpts.data_dir,
    profile_path: Optional[Path] = CommonOpts.profile_path,
    debug: bool = CommonOpts.debug,
) -> None:
    """Retrain the model with one component removed at a time."""
    with exit_codes():
        config = run_config(config_path, seed, out_dir, overrides, data_dir, debug)
        prepared, (train_w, val_w, _) = load_windows(config)
        with profiling(profile_path):
            table = run_ablation(
                config.model,
                train_w,
                val_w,
                config.train,
                seeds=[config.seed + i for i in range(seeds)],
                stats=prepared.stats,
            )
        write_csv(table, config.out_dir / "ablation.csv")


@cli_app.command()
def analyze(
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    data_dir: Optional[Path] = CommonOpts.data_dir,
    debug: bool = CommonOpts.debug,
) -> None:
    """Tabulate pollution cycles, weather regimes, driver correlations,
    hotspots and the spatial gradient of the prepared dataset.
    """
    with exit_codes():
        config = run_config(config_path, seed, out_dir, overrides, data_dir, debug)
        prepared = load_prepared(config.prepared_dir)
        dataset, out = prepared.dataset, config.out_dir
        stamps = dataset.stacked_timestamps()
        composite = composite_series(dataset, prepared.stats.maxima)
        series = {name: dataset.feature(name) for name in POLLUTANTS}
        series["composite"] = composite

        diurnal = pd.DataFrame(
            {name: diurnal_profile(values, stamps) for name, values in series.items()}
        )
        write_csv(diurnal.reset_index(), out / "diurnal.csv")
        monthly = pd.DataFrame(
            {name: monthly_means(values, stamps) for name, values in series.items()}
        )
        write_csv(monthly.reset_index(), out / "monthly.csv")

        regimes = regime_table(dataset)
        write_csv(regimes.to_frame(), out / "regimes.csv")
        if regimes.site_means is not None:
            write_csv(regimes.site_means, out / "regime_sites.csv")
        write_csv(correlation_table(dataset), out / "correlations.csv")
        write_csv(
            pd.DataFrame(
                {
                    "timestamp": stamps.strftime(TIMESTAMP_FORMAT),
                    "site_id": np.repeat(dataset.site_ids, dataset.n_timestamps),
                    "composite": composite.reshape(-1),
                }
            ),
            out / "composite.csv",
        )
        maxima = prepared.stats.maxima
        write_csv(spatial_gradient(dataset, maxima), out / "spatial.csv")
        write_csv(hotspot_ranking(dataset, maxima), out / "hotspots.csv")


@cli_app.command()
def predict(
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    data_dir: Optional[Path] = CommonOpts.data_dir,
    debug: bool = CommonOpts.debug,
) -> None:
    """Forecast the step after the last prepared timestamp from the trailing
    T steps.
    """
    with exit_codes():
        config = run_config(config_path, seed, out_dir, overrides, data_dir, debug)
        prepared = load_prepared(config.prepared_dir)
        check_dataset(config.model, prepared)
        params = load_checkpoint(config.out_dir / CHECKPOINT, expected=config.model)
        model = config.model
        dataset = prepared.dataset.normalized(prepared.stats)
        if dataset.n_timestamps < model.T:
            raise ConfigurationError(
                f"Need {model.T} timestamps, the dataset has {dataset.n_timestamps}"
            )
        x = dataset.features[None, :, -model.T :, :]
        species = POLLUTANTS[: model.K]
        y_hat = denormalize(predict_windows(params, x)[0], prepared.stats, species)
        sites = dataset.site_ids if model.output_mode == "per_site" else ["pooled"]
        frame = pd.DataFrame(np.atleast_2d(y_hat), columns=list(species))
        target = dataset.timestamps[-1] + config.data.horizon * STEP
        frame.insert(0, "site_id", sites)
        frame.insert(1, "timestamp", target.strftime(TIMESTAMP_FORMAT))
        write_csv(frame, config.out_dir / "forecast.csv")


def parse_axes(axes: List[str]) -> dict[str, tuple[int, ...]]:
    grid: dict[str, tuple[int, ...]] = {}
    for axis in axes:
        name, sep, values = axis.partition("=")
        if not sep or name not in NexusConfig.__fields__:
            raise ConfigurationError(f"Grid axis {axis!r} should be PARAM=V1,V2,...")
        try:
            grid[name] = tuple(int(v) for v in values.split(","))
        except ValueError as e:
            raise ConfigurationError(f"Grid axis {axis!r}: {e}") from e
    return grid


@cli_app.command()
def grid(
    axes: Optional[List[str]] = typer.Option(
        None,
        "--axis",
        help="Search PARAM over integer values as PARAM=V1,V2,... (repeatable) "
        "[default: p, s, d_hidden, n_blocks and r].",
    ),
    config_path: Optional[Path] = CommonOpts.config_path,
    seed: Optional[int] = CommonOpts.seed,
    out_dir: Optional[Path] = CommonOpts.out_dir,
    overrides: Optional[List[str]] = CommonOpts.overrides,
    data_dir: Optional[Path] = CommonOpts.data_dir,
    profile_path: Optional[Path] = CommonOpts.profile_path,
    debug: bool = CommonOpts.debug,
) -> None:
    """Train every valid grid point and select the lowest validation loss."""
    with exit_codes():
        config = run_config(config_path, seed, out_dir, overrides, data_dir, debug)
        _, (train_w, val_w, _) = load_windows(config)
        with profiling(profile_path):
            result = run_grid(
                config.model,
                train_w,
                val_w,
                config.train,
                parse_axes(axes) if axes else DEFAULT_GRID,
            )
        write_csv(result.table, config.out_dir / "grid.csv")
        if result.best is not None:
            logger.info(f"Best grid config: {result.best.header()}")


def main() -> None:
    cli_app()


if __name__ == "__main__":
    main()
