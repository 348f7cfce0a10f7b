"""Optimization: MSE with L2 penalty, Adam, stepwise learning-rate decay and
early stopping on validation loss, plus the ablation and grid harnesses."""

import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import pydantic

from pynexus.data import POLLUTANTS, NormalizationStats, WindowSet, denormalize
from pynexus.metrics import MetricsReport, metrics_report
from pynexus.model import (
    NexusConfig,
    NexusParams,
    count_parameters,
    forward,
    init_params,
)
from pynexus.streams import named_rng
from pynexus.tensor import (
    Array,
    ConfigurationError,
    DiffArray,
    Operand,
    Tape,
    add,
    mul,
    reduce_sum,
    square,
    sub,
)


logger = logging.getLogger("pynexus.training")


class DivergenceError(Exception):
    pass


class TrainConfig(pydantic.BaseModel):
    eta0: float = pydantic.Field(0.001, gt=0.0)
    decay: float = pydantic.Field(0.95, gt=0.0, le=1.0)
    decay_every: int = pydantic.Field(5, ge=1)
    batch_size: int = pydantic.Field(64, ge=1)
    max_epochs: int = pydantic.Field(50, ge=1)
    patience: int = pydantic.Field(10, ge=1)
    weight_decay: float = pydantic.Field(1e-4, ge=0.0)
    beta1: float = pydantic.Field(0.9, gt=0.0, lt=1.0)
    beta2: float = pydantic.Field(0.999, gt=0.0, lt=1.0)
    eps: float = pydantic.Field(1e-8, gt=0.0)
    max_steps: int | None = pydantic.Field(None, ge=1)
    eval_batch_size: int = pydantic.Field(256, ge=1)
    seed: int = 0

    class Config:
        extra = "forbid"

    @pydantic.root_validator(skip_on_failure=True)
    def check_patience(cls, values: dict) -> dict:
        if values["patience"] > values["max_epochs"]:
            raise ValueError("patience should not exceed max_epochs")
        return values


def lr_at_epoch(eta0: float, t: int, decay: float = 0.95, every: int = 5) -> float:
    return eta0 * decay ** (t // every)


def mse_loss(y: Operand, y_hat: Operand) -> DiffArray:
    """Mean squared error over every batch member, site and species."""
    diff = sub(y_hat, y)
    return mul(reduce_sum(square(diff)), 1.0 / diff.size)


def regularized_loss(
    mse: DiffArray, weights: Iterable[DiffArray], weight_decay: float
) -> DiffArray:
    """``mse + λ Σ ‖w‖²`` over the given weight arrays."""
    if weight_decay == 0:
        return mse
    penalty: DiffArray | None = None
    for w in weights:
        term = reduce_sum(square(w))
        penalty = term if penalty is None else add(penalty, term)
    if penalty is None:
        return mse
    return add(mse, mul(penalty, weight_decay))


@dataclass
class AdamState:
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, DiffArray],
    grads: Mapping[str, Array | None],
    state: AdamState,
    lr: float,
    config: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update of ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - config.beta1**state.t
    bc2 = 1.0 - config.beta2**state.t
    for name, array in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(array.values)
            state.v[name] = np.zeros_like(array.values)
        m, v = state.m[name], state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        array.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return state


def targets_for(config: NexusConfig, y: Array) -> Array:
    """Per-site targets, or their site mean for a pooled output head."""
    return y if config.output_mode == "per_site" else y.mean(axis=-2)


def predict(params: NexusParams, x: Array, batch_size: int = 256) -> Array:
    """Eval-mode forecasts for ``N×L×T×D`` inputs."""
    if not len(x):
        return np.zeros((0, *_output_shape(params.config)))
    outputs = [
        forward(x[i : i + batch_size], params)[0].values
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(outputs)


def _output_shape(config: NexusConfig) -> tuple[int, ...]:
    if config.output_mode == "per_site":
        return (config.L, config.K)
    return (config.K,)


def evaluate_loss(
    params: NexusParams, windows: WindowSet, batch_size: int = 256
) -> float:
    x, y = windows.arrays()
    y_hat = predict(params, x, batch_size)
    return float(np.mean((y_hat - targets_for(params.config, y)) ** 2))


def evaluate_windows(
    params: NexusParams,
    windows: WindowSet,
    stats: NormalizationStats | None = None,
    batch_size: int = 256,
) -> tuple[Array, Array]:
    """Targets and forecasts of every window, denormalized when ``stats`` is given."""
    x, y = windows.arrays()
    y = targets_for(params.config, y)
    y_hat = predict(params, x, batch_size)
    if stats is not None:
        species = POLLUTANTS[: params.config.K]
        y = denormalize(y, stats, species)
        y_hat = denormalize(y_hat, stats, species)
    return y, y_hat


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainReport:
    history: list[EpochRecord]
    stopped_epoch: int
    best_epoch: int
    best_val_loss: float
    wall_time_s: float
    n_parameters: int
    steps: int
    val_metrics: MetricsReport | None = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(record) for record in self.history],
            columns=["epoch", "lr", "train_loss", "val_loss"],
        )

    def summary(self) -> dict:
        summary = {
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "wall_time_s": self.wall_time_s,
            "n_parameters": self.n_parameters,
            "steps": self.steps,
        }
        if self.val_metrics is not None:
            summary["val_metrics"] = self.val_metrics.species
            summary["val_mean"] = self.val_metrics.averages
        return summary


def write_history_csv(report: TrainReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(path, index=False, float_format="%.10g")


def train_step(
    params: NexusParams,
    x: Array,
    y: Array,
    state: AdamState,
    lr: float,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    params.zero_grad()
    with Tape(retain_grads=False) as tape:
        y_hat, _ = forward(x, params, training=True, rng=rng)
        data_loss = mse_loss(targets_for(params.config, y), y_hat)
        loss = regularized_loss(data_loss, params.decayed(), config.weight_decay)
    if not np.isfinite(loss.item()):
        return float("nan")
    tape.backward(loss)
    grads = {name: array.grad for name, array in params.items()}
    adam_step(params.arrays, grads, state, lr, config)
    return data_loss.item()


def train(
    config: NexusConfig,
    train_windows: WindowSet,
    val_windows: WindowSet,
    train_config: TrainConfig | None = None,
    stats: NormalizationStats | None = None,
    params: NexusParams | None = None,
) -> tuple[NexusParams, TrainReport]:
    """Train with early stopping and return the best-validation parameters."""
    tc = train_config or TrainConfig()
    if not len(train_windows) or not len(val_windows):
        raise ConfigurationError("Training needs train and validation windows")
    if params is None:
        params = init_params(config, tc.seed)
    shuffle_rng = named_rng(tc.seed, "shuffle")
    dropout_rng = named_rng(tc.seed, "dropout")
    state = AdamState()
    history: list[EpochRecord] = []
    best_val, best_epoch, best_params = float("inf"), 0, params.copy()
    wait, step, epoch = 0, 0, 0
    started = time.perf_counter()
    n = len(train_windows)
    logger.info(
        f"Training {params.count()} parameters on {n} windows, "
        f"validating on {len(val_windows)}"
    )
    for epoch in range(1, tc.max_epochs + 1):
        lr = lr_at_epoch(tc.eta0, epoch - 1, tc.decay, tc.decay_every)
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            x, y = train_windows.batch(idx)
            loss = train_step(params, x, y, state, lr, tc, dropout_rng)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"Loss became {loss} at epoch {epoch}, step {step}"
                )
            logger.debug(f"Epoch {epoch} step {step}: loss {loss:.6g}")
            total += loss * len(idx)
            seen += len(idx)
            step += 1
            if tc.max_steps is not None and step >= tc.max_steps:
                break
        train_loss = total / seen
        val_loss = evaluate_loss(params, val_windows, tc.eval_batch_size)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"Validation loss became {val_loss} at epoch {epoch}")
        history.append(EpochRecord(epoch, lr, train_loss, val_loss))
        logger.info(
            f"Epoch {epoch}: lr {lr:.6g}, train {train_loss:.6g}, val {val_loss:.6g}"
        )
        if val_loss < best_val:
            best_val, best_epoch, best_params = val_loss, epoch, params.copy()
            wait = 0
        else:
            wait += 1
            if wait >= tc.patience:
                logger.info(f"Early stop at epoch {epoch}, best epoch {best_epoch}")
                break
        if tc.max_steps is not None and step >= tc.max_steps:
            break
    report = TrainReport(
        history=history,
        stopped_epoch=epoch,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        wall_time_s=time.perf_counter() - started,
        n_parameters=best_params.count(),
        steps=step,
    )
    if stats is not None:
        y, y_hat = evaluate_windows(best_params, val_windows, stats)
        report.val_metrics = metrics_report(y, y_hat, POLLUTANTS[: config.K])
    return best_params, report


@dataclass(frozen=True)
class AblationVariant:
    name: str
    description: str
    transform: Callable[[NexusConfig], NexusConfig]

    def apply(self, config: NexusConfig) -> NexusConfig:
        return self.transform(config)


def _without_patches(config: NexusConfig) -> NexusConfig:
    r = min(config.r, config.D)
    changes = {"p": 1, "s": 1, "r": r, "mix_rank": min(config.mix_rank, r)}
    return NexusConfig(**{**config.dict(), **changes})


def _replace(**changes: object) -> Callable[[NexusConfig], NexusConfig]:
    def transform(config: NexusConfig) -> NexusConfig:
        return NexusConfig(**{**config.dict(), **changes})

    return transform


ABLATION_VARIANTS: tuple[AblationVariant, ...] = (
    AblationVariant("full", "complete model", _replace()),
    AblationVariant(
        "no_patch_embedding", "raw timesteps as tokens (p=1, s=1)", _without_patches
    ),
    AblationVariant(
        "no_lowrank", "dense (p·D)→d_hidden projection", _replace(low_rank=False)
    ),
    AblationVariant(
        "no_pathways", "CompactKernel only, no fusion", _replace(pathways="compact")
    ),
    AblationVariant(
        "no_weighted_pooling", "uniform spatial mean", _replace(weighted_pooling=False)
    ),
    AblationVariant("single_nanoblock", "one NanoBlock", _replace(n_blocks=1)),
)


def get_variant(name: str) -> AblationVariant:
    for variant in ABLATION_VARIANTS:
        if variant.name == name:
            return variant
    raise KeyError(f"Unknown ablation variant {name!r}")


def _val_r2(
    params: NexusParams, windows: WindowSet, stats: NormalizationStats | None
) -> float:
    y, y_hat = evaluate_windows(params, windows, stats)
    return metrics_report(y, y_hat, POLLUTANTS[: params.config.K]).averages["r2"]


def run_ablation(
    base: NexusConfig,
    train_windows: WindowSet,
    val_windows: WindowSet,
    train_config: TrainConfig | None = None,
    variants: Sequence[AblationVariant] = ABLATION_VARIANTS,
    seeds: Sequence[int] = (0, 1, 2),
    stats: NormalizationStats | None = None,
) -> pd.DataFrame:
    """One row per variant: median validation R² over seeds, its change relative
    to the full model, parameter count and wall time."""
    tc = train_config or TrainConfig()
    rows = []
    for variant in variants:
        config = variant.apply(base)
        scores, minutes = [], []
        for seed in seeds:
            stream = named_rng(seed, f"ablation/{variant.name}/{seed}")
            run_config = tc.copy(update={"seed": int(stream.integers(2**31))})
            params, report = train(
                config, train_windows, val_windows, run_config, stats=None
            )
            scores.append(_val_r2(params, val_windows, stats))
            minutes.append(report.wall_time_s / 60)
        rows.append(
            {
                "variant": variant.name,
                "description": variant.description,
                "n_parameters": count_parameters(config),
                "val_r2": float(np.median(scores)),
                "train_minutes": float(np.mean(minutes)),
            }
        )
        logger.info(f"Ablation {variant.name}: val R² {rows[-1]['val_r2']:.4f}")
    table = pd.DataFrame(rows)
    full = table.loc[table["variant"] == "full", "val_r2"]
    if len(full):
        reference = float(full.iloc[0])
        table["delta_r2_pct"] = 100.0 * (table["val_r2"] - reference) / abs(reference)
    return table


DEFAULT_GRID: dict[str, tuple[int, ...]] = {
    "p": (2, 4, 8),
    "s": (1, 2, 4),
    "d_hidden": (64, 128, 256),
    "n_blocks": (1, 2, 3),
    "r": (16, 32, 64, 128),
}


@dataclass
class GridResult:
    table: pd.DataFrame
    best: NexusConfig | None


def grid_configs(
    base: NexusConfig, grid: Mapping[str, Sequence[int]]
) -> Iterable[tuple[dict[str, int], NexusConfig | None]]:
    names = sorted(grid)
    for values in itertools.product(*(grid[name] for name in names)):
        point = dict(zip(names, values))
        update = {**base.dict(), **point}
        update["mix_rank"] = min(base.mix_rank, update["r"], update["d_hidden"])
        try:
            yield point, NexusConfig(**update)
        except pydantic.ValidationError as e:
            reason = e.errors()[0]["msg"]
            logger.warning(f"Skipping invalid grid point {point}: {reason}")
            yield point, None


def run_grid(
    base: NexusConfig,
    train_windows: WindowSet,
    val_windows: WindowSet,
    train_config: TrainConfig | None = None,
    grid: Mapping[str, Sequence[int]] = DEFAULT_GRID,
) -> GridResult:
    """Exhaustive search over ``grid`` selecting the lowest validation loss."""
    unknown = set(grid) - set(NexusConfig.__fields__)
    if unknown:
        raise KeyError(f"Unknown grid parameters {sorted(unknown)}")
    rows = []
    best: NexusConfig | None = None
    best_loss = float("inf")
    for point, config in grid_configs(base, grid):
        if config is None:
            rows.append({**point, "valid": False})
            continue
        _, report = train(config, train_windows, val_windows, train_config)
        rows.append(
            {
                **point,
                "valid": True,
                "n_parameters": count_parameters(config),
                "best_val_loss": report.best_val_loss,
                "stopped_epoch": report.stopped_epoch,
            }
        )
        if report.best_val_loss < best_loss:
            best, best_loss = config, report.best_val_loss
    return GridResult(pd.DataFrame(rows), best)
