"""The NEXUS forecaster.

Pipeline per sample (leading batch axes are carried through every stage)::

    X (L×T×D) -> unfold -> P (L×T'×pD) -> low-rank projection (+ positions) -> H
      -> NanoBlock × n_blocks -> Z (L×T'×d) -> weighted spatial pooling -> z (d)
      -> LayerNorm -> dense -> ReLU -> dense -> Ŷ (L×K or K)

A NanoBlock runs three pathways on the same input and mixes them with
input-conditioned softmax weights: a depthwise temporal convolution
(CompactKernel), a depthwise convolution followed by low-rank channel mixing
(MicroConv) and a sigmoid gate (FusionGate).
"""

import contextlib
import logging
import time
from dataclasses import dataclass, field
from typing import Iterator, Literal, Mapping

import numpy as np
import pydantic

from pynexus.streams import named_rng
from pynexus.tensor import (
    Array,
    ConfigurationError,
    DiffArray,
    ShapeError,
    add,
    as_array,
    conv1d,
    dropout,
    global_pool,
    layer_norm,
    mul,
    parameter,
    pointwise_conv,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    take,
    unfold,
)


logger = logging.getLogger("pynexus.model")

InitKind = Literal["kaiming", "xavier", "zeros"]


class StageError(Exception):
    pass


class NexusConfig(pydantic.BaseModel):
    L: int = pydantic.Field(4, ge=1)
    T: int = pydantic.Field(168, ge=1)
    D: int = pydantic.Field(9, ge=1)
    p: int = pydantic.Field(4, ge=1)
    s: int = pydantic.Field(2, ge=1)
    r: int = pydantic.Field(32, ge=1)
    mix_rank: int = pydantic.Field(8, ge=1)
    d_hidden: int = pydantic.Field(64, ge=1)
    n_blocks: int = pydantic.Field(2, ge=1)
    head_hidden: int = pydantic.Field(32, ge=1)
    fusion_hidden: int = pydantic.Field(16, ge=1)
    K: int = pydantic.Field(3, ge=1)
    output_mode: Literal["per_site", "pooled"] = "per_site"
    kernel_width_compact: int = pydantic.Field(3, ge=1)
    kernel_width_depthwise: int = pydantic.Field(3, ge=1)
    dropout_rate: float = pydantic.Field(0.1, ge=0.0, lt=1.0)
    low_rank: bool = True
    # learned n_patches x d_hidden table added after the projection; False
    # drops it. It grows with n_patches, so the variant without patching
    # (p = s = 1) has more parameters than the full model.
    positional_embedding: bool = True
    pathways: Literal["all", "compact"] = "all"
    weighted_pooling: bool = True
    residual: bool = True

    class Config:
        extra = "forbid"
        allow_mutation = False

    @pydantic.validator("kernel_width_compact", "kernel_width_depthwise")
    def check_odd_width(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"Kernel width {value} should be odd")
        return value

    @pydantic.root_validator(skip_on_failure=True)
    def check_dimensions(cls, values: dict) -> dict:
        p, t, d = values["p"], values["T"], values["D"]
        if p > t:
            raise ValueError(f"Patch length p={p} should not exceed T={t}")
        if values["low_rank"] and values["r"] > min(p * d, values["d_hidden"]):
            raise ValueError(
                f"Rank r={values['r']} should not exceed "
                f"min(p*D, d_hidden)={min(p * d, values['d_hidden'])}"
            )
        if values["mix_rank"] > min(values["r"], values["d_hidden"]):
            raise ValueError(
                f"mix_rank={values['mix_rank']} should not exceed r and d_hidden"
            )
        return values

    @property
    def n_patches(self) -> int:
        return (self.T - self.p) // self.s + 1

    @property
    def patch_dim(self) -> int:
        return self.p * self.D

    @property
    def out_dim(self) -> int:
        return self.L * self.K if self.output_mode == "per_site" else self.K

    def header(self) -> str:
        """Canonical single-line ``key=value`` form, keys sorted."""
        items = sorted(self.dict().items())
        return " ".join(f"{key}={_format_value(value)}" for key, value in items)

    @staticmethod
    def from_header(line: str) -> "NexusConfig":
        pairs = dict(item.split("=", 1) for item in line.split())
        return NexusConfig(**pairs)


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ParamSpec:
    path: str
    shape: tuple[int, ...]
    init: InitKind
    fan_in: int = 0
    fan_out: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def decayed(self) -> bool:
        name = self.path.rsplit(".", 1)[-1]
        return name.startswith(("W", "K"))

    @property
    def stage(self) -> str:
        return self.path.split(".", 1)[0]


def parameter_specs(config: NexusConfig) -> list[ParamSpec]:
    """Every trainable array of ``config`` in checkpoint order.

    ``pos.E`` is present only with ``positional_embedding``.
    """
    d, m, pd = config.d_hidden, config.mix_rank, config.patch_dim
    specs: list[ParamSpec] = []
    if config.low_rank:
        specs += [
            ParamSpec("proj.W1", (pd, config.r), "kaiming", pd, config.r),
            ParamSpec("proj.W2", (config.r, d), "kaiming", config.r, d),
        ]
    else:
        specs.append(ParamSpec("proj.W", (pd, d), "kaiming", pd, d))
    specs.append(ParamSpec("proj.b", (d,), "zeros"))
    if config.positional_embedding:
        specs.append(ParamSpec("pos.E", (config.n_patches, d), "zeros"))
    wc, wd = config.kernel_width_compact, config.kernel_width_depthwise
    fh = config.fusion_hidden
    for i in range(1, config.n_blocks + 1):
        b = f"block{i}"
        specs.append(ParamSpec(f"{b}.compact.K_c", (wc, d), "kaiming", wc, 1))
        if config.pathways == "compact":
            continue
        specs += [
            ParamSpec(f"{b}.micro.K_d", (wd, d), "kaiming", wd, 1),
            ParamSpec(f"{b}.micro.K_p1", (d, m), "kaiming", d, m),
            ParamSpec(f"{b}.micro.K_p2", (m, d), "kaiming", m, d),
            ParamSpec(f"{b}.gate.W_g1", (d, m), "xavier", d, m),
            ParamSpec(f"{b}.gate.W_g2", (m, d), "xavier", m, d),
            ParamSpec(f"{b}.gate.b_g", (d,), "zeros"),
            ParamSpec(f"{b}.fusion.f_phi.W1", (d, fh), "kaiming", d, fh),
            ParamSpec(f"{b}.fusion.f_phi.b1", (fh,), "zeros"),
            ParamSpec(f"{b}.fusion.f_phi.W2", (fh, 3), "xavier", fh, 3),
            ParamSpec(f"{b}.fusion.f_phi.b2", (3,), "zeros"),
        ]
    if config.weighted_pooling:
        specs += [
            ParamSpec("pool.g_theta.W", (d, 1), "xavier", d, 1),
            ParamSpec("pool.g_theta.b", (1,), "zeros"),
        ]
    hh = config.head_hidden
    specs += [
        ParamSpec("head.W_hidden", (d, hh), "kaiming", d, hh),
        ParamSpec("head.b_hidden", (hh,), "zeros"),
        ParamSpec("head.W_out", (hh, config.out_dim), "kaiming", hh, config.out_dim),
        ParamSpec("head.b_out", (config.out_dim,), "zeros"),
    ]
    return specs


def count_parameters(config: NexusConfig) -> int:
    return sum(count_parameters_breakdown(config).values())


def count_parameters_breakdown(config: NexusConfig) -> dict[str, int]:
    """Scalar count per stage: ``proj``, ``pos``, ``block1``…, ``pool``, ``head``."""
    counts: dict[str, int] = {}
    for spec in parameter_specs(config):
        counts[spec.stage] = counts.get(spec.stage, 0) + spec.size
    return counts


@dataclass
class NexusParams:
    config: NexusConfig
    arrays: dict[str, DiffArray]

    def __getitem__(self, path: str) -> DiffArray:
        return self.arrays[path]

    def __contains__(self, path: object) -> bool:
        return path in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self) -> Iterator[tuple[str, DiffArray]]:
        return iter(self.arrays.items())

    def scope(self, prefix: str) -> dict[str, DiffArray]:
        """Parameters under ``prefix.``, keyed by the rest of their path."""
        head = prefix + "."
        return {k[len(head) :]: v for k, v in self.arrays.items() if k.startswith(head)}

    def decayed(self) -> list[DiffArray]:
        specs = parameter_specs(self.config)
        return [self.arrays[spec.path] for spec in specs if spec.decayed]

    def count(self) -> int:
        return sum(array.size for array in self.arrays.values())

    def zero_grad(self) -> None:
        for array in self.arrays.values():
            array.zero_grad()

    def copy(self) -> "NexusParams":
        return NexusParams(
            self.config, {k: parameter(v.values) for k, v in self.arrays.items()}
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(v.values).all() for v in self.arrays.values())


@dataclass
class ForwardTrace:
    fusion_weights: list[Array] = field(default_factory=list)
    pooling_weights: Array | None = None


def init_params(config: NexusConfig, seed: int) -> NexusParams:
    rng = named_rng(seed, "init")
    arrays: dict[str, DiffArray] = {}
    for spec in parameter_specs(config):
        if spec.init == "zeros":
            values = np.zeros(spec.shape)
        elif spec.init == "kaiming":
            values = rng.normal(0.0, np.sqrt(2.0 / spec.fan_in), spec.shape)
        else:
            std = np.sqrt(2.0 / (spec.fan_in + spec.fan_out))
            values = rng.normal(0.0, std, spec.shape)
        arrays[spec.path] = parameter(values)
    params = NexusParams(config, arrays)
    logger.debug(f"Initialized {params.count()} parameters with seed {seed}")
    return params


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except ShapeError as e:
        raise StageError(f"Stage {name}: {e}") from e


def patch_embed(x: DiffArray, config: NexusConfig) -> DiffArray:
    expected = (config.L, config.T, config.D)
    if x.shape[-3:] != expected:
        raise ShapeError(f"Expected input (..., {expected}), got {x.shape}")
    return unfold(x, config.p, config.s)


def low_rank_project(
    patches: DiffArray, w1: DiffArray, w2: DiffArray, b: DiffArray
) -> DiffArray:
    rank = w1.shape[1]
    if rank > min(w1.shape[0], w2.shape[1]):
        raise ConfigurationError(
            f"Rank {rank} exceeds min({w1.shape[0]}, {w2.shape[1]})"
        )
    return add(pointwise_conv(pointwise_conv(patches, w1), w2), b)


def _dense(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    return add(pointwise_conv(x, w), b)


def dense_project(patches: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    return _dense(patches, w, b)


def _broadcast_weight(weights: DiffArray, index: int) -> DiffArray:
    column = take(weights, index, axis=-1)
    return reshape(column, (*column.shape, 1, 1, 1))


def nanoblock_forward(
    h: DiffArray,
    block_params: Mapping[str, DiffArray],
    config: NexusConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[DiffArray, DiffArray]:
    """One NanoBlock on ``h`` of shape ``(..., L, T', d)``.

    Returns the block output (same shape) and the fusion weights ``(..., 3)``.
    """
    bp = block_params
    z_c = conv1d(h, bp["compact.K_c"], "depthwise")
    if config.pathways == "compact":
        z = z_c
        weights = DiffArray(np.broadcast_to([1.0, 0.0, 0.0], (*h.shape[:-3], 3)))
    else:
        z_m = conv1d(h, bp["micro.K_d"], "depthwise")
        z_m = pointwise_conv(pointwise_conv(z_m, bp["micro.K_p1"]), bp["micro.K_p2"])

        gate = pointwise_conv(pointwise_conv(h, bp["gate.W_g1"]), bp["gate.W_g2"])
        z_g = mul(h, sigmoid(add(gate, bp["gate.b_g"])))

        pooled = global_pool(h, axes=(-3, -2))
        hidden = relu(_dense(pooled, bp["fusion.f_phi.W1"], bp["fusion.f_phi.b1"]))
        logits = _dense(hidden, bp["fusion.f_phi.W2"], bp["fusion.f_phi.b2"])
        weights = softmax(logits, axis=-1)

        z = add(
            add(
                mul(_broadcast_weight(weights, 0), z_c),
                mul(_broadcast_weight(weights, 1), z_m),
            ),
            mul(_broadcast_weight(weights, 2), z_g),
        )
    if config.residual:
        z = add(z, h)
    z = dropout(z, config.dropout_rate, training, rng)
    return z, weights


def weighted_spatial_pool(
    z: DiffArray, pool_params: Mapping[str, DiffArray], config: NexusConfig
) -> tuple[DiffArray, DiffArray]:
    """Convex combination over sites of the temporally averaged block output.

    Returns the pooled features ``(..., d)`` and site weights ``(..., L)``.
    """
    per_site = global_pool(z, axes=-2)
    n_sites = per_site.shape[-2]
    if not config.weighted_pooling:
        uniform = DiffArray(np.full(per_site.shape[:-1], 1.0 / n_sites))
        return global_pool(per_site, axes=-2), uniform
    scores = _dense(per_site, pool_params["g_theta.W"], pool_params["g_theta.b"])
    weights = softmax(scores, axis=-2)
    pooled = reduce_sum(mul(per_site, weights), axes=-2)
    return pooled, reshape(weights, weights.shape[:-1])


def prediction_head(
    z_pool: DiffArray, head_params: Mapping[str, DiffArray], config: NexusConfig
) -> DiffArray:
    normed = layer_norm(z_pool, axis=-1)
    hidden = relu(_dense(normed, head_params["W_hidden"], head_params["b_hidden"]))
    y = _dense(hidden, head_params["W_out"], head_params["b_out"])
    if config.output_mode == "per_site":
        return reshape(y, (*y.shape[:-1], config.L, config.K))
    return y


def forward(
    x: DiffArray | Array,
    params: NexusParams,
    config: NexusConfig | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[DiffArray, ForwardTrace]:
    """Run the model on ``x`` of shape ``L×T×D`` or ``N×L×T×D``."""
    config = config or params.config
    if config != params.config:
        raise ConfigurationError("Parameters were built for a different config")
    x = as_array(x)
    trace = ForwardTrace()
    with _stage("patch_embed"):
        patches = patch_embed(x, config)
    with _stage("low_rank_project"):
        if config.low_rank:
            h = low_rank_project(
                patches, params["proj.W1"], params["proj.W2"], params["proj.b"]
            )
        else:
            h = dense_project(patches, params["proj.W"], params["proj.b"])
        if config.positional_embedding:
            h = add(h, params["pos.E"])
    for i in range(1, config.n_blocks + 1):
        with _stage(f"block{i}"):
            block = params.scope(f"block{i}")
            h, weights = nanoblock_forward(h, block, config, training, rng)
        trace.fusion_weights.append(weights.numpy())
    with _stage("weighted_spatial_pool"):
        pooled, site_weights = weighted_spatial_pool(h, params.scope("pool"), config)
    trace.pooling_weights = site_weights.numpy()
    with _stage("prediction_head"):
        y = prediction_head(pooled, params.scope("head"), config)
    return y, trace


def measure_inference(params: NexusParams, x: Array, repeats: int = 5) -> float:
    """Mean wall-clock milliseconds per sample for eval-mode inference on ``x``."""
    batch = x if x.ndim == 4 else x[None]
    started = time.perf_counter()
    for _ in range(repeats):
        forward(batch, params)
    elapsed = time.perf_counter() - started
    return 1000.0 * elapsed / (repeats * batch.shape[0])
