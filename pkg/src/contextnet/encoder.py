"""Convolutional audio encoder with squeeze-and-excitation context.

The encoder is a stack of convolution blocks.  Each block runs ``m`` layers
of depthwise-separable convolution, batch norm and activation, gates the
result with an SE module, and adds a pointwise projection of its input.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, EmptyInputError, UnsupportedFormatError
from .frontend import NUM_MELS, AcousticFeatures
from .numerics import Tensor

CHECKPOINT_MAGIC = b"CNCK"
CHECKPOINT_VERSION = 1
SE_REDUCTION = 8


def round_channels(channels: float) -> int:
    """Nearest multiple of 8, never below 8."""
    return max(8, int(round(channels / 8.0)) * 8)


def se_bottleneck(channels: int) -> int:
    return max(1, channels // SE_REDUCTION)


@dataclass
class BlockSpec:
    num_layers: int
    out_channels: int
    kernel_size: int = 5
    stride: int = 1
    residual: bool = True
    se: bool = True
    se_window: int | None = None

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.out_channels < 1:
            raise ConfigurationError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.se_window is not None and self.se_window < 1:
            raise ConfigurationError(f"se_window must be >= 1, got {self.se_window}")


@dataclass
class EncoderConfig:
    alpha: float
    blocks: list[BlockSpec]
    input_dim: int = NUM_MELS
    activation: str = "swish"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        if not self.blocks:
            raise ConfigurationError("encoder needs at least one block")
        if self.activation not in nx.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def output_dim(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def total_stride(self) -> int:
        return math.prod(b.stride for b in self.blocks)

    def block_inputs(self) -> list[int]:
        dims = [self.input_dim]
        for b in self.blocks[:-1]:
            dims.append(b.out_channels)
        return dims

    def output_length(self, length: int) -> int:
        for b in self.blocks:
            length = -(-length // b.stride)
        return length

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EncoderConfig":
        return cls(**dict(data))

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls.from_dict(json.loads(text))


def default_config(alpha: float = 1.0, kernel: int = 5, reduction: str = "8x",
                   se_window: int | None = None) -> EncoderConfig:
    """The 23-block encoder, widths scaled by ``alpha``.

    ``reduction="8x"`` puts stride-2 blocks at indices 3, 7 and 14;
    ``"2x"`` keeps only the one at index 3.
    """
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigurationError(f"kernel must be odd, got {kernel}")
    strided = {"8x": {3, 7, 14}, "2x": {3}}.get(reduction)
    if strided is None:
        raise ConfigurationError(f"reduction must be '2x' or '8x', got {reduction!r}")
    blocks = []
    for i in range(23):
        if i < 11:
            base = 256
        elif i < 22:
            base = 512
        else:
            base = 640
        edge = i in (0, 22)
        blocks.append(BlockSpec(
            num_layers=1 if edge else 5,
            out_channels=round_channels(base * alpha),
            kernel_size=kernel,
            stride=2 if i in strided else 1,
            residual=not edge,
            se=not edge,
            se_window=None if edge else se_window,
        ))
    return EncoderConfig(alpha=alpha, blocks=blocks)


def reduced_config(alpha: float = 0.125, kernel: int = 5, num_layers: int = 5) -> EncoderConfig:
    """Five-block encoder for desk-scale runs: edge blocks plus three strided blocks (8x)."""
    widths = [256, 256, 256, 512, 640]
    blocks = []
    for i, base in enumerate(widths):
        edge = i in (0, 4)
        blocks.append(BlockSpec(
            num_layers=1 if edge else num_layers,
            out_channels=round_channels(base * alpha),
            kernel_size=kernel,
            stride=1 if edge else 2,
            residual=not edge,
            se=not edge,
        ))
    return EncoderConfig(alpha=alpha, blocks=blocks)


# -- parameters --------------------------------------------------------------

def _bn_entries(prefix: str, dim: int, dtype) -> dict:
    return {
        f"{prefix}.gamma": nx.parameter(np.ones(dim), dtype=dtype),
        f"{prefix}.beta": nx.parameter(np.zeros(dim), dtype=dtype),
        f"{prefix}.running_mean": Tensor(np.zeros(dim), dtype=dtype),
        f"{prefix}.running_var": Tensor(np.ones(dim), dtype=dtype),
    }


def init_block_params(spec: BlockSpec, in_channels: int, rng: np.random.Generator,
                      dtype=None) -> dict[str, Tensor]:
    dtype = dtype or nx.get_default_dtype()
    out = spec.out_channels
    k = spec.kernel_size
    params: dict[str, Tensor] = {}
    d_in = in_channels
    for j in range(spec.num_layers):
        p = f"layer{j}"
        params[f"{p}.dw.weight"] = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(k), (k, d_in)), dtype=dtype)
        params[f"{p}.dw.bias"] = nx.parameter(np.zeros(d_in), dtype=dtype)
        params[f"{p}.pw.weight"] = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, out)), dtype=dtype)
        params[f"{p}.pw.bias"] = nx.parameter(np.zeros(out), dtype=dtype)
        params.update(_bn_entries(f"{p}.bn", out, dtype))
        d_in = out
    if spec.se and spec.residual:
        db = se_bottleneck(out)
        params["se.w1"] = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(out), (out, db)), dtype=dtype)
        params["se.b1"] = nx.parameter(np.zeros(db), dtype=dtype)
        params["se.w2"] = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(db), (db, out)), dtype=dtype)
        params["se.b2"] = nx.parameter(np.zeros(out), dtype=dtype)
    if spec.residual:
        params["proj.weight"] = nx.parameter(
            rng.normal(0.0, 1.0 / math.sqrt(in_channels), (in_channels, out)), dtype=dtype)
        params["proj.bias"] = nx.parameter(np.zeros(out), dtype=dtype)
        params.update(_bn_entries("proj.bn", out, dtype))
    return params


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator, dtype=None) -> dict[str, Tensor]:
    """Flat ``{"encoder.block{i}.<name>": Tensor}`` mapping; BN running stats have no grad."""
    params = {}
    for i, (spec, d_in) in enumerate(zip(config.blocks, config.block_inputs())):
        for name, t in init_block_params(spec, d_in, rng, dtype).items():
            params[f"encoder.block{i}.{name}"] = t
    return params


def block_view(params: Mapping[str, Tensor], index: int) -> dict[str, Tensor]:
    prefix = f"encoder.block{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# -- forward -----------------------------------------------------------------

@dataclass
class SEParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    window: int | None = None

    @classmethod
    def from_block(cls, params: Mapping[str, Tensor], window: int | None = None) -> "SEParams":
        return cls(params["se.w1"], params["se.b1"], params["se.w2"], params["se.b2"], window)


def se_module(x: Tensor, p: SEParams, activation: str = "swish") -> Tensor:
    """Gate every frame of ``x`` ([..., T, D]) by sigmoid channel weights.

    The weights come from the time-average of ``x``: over the whole utterance
    when ``p.window`` is None, else over a centred window around each frame.
    """
    D = x.shape[-1]
    if p.w1.shape[0] != D or p.w2.shape[1] != D:
        raise ConfigurationError(f"SE weights {p.w1.shape}/{p.w2.shape} do not match {D} channels")
    T = x.shape[-2]
    window = p.window
    if window is not None and window >= 2 * T - 1:
        window = None
    pooled = nx.time_pool(x, window)
    hidden = nx.ACTIVATIONS[activation](nx.conv1d_pointwise(pooled, p.w1, p.b1))
    gates = nx.sigmoid(nx.conv1d_pointwise(hidden, p.w2, p.b2))
    return nx.mul(x, gates)


def _conv_layer(x, params, prefix, stride, act, train):
    y = nx.conv1d_depthwise(x, params[f"{prefix}.dw.weight"], stride, params[f"{prefix}.dw.bias"])
    y = nx.conv1d_pointwise(y, params[f"{prefix}.pw.weight"], params[f"{prefix}.pw.bias"])
    y = nx.batch_norm(y, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
                      params[f"{prefix}.bn.running_mean"], params[f"{prefix}.bn.running_var"], train)
    return act(y)


def conv_block(x: Tensor, spec: BlockSpec, params: Mapping[str, Tensor], train: bool = False,
               activation: str = "swish") -> Tensor:
    """One encoder block, ``Act(SE(f^m(x)) + P(x))``; the last layer carries the stride."""
    act = nx.ACTIVATIONS[activation]
    expected = params.get("layer0.dw.weight")
    if expected is None or expected.shape[1] != x.shape[-1]:
        got = None if expected is None else expected.shape
        raise ConfigurationError(f"block expects input channels from {got}, input is {x.shape}")
    if f"layer{spec.num_layers - 1}.pw.weight" not in params or f"layer{spec.num_layers}.pw.weight" in params:
        raise ConfigurationError(f"parameters do not describe {spec.num_layers} layers")
    if params[f"layer{spec.num_layers - 1}.pw.weight"].shape[1] != spec.out_channels:
        raise ConfigurationError("pointwise output width does not match spec.out_channels")
    y = x
    for j in range(spec.num_layers):
        stride = spec.stride if j == spec.num_layers - 1 else 1
        y = _conv_layer(y, params, f"layer{j}", stride, act, train)
    if not spec.residual:
        return y
    if spec.se:
        y = se_module(y, SEParams.from_block(params, spec.se_window), activation)
    r = nx.subsample_time(x, spec.stride)
    r = nx.conv1d_pointwise(r, params["proj.weight"], params["proj.bias"])
    r = nx.batch_norm(r, params["proj.bn.gamma"], params["proj.bn.beta"],
                      params["proj.bn.running_mean"], params["proj.bn.running_var"], train)
    return act(nx.add(y, r))


def encode(features, config: EncoderConfig, params: Mapping[str, Tensor], train: bool = False) -> Tensor:
    """Run all blocks.  ``features`` is AcousticFeatures, ``[T, D]`` or ``[B, T, D]``."""
    if isinstance(features, AcousticFeatures):
        features = features.frames
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features), dtype=nx.get_default_dtype())
    if x.ndim not in (2, 3):
        raise ConfigurationError(f"features must be [T, D] or [B, T, D], got {x.shape}")
    if x.shape[-1] != config.input_dim:
        raise ConfigurationError(f"feature dim {x.shape[-1]} != config.input_dim {config.input_dim}")
    if x.shape[-2] == 0:
        raise EmptyInputError("cannot encode an utterance with zero frames")
    for i, spec in enumerate(config.blocks):
        x = conv_block(x, spec, block_view(params, i), train, config.activation)
    return x


# -- checkpoints ---------------------------------------------------------------

def write_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write the CNCK binary format (all values stored as little-endian float32)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise UnsupportedFormatError(f"{path}: not a CNCK checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(f"{path}: checkpoint version {version} is not supported")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = math.prod(dims)
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise UnsupportedFormatError(f"{path}: truncated checkpoint ({exc})") from exc
    return out


def load_params(arrays: Mapping[str, np.ndarray], template: Mapping[str, Tensor]) -> None:
    """Copy checkpoint arrays into an initialised parameter mapping in place."""
    for name, t in template.items():
        if name not in arrays:
            raise ConfigurationError(f"checkpoint is missing tensor {name!r}")
        if arrays[name].shape != t.shape:
            raise ConfigurationError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.shape}")
        t.data[...] = arrays[name]
