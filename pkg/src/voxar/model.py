"""The five-layer gated three-stack autoregressive volume model.

Every layer runs one masked convolution per stack, mixes stacks through
1x1x1 projections (vertical -> depth -> horizontal, never backwards),
applies the gated activation tanh(first half) * sigmoid(second half),
and emits a skip contribution from the horizontal gate. Skip sums pass
through a final gated 1x1x1 block (the penultimate activation) and two
1x1x1 heads producing a per-voxel Gaussian (mean, log-std). Channel
mixing at 1x1x1 cannot enlarge receptive fields, so causality is decided
entirely by the stack masks.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DataError,
    ShapeError,
    TruncatedFileError,
    UsageError,
    VersionError,
)
from .stacks import LayerWiring, MaskVariant, StackKind, allowed_offsets, build_mask, paper_wiring
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Dropout",
    "EmissionField",
    "ForwardOutput",
    "gated_unit",
    "layer_forward",
    "model_forward",
    "nll",
    "sample",
    "save_checkpoint",
    "load_checkpoint",
    "LOG_STD_MIN",
    "LOG_STD_MAX",
]

LOG_STD_MIN = -7.0
LOG_STD_MAX = 7.0
HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = b"VXCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 5
    hidden_channels: int = 20  # gate halves are hidden_channels // 2
    kernel: int = 3
    dropout_rate: float = 0.15
    emission: str = "gaussian"

    def __post_init__(self):
        if self.layers < 2:
            raise ConfigError(f"layers must be >= 2, got {self.layers}")
        if self.hidden_channels < 2 or self.hidden_channels % 2 != 0:
            raise ConfigError(f"hidden_channels must be even and >= 2, got {self.hidden_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.emission != "gaussian":
            raise ConfigError(f"unknown emission family {self.emission!r}")


@dataclass
class Dropout:
    """Stochastic-forward state: channel dropout rate plus its generator."""

    rate: float
    rng: np.random.Generator


@dataclass
class EmissionField:
    """Per-voxel Gaussian parameters; log_std is clamped to [-7, 7]."""

    mean: Tensor  # (1, H, W, D)
    log_std: Tensor  # (1, H, W, D)


@dataclass
class ForwardOutput:
    emission: EmissionField
    penultimate: Tensor  # (hidden_channels // 2, H, W, D)


class ModelParams:
    """All learnable tensors, keyed by name in a fixed serialization order.

    Per layer: three masked stack kernels with biases, the three
    inter-stack 1x1x1 projections, a residual 1x1x1 projection (layers
    >= 2) and a skip 1x1x1 projection; then the head block and the two
    emission convolutions. Masked kernel taps are initialized to zero and
    never receive gradient, so causality survives any optimizer update.
    """

    def __init__(self, cfg: ModelConfig, rng=None, wiring: Optional[LayerWiring] = None):
        self.cfg = cfg
        self.wiring = wiring if wiring is not None else paper_wiring(cfg.layers, cfg.kernel)
        if len(self.wiring) != cfg.layers:
            raise ConfigError(
                f"wiring has {len(self.wiring)} layers, config says {cfg.layers}"
            )
        self.train_dims = None
        self._params = {}
        self._build(rng)

    # -- construction -------------------------------------------------

    def _add(self, name: str, shape, fan_in: int, rng, mask=None):
        if rng is None:
            data = np.zeros(shape)
        else:
            s = 1.0 / np.sqrt(max(fan_in, 1))
            data = rng.uniform(-s, s, size=shape)
        if mask is not None:
            data = data * mask  # exact zeros on masked taps
        self._params[name] = Tensor(data, requires_grad=True)

    def _build(self, rng):
        cfg = self.cfg
        n = cfg.hidden_channels // 2
        wide = cfg.hidden_channels
        k = cfg.kernel
        for li, spec in enumerate(self.wiring.layers):
            in_ch = 1 if li == 0 else n
            for stack, sspec in (
                ("vertical", spec.vertical),
                ("depth", spec.depth),
                ("horizontal", spec.horizontal),
            ):
                kind = StackKind(stack)
                live = len(allowed_offsets(kind, sspec.variant, k))
                mask = build_mask(kind, sspec.variant, k).data
                self._add(
                    f"layers.{li}.{stack}.kernel",
                    (wide, in_ch, k, k, k),
                    in_ch * max(live, 1),
                    rng,
                    mask=mask,
                )
                self._add(f"layers.{li}.{stack}.bias", (wide,), 1, None)
            self._add(f"layers.{li}.vert_to_depth.kernel", (wide, wide, 1, 1, 1), wide, rng)
            self._add(f"layers.{li}.vert_to_depth.bias", (wide,), 1, None)
            self._add(f"layers.{li}.vert_to_horiz.kernel", (wide, wide, 1, 1, 1), wide, rng)
            self._add(f"layers.{li}.vert_to_horiz.bias", (wide,), 1, None)
            self._add(f"layers.{li}.depth_to_horiz.kernel", (wide, wide, 1, 1, 1), wide, rng)
            self._add(f"layers.{li}.depth_to_horiz.bias", (wide,), 1, None)
            if spec.residual:
                self._add(f"layers.{li}.residual.kernel", (n, n, 1, 1, 1), n, rng)
                self._add(f"layers.{li}.residual.bias", (n,), 1, None)
            self._add(f"layers.{li}.skip.kernel", (wide, n, 1, 1, 1), n, rng)
            self._add(f"layers.{li}.skip.bias", (wide,), 1, None)
        self._add("head.kernel", (wide, wide, 1, 1, 1), wide, rng)
        self._add("head.bias", (wide,), 1, None)
        self._add("mean.kernel", (1, n, 1, 1, 1), n, rng)
        self._add("mean.bias", (1,), 1, None)
        self._add("log_std.kernel", (1, n, 1, 1, 1), n, rng)
        self._add("log_std.bias", (1,), 1, None)

    # -- access -------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params.keys())

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict):
        for name, t in self._params.items():
            if name not in state:
                raise DataError(f"missing parameter {name!r} in state")
            if state[name].shape != t.data.shape:
                raise DataError(
                    f"parameter {name!r} has shape {state[name].shape}, expected {t.data.shape}"
                )
            t.data = state[name].astype(np.float64).copy()

    def with_wiring(self, wiring: LayerWiring) -> "ModelParams":
        """Same tensors under a different mask wiring (verification aid)."""
        clone = ModelParams.__new__(ModelParams)
        clone.cfg = self.cfg
        clone.wiring = wiring
        clone.train_dims = self.train_dims
        clone._params = self._params
        return clone


# ---------------------------------------------------------------------------
# forward pieces

_ONES_1 = np.ones((1, 1, 1))


def _conv1(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return T.conv3d_masked(x, params[f"{name}.kernel"], _ONES_1, params[f"{name}.bias"])


def _drop(t: Tensor, dropout: Optional[Dropout]) -> Tensor:
    if dropout is None:
        return t
    return T.spatial_dropout(t, dropout.rate, dropout.rng, enabled=True)


def gated_unit(pre_activation: Tensor) -> Tensor:
    """tanh of the first channel half times sigmoid of the second."""
    first, second = T.channel_split(pre_activation)
    return T.mul(T.tanh(first), T.sigmoid(second))


def layer_forward(v_in, d_in, h_in, params: ModelParams, layer: int,
                  dropout: Optional[Dropout] = None):
    """One layer of the three stacks; returns (v, d, h, skip) tensors.

    Channel dropout follows every convolution, masked or 1x1x1. The
    horizontal pre-activation receives the vertical and depth
    pre-activations through projections; the residual connection (layers
    >= 2) reads the previous horizontal output directly.
    """
    spec = params.wiring.layers[layer]
    k = params.cfg.kernel

    def stack_conv(x, stack, sspec):
        mask = build_mask(StackKind(stack), sspec.variant, k)
        out = T.conv3d_masked(
            x, params[f"layers.{layer}.{stack}.kernel"], mask,
            params[f"layers.{layer}.{stack}.bias"],
        )
        return _drop(out, dropout)

    v_pre = stack_conv(v_in, "vertical", spec.vertical)
    d_pre = T.add(
        stack_conv(d_in, "depth", spec.depth),
        _drop(_conv1(v_pre, params, f"layers.{layer}.vert_to_depth"), dropout),
    )
    h_pre = T.add(
        T.add(
            stack_conv(h_in, "horizontal", spec.horizontal),
            _drop(_conv1(v_pre, params, f"layers.{layer}.vert_to_horiz"), dropout),
        ),
        _drop(_conv1(d_pre, params, f"layers.{layer}.depth_to_horiz"), dropout),
    )

    v_out = gated_unit(v_pre)
    d_out = gated_unit(d_pre)
    h_gate = gated_unit(h_pre)
    if spec.residual:
        h_out = T.add(h_gate, _drop(_conv1(h_in, params, f"layers.{layer}.residual"), dropout))
    else:
        h_out = h_gate
    skip = _drop(_conv1(h_gate, params, f"layers.{layer}.skip"), dropout)
    return v_out, d_out, h_out, skip


def model_forward(x, params: ModelParams, dropout: Optional[Dropout] = None) -> ForwardOutput:
    """Run all layers on a single-channel volume of any spatial size."""
    if isinstance(x, Tensor):
        xt = x
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        xt = Tensor(arr)
    if xt.data.ndim != 4 or xt.data.shape[0] != 1:
        raise ShapeError(f"expected a single-channel volume, got shape {xt.data.shape}")

    v = d = h = xt
    skip_total = None
    for li in range(params.cfg.layers):
        v, d, h, skip = layer_forward(v, d, h, params, li, dropout)
        skip_total = skip if skip_total is None else T.add(skip_total, skip)

    pen_pre = _drop(_conv1(skip_total, params, "head"), dropout)
    penultimate = gated_unit(pen_pre)
    mean = _conv1(penultimate, params, "mean")
    log_std = T.clamp(_conv1(penultimate, params, "log_std"), LOG_STD_MIN, LOG_STD_MAX)
    return ForwardOutput(emission=EmissionField(mean, log_std), penultimate=penultimate)


def nll(emission: EmissionField, x, mask=None) -> Tensor:
    """Mean Gaussian negative log density over masked-in voxels.

    Per voxel: 0.5*log(2*pi) + log_std + (x - mean)^2 / (2 * std^2).
    The reported log likelihood elsewhere is the negation of this.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape != emission.mean.data.shape:
        raise ShapeError(
            f"volume shape {arr.shape} != emission shape {emission.mean.data.shape}"
        )
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 3:
            mask = mask[None]
    xt = Tensor(arr)
    diff = T.sub(xt, emission.mean)
    sq = T.mul(diff, diff)
    half_inv_var = T.scale(T.exp(T.scale(emission.log_std, -2.0)), 0.5)
    per_voxel = T.add_scalar(
        T.add(emission.log_std, T.mul(sq, half_inv_var)), HALF_LOG_2PI
    )
    return T.masked_mean(per_voxel, mask)


def sample(params: ModelParams, dims, rng, temperature: float = 1.0) -> np.ndarray:
    """Ancestral sampling in raster order, one full forward per voxel.

    Each voxel is drawn from Normal(mean, temperature * std) given the
    volume generated so far, then clamped to [0, 1]. temperature 0 is the
    deterministic greedy decode. Correctness over speed: O(H*W*D)
    forward passes.
    """
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    h, w, d = dims
    vol = np.zeros(dims)
    for r in range(h):
        for c in range(w):
            for dd in range(d):
                out = model_forward(vol, params)
                mean = out.emission.mean.data[0, r, c, dd]
                std = np.exp(out.emission.log_std.data[0, r, c, dd])
                z = rng.standard_normal()
                vol[r, c, dd] = np.clip(mean + temperature * std * z, 0.0, 1.0)
    return vol


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "VXCK" | u16 version | u16 layers | u16 hidden | u16 kernel |
# f64 dropout_rate | u8 emission tag | 3x u32 training dims (0 = unset) |
# u32 param count | per parameter: u16 name length, name bytes, u8 ndim,
# u32 extents, f64 little-endian payload | u32 CRC32 of all prior bytes.


def save_checkpoint(path, params: ModelParams):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = params.cfg
    buf.write(struct.pack("<HHHH", CHECKPOINT_VERSION, cfg.layers, cfg.hidden_channels, cfg.kernel))
    buf.write(struct.pack("<d", cfg.dropout_rate))
    buf.write(struct.pack("<B", 0))  # gaussian per-voxel emission
    dims = params.train_dims or (0, 0, 0)
    buf.write(struct.pack("<III", *dims))
    items = list(params.items())
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(t.data.astype("<f8").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    off = 4
    version, layers, hidden, kernel = struct.unpack_from("<HHHH", payload, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} unsupported")
    (dropout_rate,) = struct.unpack_from("<d", payload, off)
    off += 8
    (emission_tag,) = struct.unpack_from("<B", payload, off)
    off += 1
    if emission_tag != 0:
        raise VersionError(f"{path}: unknown emission tag {emission_tag}")
    tdims = struct.unpack_from("<III", payload, off)
    off += 12
    (n_params,) = struct.unpack_from("<I", payload, off)
    off += 4

    cfg = ModelConfig(layers=layers, hidden_channels=hidden, kernel=kernel,
                      dropout_rate=dropout_rate)
    params = ModelParams(cfg, rng=None)
    params.train_dims = tuple(int(v) for v in tdims) if any(tdims) else None
    expected = params.names()
    try:
        for i in range(n_params):
            (name_len,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", payload, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            raw = payload[off : off + 8 * size]
            if len(raw) != 8 * size:
                raise TruncatedFileError(f"{path}: parameter payload cut short")
            off += 8 * size
            if i >= len(expected) or name != expected[i]:
                raise DataError(f"{path}: unexpected parameter {name!r} at position {i}")
            t = params[name]
            if tuple(shape) != t.data.shape:
                raise DataError(
                    f"{path}: parameter {name!r} shape {tuple(shape)} != {t.data.shape}"
                )
            t.data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    except struct.error as exc:
        raise TruncatedFileError(f"{path}: truncated checkpoint ({exc})") from exc
    if n_params != len(expected):
        raise DataError(f"{path}: {n_params} parameters, expected {len(expected)}")
    return params
