"""Dense float64 tensors with a reverse-mode differentiation tape.

All numeric kernels live here: the masked 3D convolution, channel-wise
(spatial) dropout, gated-unit building blocks and the scalar reductions
used by the likelihood. Data is stored row-major (last dimension
fastest), so ``flat(i0..in) = sum(i_k * stride_k)`` with the last stride
equal to 1 — numpy's C order is the single source of truth for
flattening.

Ops executed while a :class:`Tape` is active are recorded in execution
order; replaying their backward rules in reverse yields gradients for
every tensor flagged with ``requires_grad``. Without an active tape the
ops are plain numpy computations with no graph overhead.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "exp",
    "tanh",
    "sigmoid",
    "clamp",
    "tensor_sum",
    "masked_mean",
    "conv3d_masked",
    "spatial_dropout",
    "channel_split",
    "channel_concat",
]


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_needs_grad", "_inputs", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._needs_grad = requires_grad
        self._inputs = ()
        self._bw = None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small conveniences; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)


class Tape:
    """Ordered record of ops; reverse replay produces gradients.

    Use as a context manager around the forward computation, then call
    :meth:`backward` (or the module-level :func:`backward`) on the scalar
    loss. Intermediate graph references are dropped afterwards.
    """

    _active = None

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        if Tape._active is not None:
            raise UsageError("a tape is already recording")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    def _record(self, node: Tensor):
        self._nodes.append(node)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)
            node._bw = None
            node._inputs = ()
        self._nodes.clear()


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor."""
    tape.backward(loss)


def _accum(t: Tensor, g):
    if not t._needs_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data, inputs, bw) -> Tensor:
    out = Tensor(data)
    out._needs_grad = any(t._needs_grad for t in inputs)
    tape = Tape._active
    if tape is not None and out._needs_grad:
        out._inputs = inputs
        out._bw = bw
        tape._record(out)
    return out


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(a, g)

    return _make(a.data + s, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through unclipped entries."""
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(a.data.sum(), (a,), bw)


def masked_mean(a: Tensor, mask=None) -> Tensor:
    """Mean of ``a`` over voxels where ``mask`` is nonzero (all, if None)."""
    if mask is None:
        weights = np.ones_like(a.data)
    else:
        weights = np.asarray(mask, dtype=np.float64)
        if weights.shape != a.data.shape:
            raise ShapeError(
                f"masked_mean: mask shape {weights.shape} != data shape {a.data.shape}"
            )
    count = weights.sum()
    if count == 0:
        raise UsageError("masked_mean: mask selects no voxels")

    def bw(g):
        _accum(a, float(g) * weights / count)

    return _make((a.data * weights).sum() / count, (a,), bw)


# ---------------------------------------------------------------------------
# channel plumbing


def channel_split(a: Tensor):
    """Split the leading (channel) axis into two equal halves."""
    n = a.data.shape[0]
    if n % 2 != 0:
        raise ShapeError(f"channel_split: channel count {n} is odd")
    h = n // 2
    first_data = a.data[:h].copy()
    second_data = a.data[h:].copy()

    def bw_first(g):
        if a._needs_grad:
            if a.grad is None:
                a.zero_grad()
            a.grad[:h] += g

    def bw_second(g):
        if a._needs_grad:
            if a.grad is None:
                a.zero_grad()
            a.grad[h:] += g

    return _make(first_data, (a,), bw_first), _make(second_data, (a,), bw_second)


def channel_concat(parts) -> Tensor:
    """Concatenate tensors along the leading (channel) axis."""
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        start = 0
        for p, size in zip(parts, sizes):
            _accum(p, g[start : start + size])
            start += size

    return _make(data, tuple(parts), bw)


# ---------------------------------------------------------------------------
# masked 3D convolution


def conv3d_masked(x: Tensor, kernel: Tensor, mask, bias: Tensor) -> Tensor:
    """Same-size zero-padded 3D convolution with a {0,1} tap mask.

    Args:
        x: input of shape (C_in, H, W, D).
        kernel: weights of shape (C_out, C_in, k0, k1, k2); extents odd.
        mask: {0,1} array of shape (k0, k1, k2). Taps with mask 0
            contribute exactly zero to the output and receive exactly
            zero gradient, whatever the kernel holds there.
        bias: per-output-channel offset, shape (C_out,).

    Returns:
        Tensor of shape (C_out, H, W, D).
    """
    mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d_masked: input must be 4-d, got {x.data.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d_masked: kernel must be 5-d, got {kernel.data.shape}")
    c_out, c_in, k0, k1, k2 = kernel.data.shape
    if any(k % 2 == 0 for k in (k0, k1, k2)):
        raise ConfigError(f"conv3d_masked: kernel extents {(k0, k1, k2)} must all be odd")
    if mask_data.shape != (k0, k1, k2):
        raise ShapeError(
            f"conv3d_masked: mask shape {mask_data.shape} != kernel spatial {(k0, k1, k2)}"
        )
    if x.data.shape[0] != c_in:
        raise ShapeError(
            f"conv3d_masked: input has {x.data.shape[0]} channels, kernel expects {c_in}"
        )
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv3d_masked: bias shape {bias.data.shape} != ({c_out},)")

    _, h, w, d = x.data.shape
    p0, p1, p2 = k0 // 2, k1 // 2, k2 // 2
    taps = [tuple(idx) for idx in np.argwhere(mask_data != 0)]

    padded = np.zeros((c_in, h + 2 * p0, w + 2 * p1, d + 2 * p2))
    padded[:, p0 : p0 + h, p1 : p1 + w, p2 : p2 + d] = x.data

    out_data = np.empty((c_out, h, w, d))
    out_data[:] = bias.data[:, None, None, None]
    for (i, j, l) in taps:
        win = padded[:, i : i + h, j : j + w, l : l + d]
        out_data += np.tensordot(kernel.data[:, :, i, j, l], win, axes=([1], [0]))

    def bw(g):
        if bias._needs_grad:
            _accum(bias, g.sum(axis=(1, 2, 3)))
        if kernel._needs_grad:
            if kernel.grad is None:
                kernel.zero_grad()
            for (i, j, l) in taps:
                win = padded[:, i : i + h, j : j + w, l : l + d]
                kernel.grad[:, :, i, j, l] += np.tensordot(
                    g, win, axes=([1, 2, 3], [1, 2, 3])
                )
        if x._needs_grad:
            gpad = np.zeros_like(padded)
            for (i, j, l) in taps:
                gpad[:, i : i + h, j : j + w, l : l + d] += np.tensordot(
                    kernel.data[:, :, i, j, l], g, axes=([0], [0])
                )
            _accum(x, gpad[:, p0 : p0 + h, p1 : p1 + w, p2 : p2 + d])

    return _make(out_data, (x, kernel, bias), bw)


# ---------------------------------------------------------------------------
# channel-wise dropout


def spatial_dropout(x: Tensor, rate: float, rng, enabled: bool = True) -> Tensor:
    """Drop whole channels with probability ``rate``, scaling survivors.

    One Bernoulli draw per channel multiplies every voxel of that channel
    by either 0 or 1/(1-rate) (inverted scaling, so the expectation is
    preserved and inference needs no rescaling). Disabled, it is the
    identity map bit for bit.
    """
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"spatial_dropout: rate {rate} outside [0, 1)")
    if not enabled:
        return x
    c = x.data.shape[0]
    keep = 1.0 - rate
    mult = (rng.random(c) >= rate) / keep  # per-channel: 0 or 1/keep
    mult_col = mult.reshape((c,) + (1,) * (x.data.ndim - 1))

    def bw(g):
        _accum(x, g * mult_col)

    return _make(x.data * mult_col, (x,), bw)
