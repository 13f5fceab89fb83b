"""Causal mask construction and verification for the three-stack design.

Voxels are ordered lexicographically by (row, column, depth), depth
fastest. Each voxel's conditional may depend only on voxels strictly
earlier in that order (its causal past). Three masked-convolution stacks
tile that past:

* vertical   — everything in rows above: ``{(r', c', d') : r' < r}``
* depth      — same row, columns to the left: ``{(r, c', d') : c' < c}``
* horizontal — same row and column, earlier depths: ``{(r, c, d') : d' < d}``

Each stack comes in two mask variants. Variant A (first layer, reading
the raw volume) keeps the stack's defining inequality strict. Variant B
(all later layers, reading stack features) additionally allows the
anchor offset along the stack's own axis: stack features at a position
carry only older context, so reading them at the anchor stays causal
while letting the receptive field grow into the full slab instead of a
plane that recedes one step per layer. Without the B variants the union
of the three fields never covers the causal past, however many layers
are stacked.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor

__all__ = [
    "StackKind",
    "MaskVariant",
    "VoxelIndex",
    "StackSpec",
    "LayerSpec",
    "LayerWiring",
    "paper_wiring",
    "allowed_offsets",
    "build_mask",
    "causal_past",
    "causal_past_size",
    "receptive_field",
    "naive_receptive_field",
    "CausalityReport",
    "verify_causality",
]


class StackKind(enum.Enum):
    VERTICAL = "vertical"
    DEPTH = "depth"
    HORIZONTAL = "horizontal"


class MaskVariant(enum.Enum):
    A = "A"  # strict: excludes the anchor offset along the stack axis
    B = "B"  # inclusive: adds the anchor offset (stack-to-stack layers)


class VoxelIndex(NamedTuple):
    r: int
    c: int
    d: int


def allowed_offsets(kind: StackKind, variant: MaskVariant, k: int) -> frozenset:
    """Kernel offsets a (kind, variant) masked convolution may touch.

    Offsets range over [-k//2, +k//2]^3. The strict (A) sets are
    pairwise disjoint across stacks and, together with horizontal-B's
    center tap, tile the lexicographically-nonpositive offset cone.
    """
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel extent must be odd and positive, got {k}")
    half = k // 2
    rng = range(-half, half + 1)
    inclusive = variant is MaskVariant.B
    offsets = []
    for dr in rng:
        for dc in rng:
            for dd in rng:
                if kind is StackKind.VERTICAL:
                    ok = dr < 0 or (inclusive and dr == 0)
                elif kind is StackKind.DEPTH:
                    ok = dr == 0 and (dc < 0 or (inclusive and dc == 0))
                else:
                    ok = dr == 0 and dc == 0 and (dd < 0 or (inclusive and dd == 0))
                if ok:
                    offsets.append((dr, dc, dd))
    return frozenset(offsets)


def build_mask(kind: StackKind, variant: MaskVariant, k: int) -> Tensor:
    """{0,1} tap mask of shape (k, k, k) realizing allowed_offsets."""
    half = k // 2
    mask = np.zeros((k, k, k))
    for (dr, dc, dd) in allowed_offsets(kind, variant, k):
        mask[dr + half, dc + half, dd + half] = 1.0
    return Tensor(mask)


def causal_past(v, dims) -> list:
    """All voxels strictly before ``v`` in raster order, in raster order."""
    h, w, d = dims
    r, c, dd = v
    if not (0 <= r < h and 0 <= c < w and 0 <= dd < d):
        raise UsageError(f"voxel {tuple(v)} out of bounds for dims {tuple(dims)}")
    out = []
    for rr in range(r + 1):
        c_max = w if rr < r else c + 1
        for cc in range(c_max):
            if rr == r and cc == c:
                d_max = dd
            else:
                d_max = d
            for zz in range(d_max):
                out.append(VoxelIndex(rr, cc, zz))
    return out


def causal_past_size(v, dims) -> int:
    h, w, d = dims
    r, c, dd = v
    return (r * w + c) * d + dd


def _causal_past_mask(v, dims) -> np.ndarray:
    """Boolean volume marking the causal past of ``v``."""
    h, w, d = dims
    flat = np.arange(h * w * d).reshape(dims)
    return flat < causal_past_size(v, dims)


# ---------------------------------------------------------------------------
# wiring description


@dataclass(frozen=True)
class StackSpec:
    variant: MaskVariant
    kernel: int


@dataclass(frozen=True)
class LayerSpec:
    """One layer's stack configuration.

    Data always flows vertical -> depth, vertical -> horizontal and
    depth -> horizontal within a layer (when both ends exist); never the
    reverse. ``residual`` adds the previous horizontal output to this
    layer's horizontal gate output.
    """

    vertical: Optional[StackSpec] = None
    depth: Optional[StackSpec] = None
    horizontal: Optional[StackSpec] = None
    residual: bool = False


@dataclass(frozen=True)
class LayerWiring:
    layers: tuple

    def __len__(self):
        return len(self.layers)


def paper_wiring(n_layers: int = 5, kernel: int = 3) -> LayerWiring:
    """Standard wiring: strict masks in layer 1, inclusive afterwards."""
    if n_layers < 1:
        raise ConfigError(f"need at least one layer, got {n_layers}")
    layers = []
    for i in range(n_layers):
        variant = MaskVariant.A if i == 0 else MaskVariant.B
        layers.append(
            LayerSpec(
                vertical=StackSpec(variant, kernel),
                depth=StackSpec(variant, kernel),
                horizontal=StackSpec(variant, kernel),
                residual=i > 0,
            )
        )
    return LayerWiring(tuple(layers))


# ---------------------------------------------------------------------------
# receptive-field oracle (boolean back-propagation through the wiring)


def _dilate(field: np.ndarray, offsets) -> np.ndarray:
    """Positions reachable from ``field`` through one conv's offsets.

    Backward step: if output position p needs input position p + delta,
    the needed-input field is the union of ``field`` shifted by every
    allowed delta, clipped at the volume boundary.
    """
    h, w, d = field.shape
    out = np.zeros_like(field)
    for (dr, dc, dd) in offsets:
        src = field[
            max(0, -dr) : h - max(0, dr),
            max(0, -dc) : w - max(0, dc),
            max(0, -dd) : d - max(0, dd),
        ]
        out[
            max(0, dr) : h - max(0, -dr),
            max(0, dc) : w - max(0, -dc),
            max(0, dd) : d - max(0, -dd),
        ] |= src
    return out


def receptive_field(wiring: LayerWiring, target, dims) -> set:
    """Every input voxel that can influence the output at ``target``.

    Brute-force: propagates needed-position sets backwards through every
    stack, inter-stack projection, residual and skip edge of the wiring.
    1x1x1 projections and gates preserve positions, so only the masked
    convolutions dilate the sets.
    """
    h, w, d = dims
    r, c, dd = target
    if not (0 <= r < h and 0 <= c < w and 0 <= dd < d):
        raise UsageError(f"target {tuple(target)} out of bounds for dims {tuple(dims)}")

    target_field = np.zeros(dims, dtype=bool)
    target_field[r, c, dd] = True

    n = len(wiring.layers)
    zeros = lambda: np.zeros(dims, dtype=bool)  # noqa: E731

    # skips tap the gate output of the most downstream stack present
    def out_stack(spec: LayerSpec):
        if spec.horizontal is not None:
            return "horizontal"
        if spec.depth is not None:
            return "depth"
        return "vertical"

    need_v_out = zeros()
    need_d_out = zeros()
    need_h_out = zeros()
    need_input = zeros()

    for li in range(n - 1, -1, -1):
        spec = wiring.layers[li]
        need_v_pre = zeros()
        need_d_pre = zeros()
        need_h_pre = zeros()

        gate_need = {"vertical": need_v_out.copy(), "depth": need_d_out.copy(),
                     "horizontal": need_h_out.copy()}
        gate_need[out_stack(spec)] |= target_field  # skip edge

        need_v_out, need_d_out, need_h_out = zeros(), zeros(), zeros()

        if spec.horizontal is not None:
            need_h_gate = gate_need["horizontal"]
            need_h_pre |= need_h_gate
            if spec.residual:
                need_h_out |= need_h_gate  # residual reads the previous h output
            offs = allowed_offsets(StackKind.HORIZONTAL, spec.horizontal.variant,
                                   spec.horizontal.kernel)
            need_h_out |= _dilate(need_h_pre, offs)
            if spec.vertical is not None:
                need_v_pre |= need_h_pre
            if spec.depth is not None:
                need_d_pre |= need_h_pre

        if spec.depth is not None:
            need_d_pre |= gate_need["depth"]
            offs = allowed_offsets(StackKind.DEPTH, spec.depth.variant, spec.depth.kernel)
            need_d_out |= _dilate(need_d_pre, offs)
            if spec.vertical is not None:
                need_v_pre |= need_d_pre

        if spec.vertical is not None:
            need_v_pre |= gate_need["vertical"]
            offs = allowed_offsets(StackKind.VERTICAL, spec.vertical.variant,
                                   spec.vertical.kernel)
            need_v_out |= _dilate(need_v_pre, offs)

        if li == 0:
            need_input = need_v_out | need_d_out | need_h_out
        # otherwise need_*_out become the required outputs of layer li-1

    return {VoxelIndex(*idx) for idx in np.argwhere(need_input)}


def naive_receptive_field(n_layers: int, kernel: int, target, dims) -> set:
    """Field of a plain single-mask causal CNN of the same depth.

    Layer 1 masks the lexicographically-negative offsets, later layers
    also allow the zero offset. This is the reference design whose field
    the three-stack wiring must dominate.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel extent must be odd and positive, got {kernel}")
    half = kernel // 2
    cube = [
        (dr, dc, dd)
        for dr in range(-half, half + 1)
        for dc in range(-half, half + 1)
        for dd in range(-half, half + 1)
    ]
    strict = [o for o in cube if o < (0, 0, 0)]
    inclusive = strict + [(0, 0, 0)]

    field = np.zeros(dims, dtype=bool)
    field[tuple(target)] = True
    for li in range(n_layers - 1, -1, -1):
        field = _dilate(field, inclusive if li > 0 else strict)
    return {VoxelIndex(*idx) for idx in np.argwhere(field)}


# ---------------------------------------------------------------------------
# perturbation-based causality verifier


@dataclass
class CausalityReport:
    dims: tuple
    checked: int
    violations: list  # (perturbed VoxelIndex, changed VoxelIndex) pairs

    @property
    def passed(self) -> bool:
        return not self.violations

    def render(self) -> str:
        lines = [f"({u.r},{u.c},{u.d}) -> ({v.r},{v.c},{v.d})" for u, v in self.violations]
        lines.append("PASS" if self.passed else f"FAIL {len(self.violations)}")
        return "\n".join(lines)


def verify_causality(params, dims, trials: Optional[int] = None, rng=None) -> CausalityReport:
    """Perturb input voxels one at a time and flag acausal output changes.

    For each perturbed voxel u the emission parameters are recomputed;
    any changed output voxel v must have u in its causal past. Masking
    produces exact zeros, so any bitwise change counts — no tolerance.
    ``trials=None`` sweeps every voxel exhaustively.
    """
    from .model import model_forward  # local import; model depends on this module

    if rng is None:
        rng = np.random.default_rng(0)
    h, w, d = dims
    total = h * w * d

    base = rng.random(dims)
    ref = model_forward(base, params)
    ref_mean = ref.emission.mean.data[0]
    ref_log_std = ref.emission.log_std.data[0]

    if trials is None or trials >= total:
        flat_targets = np.arange(total)
    else:
        flat_targets = rng.choice(total, size=trials, replace=False)

    raster = np.arange(total).reshape(dims)
    violations = []
    for flat_u in flat_targets:
        u = VoxelIndex(*np.unravel_index(flat_u, dims))
        bumped = base.copy()
        bumped[u] += 1.0
        out = model_forward(bumped, params)
        changed = (out.emission.mean.data[0] != ref_mean) | (
            out.emission.log_std.data[0] != ref_log_std
        )
        bad = changed & (raster <= flat_u)  # u must precede v strictly
        for idx in np.argwhere(bad):
            violations.append((u, VoxelIndex(*idx)))
    return CausalityReport(dims=tuple(dims), checked=len(flat_targets), violations=violations)
