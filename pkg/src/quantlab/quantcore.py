"""Uniform quantization primitives: grid fitting, quantize/dequantize,
fake-quantize, and bit-packed code serialization.

Conventions (documented once, relied on everywhere):
  * rounding is round-half-away-from-zero;
  * asymmetric codes live in [0, 2^b - 1] with an integer zero point
    z = clamp(round(-min/s), 0, 2^b - 1); the fitted range is extended to
    include zero, which keeps z in range, makes the grid a fixed point of
    re-quantization (exact idempotence), and represents constant groups
    exactly;
  * the symmetric grid excludes -2^(b-1) (codes in +-(2^(b-1) - 1));
  * bits == 16 is a pass-through sentinel (no quantization);
  * an all-zero group gets scale 1 and zero point 0.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

PASSTHROUGH_BITS = 16

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"
PER_TOKEN = "per_token"
PER_GROUP = "per_group"


@dataclass(frozen=True)
class QuantSpec:
    """Quantization configuration: bit-width, symmetry, granularity.

    ``axis`` is the channel axis for per_channel and the grouped axis for
    per_group (elements sharing a scale are consecutive runs of
    ``group_size`` along it). clip_ratio multiplicatively shrinks the
    fitted range before the scale is computed.
    """

    bits: int
    symmetric: bool = False
    granularity: str = PER_GROUP
    axis: int = 1
    group_size: int = 128
    clip_ratio: float = 1.0

    def __post_init__(self):
        if self.bits != PASSTHROUGH_BITS and not (2 <= self.bits <= 8):
            raise ValueError(f"bits must be in 2..8 or 16, got {self.bits}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL, PER_TOKEN, PER_GROUP):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_GROUP and self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if not (0.0 < self.clip_ratio <= 1.0):
            raise ValueError("clip_ratio must be in (0, 1]")

    @property
    def passthrough(self) -> bool:
        return self.bits >= PASSTHROUGH_BITS

    def with_clip(self, clip_ratio: float) -> "QuantSpec":
        return replace(self, clip_ratio=clip_ratio)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "symmetric": self.symmetric,
            "granularity": self.granularity,
            "axis": self.axis,
            "group_size": self.group_size,
            "clip_ratio": self.clip_ratio,
        }

    @staticmethod
    def from_dict(d: dict) -> "QuantSpec":
        return QuantSpec(**d)


@dataclass
class QuantParams:
    """Fitted scales/zero-points on the group grid of a tensor.

    ``scales`` has one entry per group, arranged so that repeating each
    entry along the grouped axis recovers an elementwise array:
    shape (rows, n_groups) when grouping runs along axis 1 and
    (n_groups, cols) when along axis 0. Per-tensor params are (1, 1).
    """

    scales: np.ndarray
    zero_points: Optional[np.ndarray]
    spec: QuantSpec
    shape: tuple

    def expand(self):
        """Return elementwise (scales, zero_points) broadcast to ``shape``."""
        s = _expand_grid(self.scales, self.shape, self.spec)
        if self.zero_points is None:
            return s, None
        return s, _expand_grid(self.zero_points, self.shape, self.spec)


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int32, original shape; symmetric codes are signed
    params: QuantParams
    spec: QuantSpec
    shape: tuple


def _grouping(shape, spec: QuantSpec):
    """Resolve (grouped_axis, group boundaries) for a 2-D shape.

    grouped_axis is the axis along which consecutive elements share params.
    Returns (axis, starts) where starts are the group start indices along
    that axis; the final group may be ragged.
    """
    rows, cols = shape
    if spec.granularity == PER_TENSOR:
        return None, None
    if spec.granularity == PER_TOKEN:
        return 1, np.array([0])  # one group per row, spanning all columns
    if spec.granularity == PER_CHANNEL:
        # each index along spec.axis is a channel; grouping runs along the
        # other axis and spans its full extent
        g_axis = 1 - spec.axis
        return g_axis, np.array([0])
    # per_group
    g_axis = spec.axis
    extent = shape[g_axis]
    size = min(spec.group_size, extent)
    return g_axis, np.arange(0, extent, size)


def _group_sizes(extent: int, starts: np.ndarray) -> np.ndarray:
    ends = np.append(starts[1:], extent)
    return ends - starts


def _expand_grid(grid: np.ndarray, shape, spec: QuantSpec) -> np.ndarray:
    if spec.granularity == PER_TENSOR:
        return np.broadcast_to(grid, shape)
    g_axis, starts = _grouping(shape, spec)
    sizes = _group_sizes(shape[g_axis], starts)
    return np.repeat(grid, sizes, axis=g_axis)


def _group_minmax(x: np.ndarray, spec: QuantSpec):
    """Per-group (min, max) arrays on the group grid."""
    if spec.granularity == PER_TENSOR:
        return (np.array([[x.min()]]), np.array([[x.max()]]))
    g_axis, starts = _grouping(x.shape, spec)
    mn = np.minimum.reduceat(x, starts, axis=g_axis)
    mx = np.maximum.reduceat(x, starts, axis=g_axis)
    return mn, mx


def _round_half_away(t: np.ndarray) -> np.ndarray:
    return np.where(t >= 0, np.floor(t + 0.5), np.ceil(t - 0.5))


def snap_scale(scales: np.ndarray, bits: int) -> np.ndarray:
    """Round scales to 53 - bits mantissa bits (relative change ~2^-45).

    Every grid value s*k with |k| < 2^bits is then exact in float64, so a
    refit over dequantized data reproduces the identical scale and the grid
    is a true fixed point (exact idempotence of fake_quant).
    """
    m, e = np.frexp(scales)
    keep = float(1 << (53 - bits))
    return np.ldexp(np.round(m * keep) / keep, e)


def _snap_down(scales: np.ndarray, bits: int) -> np.ndarray:
    """Previous representable value on the snapped-scale grid."""
    m, e = np.frexp(scales)
    keep = float(1 << (53 - bits))
    return np.ldexp((np.round(m * keep) - 1.0) / keep, e)


def fit_asymmetric(mn: np.ndarray, mx: np.ndarray, spec: QuantSpec):
    """Asymmetric (scales, zero_points) from per-group ranges.

    The range is anchored at zero: keeps z unclamped, makes grid points
    exact fixed points of refit-and-requantize, and puts a constant
    group's value exactly on the grid.
    """
    levels = float(2**spec.bits - 1)
    mn_c = np.minimum(mn * spec.clip_ratio, 0.0)
    mx_c = np.maximum(mx * spec.clip_ratio, 0.0)
    scales = (mx_c - mn_c) / levels
    scales = np.where(scales <= 0, 1.0, scales)  # all-zero group
    scales = snap_scale(scales, spec.bits)
    # rounding guard: when -mn/s sits exactly on a .5 tie, scale rounding can
    # leave the grid one step short of the full code range, so a refit over
    # dequantized data would shrink the scale. Nudge the scale down until the
    # extreme codes span all 2^b - 1 steps; then refit reproduces s exactly.
    for _ in range(64):
        span = _round_half_away(mx_c / scales) - _round_half_away(mn_c / scales)
        short = (span < levels) & (mx_c > mn_c)
        if not np.any(short):
            break
        scales = np.where(short, _snap_down(scales, spec.bits), scales)
    zp = np.clip(_round_half_away(-mn_c / scales), 0, levels)
    return scales, zp.astype(np.int32)


def fit_params(x: np.ndarray, spec: QuantSpec) -> QuantParams:
    """Fit per-group scales (and zero points when asymmetric)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.passthrough:
        return QuantParams(np.ones((1, 1)), None, spec, x.shape)
    mn, mx = _group_minmax(x, spec)
    qmax_sym = float(2 ** (spec.bits - 1) - 1)
    degenerate = mx == mn

    if spec.symmetric:
        amax = np.maximum(np.abs(mn), np.abs(mx)) * spec.clip_ratio
        scales = amax / qmax_sym
        # degenerate groups: constant c != 0 maps to +-qmax exactly; c == 0
        # uses scale 1 so every code decodes to 0
        const = mn
        scales = np.where(degenerate, np.abs(const) / qmax_sym, scales)
        scales = np.where(degenerate & (const == 0), 1.0, scales)
        scales = np.where(scales <= 0, 1.0, scales)
        return QuantParams(snap_scale(scales, spec.bits), None, spec, x.shape)

    scales, zp = fit_asymmetric(mn, mx, spec)
    return QuantParams(scales, zp, spec, x.shape)


def quantize(x: np.ndarray, params: QuantParams) -> QuantizedTensor:
    """Project x onto the fitted grid; codes are kept widened (int32)."""
    x = np.asarray(x, dtype=np.float64)
    spec = params.spec
    if spec.passthrough:
        raise ValueError("cannot quantize with the 16-bit pass-through sentinel")
    if x.shape != tuple(params.shape):
        raise ValueError(f"shape {x.shape} does not match fitted {params.shape}")
    s, z = params.expand()
    if spec.symmetric:
        qmax = 2 ** (spec.bits - 1) - 1
        q = np.clip(_round_half_away(x / s), -qmax, qmax)
    else:
        q = np.clip(_round_half_away(x / s) + z, 0, 2**spec.bits - 1)
    return QuantizedTensor(q.astype(np.int32), params, spec, x.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    s, z = q.params.expand()
    if q.spec.symmetric:
        return s * q.codes
    return s * (q.codes - z)


def fake_quant(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """fit + quantize + dequantize in one call (dynamic quantization)."""
    if spec.passthrough:
        return x
    return dequantize(quantize(x, fit_params(x, spec)))


# --- bit-packed code serialization -------------------------------------------
# Codes are packed little-endian, LSB-first within each byte, groups stored
# contiguously in row-major order. Symmetric codes are biased by
# +(2^(b-1) - 1) before packing so the stored value is non-negative.


def pack_codes(codes: np.ndarray, bits: int, symmetric: bool) -> bytes:
    flat = codes.astype(np.int64).ravel()
    if symmetric:
        flat = flat + (2 ** (bits - 1) - 1)
    if flat.size and (flat.min() < 0 or flat.max() >= 2**bits):
        raise ValueError("codes out of range for bit width")
    bit_cols = (flat[:, None] >> np.arange(bits)) & 1
    return np.packbits(bit_cols.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_codes(raw: bytes, count: int, bits: int, symmetric: bool) -> np.ndarray:
    bits_flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    needed = count * bits
    if bits_flat.size < needed:
        raise ValueError("packed buffer too short")
    vals = bits_flat[:needed].reshape(count, bits) @ (1 << np.arange(bits))
    vals = vals.astype(np.int32)
    if symmetric:
        vals = vals - (2 ** (bits - 1) - 1)
    return vals
