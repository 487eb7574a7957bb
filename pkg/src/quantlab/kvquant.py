"""KV-cache quantization: RoPE, per-token dynamic quantization with
optional head-dim rotation, and static per-channel K quantization with
pre-RoPE / pre-bias options.

K/V matrices are (positions, head_dim) per head. Quantize-at-write
semantics: entries are quantized when appended and dequantized on read;
past entries are never requantized.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    ChannelCountMismatch,
    EmptyCalibration,
    NotCalibrated,
    OddHeadDim,
)
from .numerics import HadamardMatrix
from .quantcore import (
    PER_GROUP,
    QuantParams,
    QuantSpec,
    QuantizedTensor,
    dequantize,
    fake_quant,
    fit_asymmetric,
    fit_params,
    quantize,
)

PRE_ROPE = "pre_rope"
POST_ROPE = "post_rope"
PRE_BIAS = "pre_bias"
POST_BIAS = "post_bias"


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise OddHeadDim(f"head_dim must be even, got {self.head_dim}")

    def angles(self, positions: np.ndarray) -> np.ndarray:
        """theta[p, i] = pos_p * base^(-2i/head_dim) for pair index i."""
        i = np.arange(self.head_dim // 2)
        freqs = self.base ** (-2.0 * i / self.head_dim)
        return np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]


def rope_apply(x: np.ndarray, cfg: RopeConfig, start_pos: int = 0) -> np.ndarray:
    """Rotary embedding on interleaved pairs (x_{2i}, x_{2i+1}); row r is
    position start_pos + r. Pairwise 2-norms are preserved."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != cfg.head_dim:
        raise OddHeadDim(f"expected {cfg.head_dim} columns, got {x.shape[1]}")
    pos = np.arange(start_pos, start_pos + x.shape[0])
    th = cfg.angles(pos)
    c, s = np.cos(th), np.sin(th)
    even = x[:, 0::2]
    odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * c - odd * s
    out[:, 1::2] = even * s + odd * c
    return out


def default_kv_v_spec(bits: int, group_size: int = 128) -> QuantSpec:
    """Per-token asymmetric quantization, groups of 128 channels per row."""
    return QuantSpec(bits=bits, symmetric=False, granularity=PER_GROUP, axis=1,
                     group_size=group_size)


def default_kv_k_channel_spec(bits: int) -> QuantSpec:
    """Static per-channel asymmetric quantization (channels = columns)."""
    return QuantSpec(bits=bits, symmetric=False, granularity="per_channel", axis=1)


@dataclass
class KvQuantStarConfig:
    k_spec: QuantSpec
    v_spec: QuantSpec
    k_stage: str = PRE_ROPE
    k_bias_mode: str = PRE_BIAS
    k_channel_ranges: Optional[tuple] = None  # (min, max) arrays per channel

    def __post_init__(self):
        if self.k_stage not in (PRE_ROPE, POST_ROPE):
            raise ValueError(f"bad k_stage {self.k_stage!r}")
        if self.k_bias_mode not in (PRE_BIAS, POST_BIAS):
            raise ValueError(f"bad k_bias_mode {self.k_bias_mode!r}")

    @property
    def calibrated(self) -> bool:
        return self.k_channel_ranges is not None


def k_stage_tensor(k_raw: np.ndarray, bias: np.ndarray, cfg: KvQuantStarConfig,
                   cfg_rope: RopeConfig, pos: int) -> np.ndarray:
    """The K tensor at the configured quantization stage. k_raw is the
    pre-bias projection output (positions, head_dim)."""
    k = np.asarray(k_raw, dtype=np.float64)
    if cfg.k_bias_mode == POST_BIAS:
        k = k + bias[np.newaxis, :]
    if cfg.k_stage == POST_ROPE:
        k = rope_apply(k, cfg_rope, start_pos=pos)
    return k


def calibrate_k_channels(k_samples: np.ndarray, cfg: KvQuantStarConfig) -> KvQuantStarConfig:
    """Record static per-channel (min, max) over calibration samples taken
    at the configured stage."""
    k = np.asarray(k_samples, dtype=np.float64)
    if k.size == 0:
        raise EmptyCalibration("no K samples to calibrate from")
    return replace(cfg, k_channel_ranges=(k.min(axis=0), k.max(axis=0)))


def params_from_ranges(mn: np.ndarray, mx: np.ndarray, spec: QuantSpec,
                       shape: tuple) -> QuantParams:
    """Per-channel params from calibrated ranges instead of live data.

    Mirrors fit_params' formulas, including the degenerate-channel rule.
    """
    mn = np.asarray(mn, dtype=np.float64)
    mx = np.asarray(mx, dtype=np.float64)
    scales, zp = fit_asymmetric(mn, mx, spec)
    # one group per channel, grouped along axis 0 (rows)
    return QuantParams(scales[np.newaxis, :], zp[np.newaxis, :], spec, shape)


@dataclass
class StoredK:
    """Quantized K rows plus everything needed to reconstruct on read."""

    qt: Optional[QuantizedTensor]
    bias: np.ndarray
    cfg: KvQuantStarConfig
    cfg_rope: RopeConfig
    pos: int
    raw: Optional[np.ndarray] = None  # sentinel (16-bit) path stores losslessly

    def reconstruct(self) -> np.ndarray:
        k = self.raw if self.qt is None else dequantize(self.qt)
        if self.cfg.k_bias_mode == PRE_BIAS:
            k = k + self.bias[np.newaxis, :]
        if self.cfg.k_stage == PRE_ROPE:
            k = rope_apply(k, self.cfg_rope, start_pos=self.pos)
        return k


def quantize_k(k_raw: np.ndarray, bias: np.ndarray, cfg: KvQuantStarConfig,
               cfg_rope: RopeConfig, pos: int = 0) -> StoredK:
    """Quantize K rows at the configured stage with static per-channel
    params; reconstruction adds the full-precision bias (pre_bias mode)
    and applies RoPE (pre_rope mode) deterministically."""
    k_raw = np.asarray(k_raw, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if not cfg.calibrated:
        raise NotCalibrated("calibrate_k_channels must run before quantize_k")
    mn, mx = cfg.k_channel_ranges
    if mn.shape[0] != k_raw.shape[1] or bias.shape[0] != k_raw.shape[1]:
        raise ChannelCountMismatch(
            f"channels: k {k_raw.shape[1]}, ranges {mn.shape[0]}, bias {bias.shape[0]}")
    staged = k_stage_tensor(k_raw, bias, cfg, cfg_rope, pos)
    if cfg.k_spec.passthrough:
        return StoredK(None, bias, cfg, cfg_rope, pos, raw=staged.copy())
    params = params_from_ranges(mn, mx, cfg.k_spec, staged.shape)
    return StoredK(quantize(staged, params), bias, cfg, cfg_rope, pos)


def quantize_v_per_token(v: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Dynamic per-token-row quantization, 128-channel groups."""
    v = np.asarray(v, dtype=np.float64)
    if spec.granularity not in (PER_GROUP, "per_token"):
        raise ValueError("V quantization expects per-token/group granularity")
    return quantize(v, fit_params(v, spec))


def rotate_kv_heads(kv: np.ndarray, h: HadamardMatrix) -> np.ndarray:
    """Head-dim Hadamard rotation applied before per-token quantization;
    the inverse (H.T on the right) is applied on read."""
    kv = np.asarray(kv, dtype=np.float64)
    if h.n != kv.shape[1]:
        raise ChannelCountMismatch(f"Hadamard dim {h.n} != head dim {kv.shape[1]}")
    return kv @ h.matrix


def unrotate_kv_heads(kv: np.ndarray, h: HadamardMatrix) -> np.ndarray:
    return kv @ h.matrix.T
