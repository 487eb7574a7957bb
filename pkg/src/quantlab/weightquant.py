"""Weight-only quantization: RTN baseline, GPTQ error compensation, AWQ
scale search with exact folding, and a brute-force oracle for tiny layers.

Weight convention throughout: ``w`` is (out_features, in_features) and the
layer computes ``x @ w.T``; calibration activations ``calib_x`` are
(in_features, n_tokens), one column per token.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveScale, NotPositiveDefinite, TooLargeToEnumerate
from .numerics import cholesky, invert_spd
from .quantcore import (
    PER_GROUP,
    QuantParams,
    QuantSpec,
    QuantizedTensor,
    _grouping,
    dequantize,
    fake_quant,
    fit_params,
    quantize,
)

NATURAL = "natural"
ACTIVATION_ORDER = "activation_order"


def default_weight_spec(bits: int, group_size: int = 128) -> QuantSpec:
    """Asymmetric per-group quantization along the input-channel axis."""
    return QuantSpec(bits=bits, symmetric=False, granularity=PER_GROUP, axis=1,
                     group_size=group_size)


@dataclass
class GptqConfig:
    spec: QuantSpec = field(default_factory=lambda: default_weight_spec(4))
    damping_fraction: float = 0.01
    column_order: str = NATURAL
    max_damping_retries: int = 8

    def __post_init__(self):
        if self.damping_fraction <= 0:
            raise ValueError("damping_fraction must be > 0")


@dataclass
class AwqSearchResult:
    alpha: float
    beta: float
    scales: np.ndarray
    proxy_loss: float


def proxy_loss(w: np.ndarray, w_hat: np.ndarray, calib_x: np.ndarray) -> float:
    """||(w_hat - w) X||_F^2, the calibration-output squared error."""
    return float(np.sum(((w_hat - w) @ calib_x) ** 2))


def rtn_quantize_weights(w: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float64)
    return quantize(w, fit_params(w, spec))


def _fit_group_params(w: np.ndarray, spec: QuantSpec) -> QuantParams:
    return fit_params(w, spec)


def gptq_quantize(w: np.ndarray, calib_x: np.ndarray, cfg: GptqConfig) -> QuantizedTensor:
    """GPTQ: quantize columns one at a time, folding each column's rounding
    error into the not-yet-quantized columns via the inverse Hessian.

    Group scale/zero-point are fitted from the weights as they stand when
    the group's first column is processed (after earlier compensation).
    """
    w = np.asarray(w, dtype=np.float64)
    spec = cfg.spec
    n_out, n_in = w.shape
    if calib_x.shape[0] != n_in:
        raise ValueError(f"calib_x rows {calib_x.shape[0]} != weight input dim {n_in}")

    H = calib_x @ calib_x.T
    lam = cfg.damping_fraction * float(np.mean(np.diag(H)))
    if lam <= 0:
        lam = cfg.damping_fraction
    C = None
    for _ in range(cfg.max_damping_retries + 1):
        try:
            Hinv = invert_spd(H + lam * np.eye(n_in))
            C = cholesky(Hinv).T  # upper triangular, Hinv = C.T @ C
            break
        except NotPositiveDefinite:
            lam *= 2.0
    if C is None:
        raise NotPositiveDefinite(-1, "Hessian not PD after damping escalation")

    if cfg.column_order == ACTIVATION_ORDER:
        order = np.argsort(-np.diag(H), kind="stable")
    else:
        order = np.arange(n_in)

    g_axis, starts = _grouping(w.shape, spec)
    if spec.granularity == PER_GROUP and g_axis == 1:
        group_of = np.searchsorted(starts, np.arange(n_in), side="right") - 1
        n_groups = len(starts)
    else:
        # coarser granularities behave as a single lazily-fitted param set
        group_of = np.zeros(n_in, dtype=np.int64)
        n_groups = 1

    work = w.copy()
    codes = np.zeros((n_out, n_in), dtype=np.int32)
    scales = np.zeros((n_out, n_groups))
    zps = np.zeros((n_out, n_groups), dtype=np.int32) if not spec.symmetric else None
    fitted = np.zeros(n_groups, dtype=bool)
    full_params = None

    qmax_sym = 2 ** (spec.bits - 1) - 1
    levels = 2**spec.bits - 1

    for step, j in enumerate(order):
        g = group_of[j]
        if not fitted[g]:
            params = _fit_group_params(work, spec)
            if spec.granularity == PER_GROUP and g_axis == 1:
                scales[:, g] = params.scales[:, g]
                if zps is not None:
                    zps[:, g] = params.zero_points[:, g]
            else:
                full_params = params
            fitted[g] = True
        if spec.granularity == PER_GROUP and g_axis == 1:
            s_col = scales[:, g]
            z_col = zps[:, g] if zps is not None else None
        else:
            s_full, z_full = full_params.expand()
            s_col = s_full[:, j]
            z_col = z_full[:, j] if z_full is not None else None

        col = work[:, j].copy()
        t = col / s_col
        r = np.where(t >= 0, np.floor(t + 0.5), np.ceil(t - 0.5))
        if spec.symmetric:
            q = np.clip(r, -qmax_sym, qmax_sym)
            col_hat = s_col * q
        else:
            q = np.clip(r + z_col, 0, levels)
            col_hat = s_col * (q - z_col)
        codes[:, j] = q.astype(np.int32)
        work[:, j] = col_hat

        err = (col - col_hat) / C[j, j]
        remaining = order[step + 1 :]
        if remaining.size:
            work[:, remaining] -= np.outer(err, C[j, remaining])

    if spec.granularity == PER_GROUP and g_axis == 1:
        params = QuantParams(scales, zps, spec, w.shape)
    else:
        params = full_params
    return QuantizedTensor(codes, params, spec, w.shape)


def awq_search(w: np.ndarray, calib_x: np.ndarray, spec: QuantSpec,
               grid_step: float = 0.05) -> AwqSearchResult:
    """Grid search over (alpha, beta) for per-input-channel scales
    s = c_X^alpha * c_W^(-beta), minimizing calibration-output error.

    The (0, 0) grid point gives s = 1, so the result never loses to RTN.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(calib_x, dtype=np.float64)
    c_x = np.maximum(np.mean(np.abs(x), axis=1), 1e-8)
    c_w = np.maximum(np.mean(np.abs(w), axis=0), 1e-8)
    ref = x.T @ w.T

    grid = np.arange(0.0, 1.0 + 1e-12, grid_step)
    best = None
    for alpha in grid:
        for beta in grid:
            s = c_x**alpha * c_w ** (-beta)
            w_s = fake_quant(w * s[np.newaxis, :], spec) / s[np.newaxis, :]
            loss = float(np.sum((ref - x.T @ w_s.T) ** 2))
            if best is None or loss < best.proxy_loss:
                best = AwqSearchResult(float(alpha), float(beta), s, loss)
    return best


def awq_fold(w: np.ndarray, scales: np.ndarray):
    """Scale the weight's input channels; return the activation-side
    inverse scales so (x / s) @ (w * s).T == x @ w.T exactly."""
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
        raise NonPositiveScale("AWQ scales must be positive and finite")
    w_scaled = np.asarray(w, dtype=np.float64) * scales[np.newaxis, :]
    return w_scaled, 1.0 / scales


def brute_force_optimal(w: np.ndarray, calib_x: np.ndarray, spec: QuantSpec,
                        max_assignments: int = 1 << 20):
    """Exhaustive proxy-loss minimization over floor/ceil code choices.

    The candidate set per element is restricted to the two grid points
    bracketing the value; the true optimum of ||(w_hat - w) X||_F^2 lies on
    these neighbors in practice, and the full grid is infeasible.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    if 2**n > max_assignments:
        raise TooLargeToEnumerate(f"2^{n} assignments exceed the enumeration guard")

    params = fit_params(w, spec)
    s, z = params.expand()
    if spec.symmetric:
        lo_code = -(2 ** (spec.bits - 1) - 1)
        hi_code = 2 ** (spec.bits - 1) - 1
        t = w / s
    else:
        lo_code = 0
        hi_code = 2**spec.bits - 1
        t = w / s + z
    floor_c = np.clip(np.floor(t), lo_code, hi_code)
    ceil_c = np.clip(np.ceil(t), lo_code, hi_code)

    best_loss = np.inf
    best_codes = None
    for mask in itertools.product((0, 1), repeat=n):
        pick = np.array(mask).reshape(w.shape)
        codes = np.where(pick == 0, floor_c, ceil_c)
        w_hat = s * (codes - z) if not spec.symmetric else s * codes
        loss = proxy_loss(w, w_hat, calib_x)
        if loss < best_loss:
            best_loss = loss
            best_codes = codes
    qt = QuantizedTensor(best_codes.astype(np.int32), params, spec, w.shape)
    return qt, float(best_loss)


def dequant_loss(qt: QuantizedTensor, w: np.ndarray, calib_x: np.ndarray) -> float:
    return proxy_loss(np.asarray(w, dtype=np.float64), dequantize(qt), calib_x)
