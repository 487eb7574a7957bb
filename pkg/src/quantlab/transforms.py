"""Outlier-smoothing transforms for weight-activation quantization:
SmoothQuant channel migration, Hadamard rotation, and a desk-scale
learned Kronecker transform with learnable clipping.

Conventions: weights ``w`` are (out, in), activations ``x`` are
(tokens, in); the layer computes ``x @ w.T``.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch
from .numerics import HadamardMatrix
from .quantcore import QuantSpec, fake_quant


@dataclass
class SmoothScales:
    alpha: float
    scales: np.ndarray  # per shared-channel positive reals


def smooth_fit(x_calib: np.ndarray, w: np.ndarray, alpha: float = 0.5) -> SmoothScales:
    """s_j = max|X_j|^alpha / max|W_j|^(1-alpha), floored at 1e-8.

    The activation side is divided by s and the weight side multiplied, so
    the product is unchanged while outlier channels migrate into weights.
    """
    x = np.asarray(x_calib, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] != w.shape[1]:
        raise DimensionMismatch(f"channel axes differ: x {x.shape} vs w {w.shape}")
    ax = np.maximum(np.max(np.abs(x), axis=0), 1e-8)
    aw = np.maximum(np.max(np.abs(w), axis=0), 1e-8)
    s = np.maximum(ax**alpha / aw ** (1.0 - alpha), 1e-8)
    return SmoothScales(alpha=alpha, scales=s)


def smooth_apply(x: np.ndarray, w: np.ndarray, s: SmoothScales):
    """Return (x / s, w * s) — exact factorization of x @ w.T."""
    return x / s.scales[np.newaxis, :], w * s.scales[np.newaxis, :]


def rotate_layer(w: np.ndarray, h: HadamardMatrix) -> np.ndarray:
    """Absorb the rotation into the weight offline: returns H.T @ w.T
    (shape (in, out)), to be used as Q(X H) @ Q(H.T W.T)."""
    w = np.asarray(w, dtype=np.float64)
    if h.n != w.shape[1]:
        raise DimensionMismatch(f"Hadamard dim {h.n} != weight input dim {w.shape[1]}")
    return h.matrix.T @ w.T


@dataclass
class FlatTransform:
    """Kronecker-factored invertible transform P1 (x) P2 over the input dim,
    with learnable clip ratios for the activation and weight grids."""

    p1: np.ndarray
    p2: np.ndarray
    act_clip: float = 1.0
    weight_clip: float = 1.0
    per_channel_scale: Optional[np.ndarray] = None
    objective_trace: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.p1.shape[0] * self.p2.shape[0]


def kron_factor(n: int) -> tuple:
    """n1 = largest divisor of n that is <= sqrt(n); n = n1 * n2."""
    n1 = 1
    for d in range(1, int(math.isqrt(n)) + 1):
        if n % d == 0:
            n1 = d
    return n1, n // n1


def kron_apply_right(x: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """x @ (P1 (x) P2) without materializing the Kronecker product.

    Row index (k, l) of the product maps channel k*n2+l; the contraction is
    y[m, i*n2+j] = sum_kl x[m, k*n2+l] P1[k, i] P2[l, j].
    """
    m = x.shape[0]
    n1, n2 = p1.shape[0], p2.shape[0]
    xr = x.reshape(m, n1, n2)
    y = np.einsum("mkl,ki,lj->mij", xr, p1, p2, optimize=True)
    return y.reshape(m, n1 * n2)


def _clipped(spec: QuantSpec, clip: float) -> QuantSpec:
    return spec.with_clip(float(np.clip(clip * spec.clip_ratio, 1e-3, 1.0)))


def flat_objective(w: np.ndarray, x: np.ndarray, t: FlatTransform,
                   spec_w: QuantSpec, spec_a: QuantSpec) -> float:
    """||X W.T - Q(X P) Q(P^-1 W.T)||_F^2 on the calibration batch."""
    y_ref = x @ w.T
    return float(np.sum((y_ref - flat_apply(x, w, t, spec_w, spec_a)) ** 2))


def flat_apply(x: np.ndarray, w: np.ndarray, t: FlatTransform,
               spec_w: QuantSpec, spec_a: QuantSpec) -> np.ndarray:
    """Q(X (P1 (x) P2)) @ Q((P1 (x) P2)^-1 W.T) with learned clip factors."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] != t.n or w.shape[1] != t.n:
        raise DimensionMismatch(f"transform dim {t.n} vs x {x.shape}, w {w.shape}")
    if t.per_channel_scale is not None:
        x = x / t.per_channel_scale[np.newaxis, :]
        w = w * t.per_channel_scale[np.newaxis, :]
    xt = kron_apply_right(x, t.p1, t.p2)
    p1_inv = np.linalg.inv(t.p1)
    p2_inv = np.linalg.inv(t.p2)
    # (P1 (x) P2)^-1 W.T == ((W applied with inverse factors on its input)) .T
    wt = kron_apply_right(w, p1_inv.T, p2_inv.T)  # rows of W transformed
    xq = fake_quant(xt, _clipped(spec_a, t.act_clip)) if not spec_a.passthrough else xt
    wq = fake_quant(wt, _clipped(spec_w, t.weight_clip)) if not spec_w.passthrough else wt
    return xq @ wq.T


def flat_train(w: np.ndarray, x_calib: np.ndarray, spec_w: QuantSpec,
               spec_a: QuantSpec, steps: int = 200, step_size: float = 0.05,
               rng=None, fd_eps: float = 1e-2,
               max_condition: float = 1e6) -> FlatTransform:
    """Train the Kronecker transform by finite-difference descent with a
    reject-and-halve line search; the objective never increases on an
    accepted step and the best-seen transform is returned.

    Rounding is treated as pass-through for gradient purposes: the finite
    difference uses a perturbation large relative to one grid step, which
    smooths over the rounding staircase.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x_calib, dtype=np.float64)
    n = w.shape[1]
    n1, n2 = kron_factor(n)
    t = FlatTransform(p1=np.eye(n1), p2=np.eye(n2))
    obj = flat_objective(w, x, t, spec_w, spec_a)
    t.objective_trace.append(obj)
    best = (obj, t.p1.copy(), t.p2.copy(), t.act_clip, t.weight_clip)

    def pack():
        return np.concatenate([t.p1.ravel(), t.p2.ravel(),
                               [t.act_clip, t.weight_clip]])

    def unpack(v):
        k1 = n1 * n1
        k2 = n2 * n2
        return (v[:k1].reshape(n1, n1), v[k1:k1 + k2].reshape(n2, n2),
                float(np.clip(v[k1 + k2], 0.2, 1.0)),
                float(np.clip(v[k1 + k2 + 1], 0.2, 1.0)))

    def evaluate(v):
        p1, p2, ac, wc = unpack(v)
        if (np.linalg.cond(p1) > max_condition or
                np.linalg.cond(p2) > max_condition):
            return np.inf
        cand = FlatTransform(p1=p1, p2=p2, act_clip=ac, weight_clip=wc,
                             per_channel_scale=t.per_channel_scale)
        return flat_objective(w, x, cand, spec_w, spec_a)

    v = pack()
    for _ in range(steps):
        grad = np.zeros_like(v)
        for i in range(v.size):
            dv = np.zeros_like(v)
            dv[i] = fd_eps
            grad[i] = (evaluate(v + dv) - evaluate(v - dv)) / (2 * fd_eps)
        gnorm = np.linalg.norm(grad)
        if not np.isfinite(gnorm) or gnorm == 0:
            break
        step = step_size / gnorm
        accepted = False
        for _halve in range(8):
            cand = v - step * grad
            cand_obj = evaluate(cand)
            if cand_obj < obj:
                v = cand
                obj = cand_obj
                accepted = True
                break
            step *= 0.5
        if accepted:
            t.p1, t.p2, t.act_clip, t.weight_clip = unpack(v)
            t.objective_trace.append(obj)
            if obj < best[0]:
                best = (obj, t.p1.copy(), t.p2.copy(), t.act_clip, t.weight_clip)

    t.p1, t.p2, t.act_clip, t.weight_clip = best[1], best[2], best[3], best[4]
    if t.objective_trace[-1] != best[0]:
        t.objective_trace.append(best[0])
    return t
