"""Quantized inference: QuantPlan, per-linear quantized wrappers, KV-cache
write hooks, and calibration-driven preparation.

A plan is expressed in W-A-KV bit notation ("4-16-16") plus method names.
Queries are never quantized: activation quantization happens at linear
inputs, and the q vectors produced for attention stay in full precision.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import MissingCalibration
from .kvquant import (
    PRE_BIAS,
    PRE_ROPE,
    KvQuantStarConfig,
    calibrate_k_channels,
    default_kv_k_channel_spec,
    default_kv_v_spec,
    k_stage_tensor,
    params_from_ranges,
    quantize_v_per_token,
    rope_apply,
)
from .mxfp4 import mxfp4_fake_quant
from .numerics import hadamard
from .quantcore import (
    PER_CHANNEL,
    PER_GROUP,
    QuantSpec,
    dequantize,
    fake_quant,
    quantize,
)
from .rng import make_rng
from .toymodel import PlainLinear, Session, ToyModel
from .transforms import (
    FlatTransform,
    flat_train,
    kron_apply_right,
    smooth_fit,
)
from .weightquant import (
    GptqConfig,
    awq_fold,
    awq_search,
    default_weight_spec,
    gptq_quantize,
    rtn_quantize_weights,
)

W_METHODS = ("rtn", "gptq", "awq")
WA_METHODS = ("none", "smoothquant", "rotate", "flatquant", "mxfp4")
KV_METHODS = ("per_token", "kvquant_star", "rotated_per_token")


@dataclass(frozen=True)
class QuantPlan:
    w_bits: int = 16
    a_bits: int = 16
    kv_bits: int = 16
    w_method: str = "rtn"
    wa_method: str = "none"
    kv_method: str = "per_token"
    group_size: int = 128
    k_stage: str = PRE_ROPE
    k_bias_mode: str = PRE_BIAS
    smooth_alpha: float = 0.5
    flat_steps: int = 24
    awq_grid_step: float = 0.05
    rotation_seed: int = 0
    include_lm_head: bool = False

    def __post_init__(self):
        if self.w_method not in W_METHODS:
            raise ValueError(f"w_method must be one of {W_METHODS}")
        if self.wa_method not in WA_METHODS:
            raise ValueError(f"wa_method must be one of {WA_METHODS}")
        if self.kv_method not in KV_METHODS:
            raise ValueError(f"kv_method must be one of {KV_METHODS}")
        if self.a_bits < 16 and self.wa_method == "none":
            raise ValueError("a_bits < 16 requires a weight-activation method")
        if self.wa_method == "mxfp4" and (self.w_bits != 4 or self.a_bits != 4):
            raise ValueError("mxfp4 fixes w_bits = a_bits = 4")

    @property
    def passthrough(self) -> bool:
        return self.w_bits >= 16 and self.a_bits >= 16 and self.kv_bits >= 16

    @property
    def needs_calibration(self) -> bool:
        return (
            (self.w_bits < 16 and self.w_method in ("gptq", "awq"))
            or self.wa_method in ("smoothquant", "flatquant")
            or (self.kv_bits < 16 and self.kv_method == "kvquant_star")
        )

    def bits_string(self) -> str:
        return f"{self.w_bits}-{self.a_bits}-{self.kv_bits}"

    @staticmethod
    def from_bits_string(s: str, **kwargs) -> "QuantPlan":
        try:
            w, a, kv = (int(p) for p in s.split("-"))
        except ValueError:
            raise ValueError(f"plan must look like '4-16-16', got {s!r}")
        return QuantPlan(w_bits=w, a_bits=a, kv_bits=kv, **kwargs)

    def to_dict(self) -> dict:
        return {
            "w_bits": self.w_bits, "a_bits": self.a_bits, "kv_bits": self.kv_bits,
            "w_method": self.w_method, "wa_method": self.wa_method,
            "kv_method": self.kv_method, "group_size": self.group_size,
            "k_stage": self.k_stage, "k_bias_mode": self.k_bias_mode,
            "smooth_alpha": self.smooth_alpha, "flat_steps": self.flat_steps,
            "awq_grid_step": self.awq_grid_step,
            "rotation_seed": self.rotation_seed,
            "include_lm_head": self.include_lm_head,
        }

    @staticmethod
    def from_dict(d: dict) -> "QuantPlan":
        return QuantPlan(**d)


# --- calibration capture ------------------------------------------------------


class ActivationRecorder:
    """Collects rows per capture site during a forward pass."""

    def __init__(self, sites=None):
        self.sites = None if sites is None else set(sites)
        self.rows = {}
        self.positions = {}

    def record(self, site, row, pos):
        if self.sites is not None and site not in self.sites:
            return
        self.rows.setdefault(site, []).append(np.array(row))
        self.positions.setdefault(site, []).append(pos)

    def matrix(self, site) -> np.ndarray:
        if site not in self.rows:
            raise MissingCalibration(f"no activations captured at {site!r}")
        return np.stack(self.rows[site])

    def pos_array(self, site) -> np.ndarray:
        return np.asarray(self.positions[site])


def capture_activations(model: ToyModel, sequences, sites=None) -> ActivationRecorder:
    """Run reference forwards over calibration sequences, recording rows."""
    rec = ActivationRecorder(sites)
    for seq in sequences:
        sess = Session(model, recorder=rec)
        for t in seq:
            sess.step(t)
    return rec


_LINEAR_INPUT_SITE = {
    "wq": "attn_in", "wk": "attn_in", "wv": "attn_in",
    "wo": "attn_out_in", "w_gate": "mlp_in", "w_up": "mlp_in",
    "w_down": "mlp_down_in",
}


def linear_input_site(name: str) -> Optional[str]:
    if name == "lm_head":
        return "lm_head_in"
    prefix, _, short = name.rpartition(".")
    site = _LINEAR_INPUT_SITE.get(short)
    if site is None:
        return None
    layer = prefix.split(".")[1]
    return f"layer{layer}.{site}"


# --- quantized linear wrappers ------------------------------------------------


class FakeQuantLinear(PlainLinear):
    """Dequantized weights plus optional dynamic input fake-quantization
    and an optional fixed input scaling (AWQ/SmoothQuant folding)."""

    def __init__(self, w_hat, b, act_spec: Optional[QuantSpec] = None,
                 inv_input_scale: Optional[np.ndarray] = None):
        super().__init__(w_hat, b)
        self.act_spec = act_spec
        self.inv_input_scale = inv_input_scale

    def pre_bias(self, x):
        if self.inv_input_scale is not None:
            x = x * self.inv_input_scale[np.newaxis, :]
        if self.act_spec is not None and not self.act_spec.passthrough:
            x = fake_quant(x, self.act_spec)
        return x @ self.w.T


class RotatedLinear(PlainLinear):
    """Q(x H) @ Q(H.T W.T): the rotation is absorbed into the stored
    weight offline; the input is rotated then fake-quantized."""

    def __init__(self, wt_hat, b, h, act_spec: QuantSpec):
        self.wt = np.asarray(wt_hat, dtype=np.float64)  # (in, out), pre-quantized
        self.w = self.wt.T
        self.b = None if b is None else np.asarray(b, dtype=np.float64)
        self.h = h
        self.act_spec = act_spec

    def pre_bias(self, x):
        xr = x @ self.h.matrix
        if not self.act_spec.passthrough:
            xr = fake_quant(xr, self.act_spec)
        return xr @ self.wt


class FlatLinear(PlainLinear):
    """Q(x (P1 (x) P2)) @ Q((P1 (x) P2)^-1 W.T) with trained factors."""

    def __init__(self, w, b, t: FlatTransform, spec_w: QuantSpec, spec_a: QuantSpec):
        self.t = t
        self.spec_a = spec_a.with_clip(min(t.act_clip * spec_a.clip_ratio, 1.0))
        p1_inv = np.linalg.inv(t.p1)
        p2_inv = np.linalg.inv(t.p2)
        wt = kron_apply_right(np.asarray(w, dtype=np.float64), p1_inv.T, p2_inv.T)
        spec_wc = spec_w.with_clip(min(t.weight_clip * spec_w.clip_ratio, 1.0))
        self.w = fake_quant(wt, spec_wc) if not spec_w.passthrough else wt
        self.b = None if b is None else np.asarray(b, dtype=np.float64)

    def pre_bias(self, x):
        xt = kron_apply_right(x, self.t.p1, self.t.p2)
        if not self.spec_a.passthrough:
            xt = fake_quant(xt, self.spec_a)
        return xt @ self.w.T


class Mxfp4Linear(PlainLinear):
    """Weights and inputs round-tripped through MXFP4 blocks."""

    def __init__(self, w, b):
        super().__init__(mxfp4_fake_quant(np.asarray(w, dtype=np.float64)), b)

    def pre_bias(self, x):
        return mxfp4_fake_quant(x) @ self.w.T


# --- runtime ------------------------------------------------------------------


@dataclass
class Runtime:
    """Prepared quantization state for one model + plan."""

    model: ToyModel
    plan: QuantPlan
    linears: dict = field(default_factory=dict)   # name -> PlainLinear subclass
    kv_cfgs: dict = field(default_factory=dict)   # layer -> KvQuantStarConfig
    kv_hadamard: Optional[object] = None
    v_spec: Optional[QuantSpec] = None
    kv_token_spec: Optional[QuantSpec] = None
    proxy_losses: dict = field(default_factory=dict)

    def make_linear(self, name, w, b):
        return self.linears.get(name) or PlainLinear(w, b)

    def kv_write(self, layer, k_pre, k_rope, v, bias, rope_cfg, pos):
        """Return the (reconstructed) K/V rows to store in the cache."""
        plan = self.plan
        if plan.kv_bits >= 16:
            return k_rope, v
        if plan.kv_method == "per_token":
            k_store = fake_quant(k_rope[np.newaxis, :], self.kv_token_spec)[0]
            v_store = fake_quant(v[np.newaxis, :], self.kv_token_spec)[0]
            return k_store, v_store
        if plan.kv_method == "rotated_per_token":
            h = self.kv_hadamard
            nh = self.model.config.n_heads
            hd = self.model.config.head_dim
            k_rot = (k_rope.reshape(nh, hd) @ h.matrix).reshape(-1)
            v_rot = (v.reshape(nh, hd) @ h.matrix).reshape(-1)
            k_q = fake_quant(k_rot[np.newaxis, :], self.kv_token_spec)[0]
            v_q = fake_quant(v_rot[np.newaxis, :], self.kv_token_spec)[0]
            k_store = (k_q.reshape(nh, hd) @ h.matrix.T).reshape(-1)
            v_store = (v_q.reshape(nh, hd) @ h.matrix.T).reshape(-1)
            return k_store, v_store
        # kvquant_star: static per-channel K (pre/post rope, pre/post bias),
        # dynamic per-token V; K staging/reconstruction runs per head so
        # RoPE sees head_dim-wide slices
        cfg = self.kv_cfgs[layer]
        nh = self.model.config.n_heads
        hd = self.model.config.head_dim
        staged = np.empty_like(k_pre)
        for hh in range(nh):
            sl = slice(hh * hd, (hh + 1) * hd)
            staged[sl] = k_stage_tensor(k_pre[sl][np.newaxis, :], bias[sl],
                                        cfg, rope_cfg, pos)[0]
        mn, mx = cfg.k_channel_ranges
        params = params_from_ranges(mn, mx, cfg.k_spec, (1, staged.size))
        k_hat = dequantize(quantize(staged[np.newaxis, :], params))[0]
        if cfg.k_bias_mode == PRE_BIAS:
            k_hat = k_hat + bias
        if cfg.k_stage == PRE_ROPE:
            out = np.empty_like(k_hat)
            for hh in range(nh):
                sl = slice(hh * hd, (hh + 1) * hd)
                out[sl] = rope_apply(k_hat[sl][np.newaxis, :], rope_cfg,
                                     start_pos=pos)[0]
            k_hat = out
        v_store = dequantize(quantize_v_per_token(v[np.newaxis, :], cfg.v_spec))[0]
        return k_hat, v_store


def _weight_linear_names(model: ToyModel, include_lm_head: bool):
    names = []
    for i in range(model.config.n_layers):
        p = f"layers.{i}."
        names += [p + n for n in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")]
    if include_lm_head:
        names.append("lm_head")
    return names


def _bias_for(model: ToyModel, name: str):
    prefix, _, short = name.rpartition(".")
    if short in ("wq", "wk", "wv"):
        return model.tensors.get(f"{prefix}.b{short[-1]}")
    return None


def prepare_runtime(model: ToyModel, plan: QuantPlan,
                    calib_sequences=None) -> Runtime:
    """Quantize weights, fit/train transforms, and calibrate KV ranges.

    ``calib_sequences`` (token-id sequences) must be given whenever the
    plan uses a data-dependent method (GPTQ, AWQ, SmoothQuant, FlatQuant,
    KVQuant-style static K ranges).
    """
    rt = Runtime(model=model, plan=plan)
    if plan.passthrough:
        return rt
    if plan.needs_calibration and not calib_sequences:
        raise MissingCalibration(f"plan {plan.bits_string()} needs calibration data")

    rec = None
    if plan.needs_calibration:
        rec = capture_activations(model, calib_sequences)

    names = _weight_linear_names(model, plan.include_lm_head)
    rng = make_rng(plan.rotation_seed)

    if plan.wa_method != "none":
        _prepare_wa(rt, names, rec, rng)
    elif plan.w_bits < 16:
        _prepare_weight_only(rt, names, rec)

    if plan.kv_bits < 16:
        _prepare_kv(rt, rec, rng)
    return rt


def _prepare_weight_only(rt: Runtime, names, rec):
    plan = rt.plan
    model = rt.model
    spec = default_weight_spec(plan.w_bits, plan.group_size)
    for name in names:
        w = model.tensors[name].astype(np.float64)
        b = _bias_for(model, name)
        if plan.w_method == "rtn":
            w_hat = dequantize(rtn_quantize_weights(w, spec))
            rt.linears[name] = FakeQuantLinear(w_hat, b)
        elif plan.w_method == "gptq":
            x = rec.matrix(linear_input_site(name)).T  # (in, tokens)
            qt = gptq_quantize(w, x, GptqConfig(spec=spec))
            w_hat = dequantize(qt)
            rt.linears[name] = FakeQuantLinear(w_hat, b)
            rt.proxy_losses[name] = float(np.sum(((w_hat - w) @ x) ** 2))
        else:  # awq
            x = rec.matrix(linear_input_site(name)).T
            res = awq_search(w, x, spec, grid_step=plan.awq_grid_step)
            w_scaled, inv_s = awq_fold(w, res.scales)
            w_hat = dequantize(rtn_quantize_weights(w_scaled, spec))
            rt.linears[name] = FakeQuantLinear(w_hat, b, inv_input_scale=inv_s)
            rt.proxy_losses[name] = res.proxy_loss
            model.aux[f"{name}.awq_inv_scales"] = inv_s.astype(np.float32)


def _wa_specs(plan: QuantPlan):
    # per-channel symmetric weights (one scale per output row), per-token
    # asymmetric activations with 128-channel groups
    spec_w = QuantSpec(bits=plan.w_bits, symmetric=True, granularity=PER_CHANNEL,
                       axis=0)
    spec_a = QuantSpec(bits=plan.a_bits, symmetric=False, granularity=PER_GROUP,
                       axis=1, group_size=plan.group_size)
    return spec_w, spec_a


def _prepare_wa(rt: Runtime, names, rec, rng):
    plan = rt.plan
    model = rt.model
    spec_w, spec_a = _wa_specs(plan)
    for name in names:
        w = model.tensors[name].astype(np.float64)
        b = _bias_for(model, name)
        if plan.wa_method == "mxfp4":
            rt.linears[name] = Mxfp4Linear(w, b)
        elif plan.wa_method == "rotate":
            h = hadamard(w.shape[1], randomize=True, rng=rng)
            wt = h.matrix.T @ w.T  # (in, out); output channels are columns
            spec_wt = QuantSpec(bits=plan.w_bits, symmetric=True,
                                granularity=PER_CHANNEL, axis=1)
            wt_hat = fake_quant(wt, spec_wt) if plan.w_bits < 16 else wt
            rt.linears[name] = RotatedLinear(wt_hat, b, h, spec_a)
        elif plan.wa_method == "smoothquant":
            x = rec.matrix(linear_input_site(name))
            ss = smooth_fit(x, w, alpha=plan.smooth_alpha)
            w_hat = fake_quant(w * ss.scales[np.newaxis, :], spec_w) \
                if plan.w_bits < 16 else w * ss.scales[np.newaxis, :]
            rt.linears[name] = FakeQuantLinear(
                w_hat, b, act_spec=spec_a, inv_input_scale=1.0 / ss.scales)
            model.aux[f"{name}.smooth_scales"] = ss.scales.astype(np.float32)
        else:  # flatquant
            x = rec.matrix(linear_input_site(name))
            t = flat_train(w, x, spec_w, spec_a, steps=plan.flat_steps)
            rt.linears[name] = FlatLinear(w, b, t, spec_w, spec_a)


def _prepare_kv(rt: Runtime, rec, rng):
    plan = rt.plan
    model = rt.model
    rt.kv_token_spec = default_kv_v_spec(plan.kv_bits, plan.group_size)
    if plan.kv_method == "rotated_per_token":
        rt.kv_hadamard = hadamard(model.config.head_dim, randomize=True, rng=rng)
    if plan.kv_method != "kvquant_star":
        return
    if rec is None:
        raise MissingCalibration("kvquant_star needs calibration sequences")
    from .kvquant import RopeConfig

    rope_cfg = RopeConfig(head_dim=model.config.head_dim,
                          base=model.config.rope_base)
    for i in range(model.config.n_layers):
        cfg = KvQuantStarConfig(
            k_spec=default_kv_k_channel_spec(plan.kv_bits),
            v_spec=default_kv_v_spec(plan.kv_bits, plan.group_size),
            k_stage=plan.k_stage,
            k_bias_mode=plan.k_bias_mode,
        )
        k_rows = rec.matrix(f"layer{i}.k_pre_bias")
        positions = rec.pos_array(f"layer{i}.k_pre_bias")
        bias = model.tensors.get(f"layers.{i}.bk")
        bias = np.zeros(model.config.d_model) if bias is None \
            else bias.astype(np.float64)
        nh, hd = model.config.n_heads, model.config.head_dim
        staged = np.empty_like(k_rows)
        for r in range(k_rows.shape[0]):
            row = k_rows[r].reshape(nh, hd)
            srow = np.empty_like(row)
            for hh in range(nh):
                srow[hh] = k_stage_tensor(row[hh][np.newaxis, :],
                                          bias.reshape(nh, hd)[hh], cfg,
                                          rope_cfg, int(positions[r]))[0]
            staged[r] = srow.reshape(-1)
        rt.kv_cfgs[i] = calibrate_k_channels(staged, cfg)


def forward_quantized(model: ToyModel, tokens, plan: QuantPlan,
                      calib_sequences=None, runtime: Optional[Runtime] = None
                      ) -> np.ndarray:
    """Logits for every position under a quantization plan. A prepared
    runtime may be passed to amortize calibration across probes."""
    if runtime is None:
        runtime = prepare_runtime(model, plan, calib_sequences)
    sess = Session(model, runtime=None if plan.passthrough else runtime)
    return np.stack([sess.step(t) for t in tokens])
