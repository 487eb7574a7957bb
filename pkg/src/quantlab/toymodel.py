"""Tiny Qwen-like decoder-only transformer: RMSNorm, QKV projections with
biases, RoPE, SwiGLU MLP. Deterministic init, binary serialization, and a
step-wise forward session that both the reference and quantized paths use,
so incremental generation and full-context recomputation are identical by
construction.

Reserved token ids: 0 = BOS, 1 = EOS, 2 = THINK_END, 3 = WAIT.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BadMagic,
    ContextOverflow,
    ShapeMismatch,
    TokenOutOfRange,
    TruncatedFile,
)
from .kvquant import RopeConfig, rope_apply
from .numerics import is_power_of_two

BOS_ID = 0
EOS_ID = 1
THINK_END_ID = 2
WAIT_ID = 3
N_RESERVED = 4

MAGIC = b"TQM1"
FORMAT_VERSION = 1
_ALIGN = 64


@dataclass(frozen=True)
class ToyConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    head_dim: int = 32
    ffn_mult: int = 2
    vocab_size: int = 64
    max_seq_len: int = 1024
    rope_base: float = 10000.0
    qkv_bias: bool = True

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError("d_model must equal n_heads * head_dim")
        if not is_power_of_two(self.head_dim):
            raise ValueError("head_dim must be a power of two")
        if self.vocab_size < N_RESERVED:
            raise ValueError("vocab must include the reserved control tokens")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "ffn_mult": self.ffn_mult,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rope_base": self.rope_base,
            "qkv_bias": self.qkv_bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "ToyConfig":
        return ToyConfig(**d)


@dataclass
class ToyModel:
    config: ToyConfig
    tensors: dict  # name -> float32 ndarray
    aux: dict = field(default_factory=dict)  # quantization artifacts, by name

    def tensor(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _layer_tensor_specs(cfg: ToyConfig):
    d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    specs = [("embed", (v, d))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        specs += [
            (p + "norm1", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "norm2", (d,)),
            (p + "w_gate", (f, d)),
            (p + "w_up", (f, d)),
            (p + "w_down", (d, f)),
        ]
        if cfg.qkv_bias:
            specs += [(p + "bq", (d,)), (p + "bk", (d,)), (p + "bv", (d,))]
    specs += [("norm_f", (d,)), ("lm_head", (v, d))]
    return specs


def init_model(cfg: ToyConfig, rng, k_bias_outlier: Optional[tuple] = None) -> ToyModel:
    """Deterministic init: embeddings N(0, 1), linear weights
    N(0, fan_in^-1/2), norms 1, biases 0.

    ``k_bias_outlier`` = (layer, channel, magnitude) sets one K-projection
    bias channel to the given magnitude, recreating the huge key-bias
    outlier seen in small Qwen-family checkpoints. Magnitude 0 leaves the
    model identical to the uninjected one (biases init to zero).
    """
    tensors = {}
    for name, shape in _layer_tensor_specs(cfg):
        short = name.split(".")[-1]
        if short.startswith("norm"):
            t = np.ones(shape)
        elif short.startswith("b"):
            t = np.zeros(shape)
        elif name == "embed":
            t = rng.standard_normal(shape)
        else:
            t = rng.standard_normal(shape) / np.sqrt(shape[-1])
        tensors[name] = t.astype(np.float32)
    if k_bias_outlier is not None:
        layer, channel, magnitude = k_bias_outlier
        if not cfg.qkv_bias:
            raise ValueError("bias injection requires qkv_bias=True")
        tensors[f"layers.{layer}.bk"][channel] = np.float32(magnitude)
    return ToyModel(config=cfg, tensors=tensors)


# --- binary model format ("TQM1") --------------------------------------------
# magic, version byte, u32 little-endian header length, UTF-8 JSON header
# (config + tensor manifest name/shape/dtype/offset + aux manifest), zero
# padding to a 64-byte boundary, then raw little-endian float32 tensor data,
# each tensor 64-byte aligned. Offsets are absolute file offsets.


def _pad_to(n: int, align: int = _ALIGN) -> int:
    return (n + align - 1) // align * align


def save_model(m: ToyModel, path) -> None:
    names = sorted(m.tensors)
    aux_names = sorted(m.aux)
    # two-pass: compute offsets with a fixed-size header estimate loop
    manifest = [{"name": n, "shape": list(m.tensors[n].shape), "dtype": "f32",
                 "offset": 0} for n in names]
    aux_manifest = [{"name": n, "shape": list(np.asarray(m.aux[n]).shape),
                     "dtype": "f32", "offset": 0} for n in aux_names]

    def render(mani, aux_mani):
        header = {
            "config": m.config.to_dict(),
            "tensors": mani,
            "aux": aux_mani,
        }
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    hdr = render(manifest, aux_manifest)
    while True:
        data_start = _pad_to(len(MAGIC) + 1 + 4 + len(hdr))
        off = data_start
        for entry, n in zip(manifest, names):
            entry["offset"] = off
            off = _pad_to(off + m.tensors[n].size * 4)
        for entry, n in zip(aux_manifest, aux_names):
            entry["offset"] = off
            off = _pad_to(off + np.asarray(m.aux[n]).size * 4)
        new_hdr = render(manifest, aux_manifest)
        if len(new_hdr) == len(hdr):
            hdr = new_hdr
            break
        hdr = new_hdr

    total = off
    buf = bytearray(total)
    buf[:4] = MAGIC
    buf[4] = FORMAT_VERSION
    struct.pack_into("<I", buf, 5, len(hdr))
    buf[9 : 9 + len(hdr)] = hdr
    for entry, n in zip(manifest, names):
        raw = np.ascontiguousarray(m.tensors[n], dtype="<f4").tobytes()
        buf[entry["offset"] : entry["offset"] + len(raw)] = raw
    for entry, n in zip(aux_manifest, aux_names):
        raw = np.ascontiguousarray(np.asarray(m.aux[n]), dtype="<f4").tobytes()
        buf[entry["offset"] : entry["offset"] + len(raw)] = raw
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_model(path) -> ToyModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9:
        raise TruncatedFile(len(raw), "file shorter than fixed header")
    if raw[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {raw[:4]!r}")
    hdr_len = struct.unpack_from("<I", raw, 5)[0]
    if 9 + hdr_len > len(raw):
        raise TruncatedFile(len(raw), "header extends past end of file")
    try:
        header = json.loads(raw[9 : 9 + hdr_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadMagic(f"unparseable header: {e}")
    cfg = ToyConfig.from_dict(header["config"])

    def read_entries(entries):
        out = {}
        for entry in entries:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start, end = entry["offset"], entry["offset"] + count * 4
            if end > len(raw):
                raise TruncatedFile(start, f"tensor {entry['name']!r} truncated")
            arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape)
            out[entry["name"]] = arr.copy()
        return out

    tensors = read_entries(header["tensors"])
    aux = read_entries(header.get("aux", []))
    for name, shape in _layer_tensor_specs(cfg):
        if name not in tensors:
            raise ShapeMismatch(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ShapeMismatch(
                f"tensor {name!r}: expected {shape}, got {tensors[name].shape}")
    return ToyModel(config=cfg, tensors=tensors, aux=aux)


# --- forward pass -------------------------------------------------------------


def rmsnorm(x: np.ndarray, g: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * g


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def rope_heads(rows: np.ndarray, cfg: RopeConfig, pos: int) -> np.ndarray:
    """Apply RoPE at one position to (n_heads, head_dim) rows."""
    out = np.empty_like(rows)
    for h in range(rows.shape[0]):
        out[h] = rope_apply(rows[h][np.newaxis, :], cfg, start_pos=pos)[0]
    return out


class PlainLinear:
    """Full-precision linear, y = x @ w.T (+ b). Quantized variants in
    quantrun.py satisfy the same interface."""

    def __init__(self, w: np.ndarray, b: Optional[np.ndarray] = None):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = None if b is None else np.asarray(b, dtype=np.float64)

    def pre_bias(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.T

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = self.pre_bias(x)
        return y if self.b is None else y + self.b


class LayerState:
    """Per-layer KV cache: preallocated reconstructed K/V rows."""

    def __init__(self, max_len: int, d_model: int):
        self.k = np.zeros((max_len, d_model))
        self.v = np.zeros((max_len, d_model))
        self.n = 0

    def append(self, k_row: np.ndarray, v_row: np.ndarray):
        self.k[self.n] = k_row
        self.v[self.n] = v_row
        self.n += 1


class Session:
    """Step-wise forward pass with a private KV cache.

    ``runtime`` is None for the full-precision reference; otherwise it is a
    quantrun.Runtime supplying quantized linears and KV write hooks.
    ``recorder`` receives (site, row, position) capture callbacks.
    """

    def __init__(self, model: ToyModel, runtime=None, recorder=None):
        self.model = model
        self.cfg = model.config
        self.runtime = runtime
        self.recorder = recorder
        self.rope = RopeConfig(head_dim=self.cfg.head_dim, base=self.cfg.rope_base)
        self.pos = 0
        d = self.cfg.d_model
        self.states = [LayerState(self.cfg.max_seq_len, d)
                       for _ in range(self.cfg.n_layers)]
        self._embed = model.tensors["embed"].astype(np.float64)
        self._norm_f = model.tensors["norm_f"].astype(np.float64)
        self._lm_head = self._make_linear("lm_head", model.tensors["lm_head"], None)
        self._layers = []
        for i in range(self.cfg.n_layers):
            p = f"layers.{i}."
            t = model.tensors
            bq = t.get(p + "bq")
            bk = t.get(p + "bk")
            bv = t.get(p + "bv")
            self._layers.append({
                "norm1": t[p + "norm1"].astype(np.float64),
                "norm2": t[p + "norm2"].astype(np.float64),
                "wq": self._make_linear(p + "wq", t[p + "wq"], bq),
                "wk": self._make_linear(p + "wk", t[p + "wk"], bk),
                "wv": self._make_linear(p + "wv", t[p + "wv"], bv),
                "wo": self._make_linear(p + "wo", t[p + "wo"], None),
                "w_gate": self._make_linear(p + "w_gate", t[p + "w_gate"], None),
                "w_up": self._make_linear(p + "w_up", t[p + "w_up"], None),
                "w_down": self._make_linear(p + "w_down", t[p + "w_down"], None),
                "bk": np.zeros(d) if bk is None else bk.astype(np.float64),
            })

    def _make_linear(self, name, w, b):
        if self.runtime is not None:
            return self.runtime.make_linear(name, w, b)
        return PlainLinear(w, b)

    def _record(self, site, row):
        if self.recorder is not None:
            self.recorder.record(site, row, self.pos)

    def step(self, token: int) -> np.ndarray:
        """Feed one token, return the logits row for its position."""
        cfg = self.cfg
        if not (0 <= token < cfg.vocab_size):
            raise TokenOutOfRange(f"token {token} outside vocab {cfg.vocab_size}")
        if self.pos >= cfg.max_seq_len:
            raise ContextOverflow(f"context limit {cfg.max_seq_len} reached")
        nh, hd = cfg.n_heads, cfg.head_dim
        x = self._embed[token].copy()

        for i, layer in enumerate(self._layers):
            h = rmsnorm(x, layer["norm1"])
            self._record(f"layer{i}.attn_in", h)
            hrow = h[np.newaxis, :]
            q = layer["wq"](hrow)[0]
            k_pre = layer["wk"].pre_bias(hrow)[0]
            k_post = k_pre + layer["bk"]
            v = layer["wv"](hrow)[0]
            self._record(f"layer{i}.k_pre_bias", k_pre)
            self._record(f"layer{i}.k_post_bias", k_post)

            q_h = rope_heads(q.reshape(nh, hd), self.rope, self.pos)
            k_h = rope_heads(k_post.reshape(nh, hd), self.rope, self.pos)
            k_rope = k_h.reshape(-1)
            self._record(f"layer{i}.k_post_rope", k_rope)

            # quantize-at-write: the stored (reconstructed) K/V feed future
            # positions; the current position attends with its fresh row,
            # so position 0 is independent of the KV bit-width
            st = self.states[i]
            if self.runtime is not None:
                k_store, v_store = self.runtime.kv_write(
                    i, k_pre, k_rope, v, layer["bk"], self.rope, self.pos)
            else:
                k_store, v_store = k_rope, v

            attn = np.empty(cfg.d_model)
            n_past = st.n
            for hh in range(nh):
                sl = slice(hh * hd, (hh + 1) * hd)
                k_ctx = np.concatenate(
                    [st.k[:n_past, sl], k_h[hh][np.newaxis, :]], axis=0)
                v_ctx = np.concatenate(
                    [st.v[:n_past, sl], v[sl][np.newaxis, :]], axis=0)
                scores = (k_ctx @ q_h[hh]) / np.sqrt(hd)
                p = softmax(scores)
                attn[sl] = p @ v_ctx
            st.append(k_store, v_store)

            self._record(f"layer{i}.attn_out_in", attn)
            x = x + layer["wo"](attn[np.newaxis, :])[0]

            h2 = rmsnorm(x, layer["norm2"])
            self._record(f"layer{i}.mlp_in", h2)
            h2row = h2[np.newaxis, :]
            gate = layer["w_gate"](h2row)[0]
            up = layer["w_up"](h2row)[0]
            act = silu(gate) * up
            self._record(f"layer{i}.mlp_down_in", act)
            x = x + layer["w_down"](act[np.newaxis, :])[0]

        hf = rmsnorm(x, self._norm_f)
        self._record("lm_head_in", hf)
        logits = self._lm_head(hf[np.newaxis, :])[0]
        self.pos += 1
        return logits


def forward_reference(m: ToyModel, tokens) -> np.ndarray:
    """Full-precision logits for every position of a token sequence."""
    sess = Session(m)
    return np.stack([sess.step(t) for t in tokens])


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Zero out everything outside the smallest prefix of descending-sorted
    probabilities whose mass reaches top_p; renormalize."""
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(csum, top_p) + 1)
    keep = order[:cutoff]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def sample_token(logits: np.ndarray, temperature: float, top_p: float, rng) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    probs = softmax(logits / temperature)
    probs = nucleus_filter(probs, top_p)
    return int(rng.choice(len(probs), p=probs))


def generate(m: ToyModel, prompt, max_new: int, temperature: float = 0.6,
             top_p: float = 0.95, rng=None, runtime=None) -> list:
    """Autoregressive sampling; greedy when temperature == 0. Returns the
    full id sequence (prompt + continuation)."""
    prompt = list(prompt)
    if len(prompt) + max_new > m.config.max_seq_len:
        raise ContextOverflow(
            f"{len(prompt)} prompt + {max_new} new > {m.config.max_seq_len}")
    if temperature != 0 and rng is None:
        raise ValueError("sampling requires an rng")
    sess = Session(m, runtime=runtime)
    logits = None
    for t in prompt:
        logits = sess.step(t)
    out = list(prompt)
    for _ in range(max_new):
        nxt = sample_token(logits, temperature, top_p, rng)
        out.append(nxt)
        if len(out) >= m.config.max_seq_len:
            break
        logits = sess.step(nxt)
    return out
