"""Bit-exact MXFP4 codec: E2M1 elements, one shared power-of-two scale
per 32-element block.

Nibble layout: bit 3 = sign, bits 0..2 = magnitude index into the E2M1
value table {0, 0.5, 1, 1.5, 2, 3, 4, 6}. The block scale is an E8M0-style
biased exponent (bias 127). A serialized block is 17 bytes: 1 scale byte
followed by 16 code bytes, two codes per byte, low nibble first.
Negative zero is canonicalized to +0 on encode.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import MalformedBlock, NonFiniteInput

BLOCK_SIZE = 32
BLOCK_BYTES = 17
SCALE_BIAS = 127

E2M1_VALUES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
# midpoints between consecutive magnitudes; ties round away from zero
_MIDPOINTS = (E2M1_VALUES[:-1] + E2M1_VALUES[1:]) / 2.0


@dataclass
class Mxfp4Block:
    scale_exp: int  # biased exponent, 0..254
    codes: np.ndarray  # 32 uint8 nibbles

    def __eq__(self, other):
        return (
            isinstance(other, Mxfp4Block)
            and self.scale_exp == other.scale_exp
            and np.array_equal(self.codes, other.codes)
        )


def encode_array(x: np.ndarray):
    """Vectorized encode of shape (n_blocks, 32) -> (scale_exps, codes).

    scale_exp = clamp(floor(log2(max|x|)) - 2 + 127, 0, 254); -2 because
    the largest E2M1 magnitude 6 has exponent 2. Elements round to the
    nearest E2M1 value, ties away from zero; magnitudes above 6 saturate.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("MXFP4 encode requires finite inputs")
    amax = np.max(np.abs(x), axis=1)
    nonzero = amax > 0
    exps = np.full(x.shape[0], SCALE_BIAS, dtype=np.int64)
    exps[nonzero] = np.clip(
        np.floor(np.log2(amax[nonzero])).astype(np.int64) - 2 + SCALE_BIAS, 0, 254
    )
    scale = np.exp2((exps - SCALE_BIAS).astype(np.float64))[:, None]
    mag = np.abs(x) / scale
    idx = np.minimum(np.searchsorted(_MIDPOINTS, mag, side="right"), 7)
    sign = ((x < 0) & (idx > 0)).astype(np.uint8)  # -0 canonicalized to +0
    codes = (sign << 3) | idx.astype(np.uint8)
    return exps, codes


def decode_array(exps: np.ndarray, codes: np.ndarray) -> np.ndarray:
    exps = np.asarray(exps, dtype=np.int64)
    codes = np.asarray(codes, dtype=np.uint8)
    vals = E2M1_VALUES[codes & 0x7] * np.where(codes & 0x8, -1.0, 1.0)
    return vals * np.exp2((exps - SCALE_BIAS).astype(np.float64))[:, None]


def mxfp4_encode(x) -> Mxfp4Block:
    """Encode exactly 32 reals into one block."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (BLOCK_SIZE,):
        raise MalformedBlock(f"expected {BLOCK_SIZE} elements, got {x.shape}")
    exps, codes = encode_array(x[None, :])
    return Mxfp4Block(int(exps[0]), codes[0])


def mxfp4_decode(b: Mxfp4Block) -> np.ndarray:
    if b.codes.shape != (BLOCK_SIZE,):
        raise MalformedBlock("block must hold 32 codes")
    return decode_array(np.array([b.scale_exp]), b.codes[None, :])[0]


def block_to_bytes(b: Mxfp4Block) -> bytes:
    lo = b.codes[0::2] & 0xF
    hi = b.codes[1::2] & 0xF
    return bytes([b.scale_exp]) + ((hi << 4) | lo).astype(np.uint8).tobytes()


def block_from_bytes(raw: bytes) -> Mxfp4Block:
    if len(raw) != BLOCK_BYTES:
        raise MalformedBlock(f"block must be {BLOCK_BYTES} bytes, got {len(raw)}")
    packed = np.frombuffer(raw[1:], dtype=np.uint8)
    codes = np.empty(BLOCK_SIZE, dtype=np.uint8)
    codes[0::2] = packed & 0xF
    codes[1::2] = packed >> 4
    return Mxfp4Block(raw[0], codes)


# --- tensor container ---------------------------------------------------------
# header: magic b"MXT4", u32 rows, u32 cols, u32 pad (zero elements appended to
# fill the final block); payload: ceil(n/32) serialized blocks.

_TENSOR_MAGIC = b"MXT4"
_HEADER = struct.Struct("<4sIII")


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    rows, cols = x.shape
    flat = x.ravel()
    pad = (-flat.size) % BLOCK_SIZE
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
    exps, codes = encode_array(flat.reshape(-1, BLOCK_SIZE))
    out = bytearray(_HEADER.pack(_TENSOR_MAGIC, rows, cols, pad))
    for e, c in zip(exps, codes):
        out += block_to_bytes(Mxfp4Block(int(e), c))
    return bytes(out)


def decode_tensor(raw: bytes) -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise MalformedBlock("tensor payload shorter than header")
    magic, rows, cols, pad = _HEADER.unpack_from(raw)
    if magic != _TENSOR_MAGIC:
        raise MalformedBlock(f"bad tensor magic {magic!r}")
    n = rows * cols
    n_blocks = (n + pad) // BLOCK_SIZE
    body = raw[_HEADER.size :]
    if len(body) != n_blocks * BLOCK_BYTES:
        raise MalformedBlock("tensor payload length mismatch")
    exps = np.empty(n_blocks, dtype=np.int64)
    codes = np.empty((n_blocks, BLOCK_SIZE), dtype=np.uint8)
    for i in range(n_blocks):
        b = block_from_bytes(body[i * BLOCK_BYTES : (i + 1) * BLOCK_BYTES])
        exps[i] = b.scale_exp
        codes[i] = b.codes
    vals = decode_array(exps, codes).ravel()
    return vals[:n].reshape(rows, cols)


def mxfp4_fake_quant(x: np.ndarray) -> np.ndarray:
    """Round-trip a matrix through MXFP4 blocks (row-major 32-blocks)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    pad = (-flat.size) % BLOCK_SIZE
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
    exps, codes = encode_array(flat.reshape(-1, BLOCK_SIZE))
    vals = decode_array(exps, codes).ravel()
    return vals[: x.size].reshape(x.shape)
