"""Lossy payload codecs plus exact communication-bit accounting.

Quantization maps a vector to sign/level pairs against its max magnitude:
with compression factor s_q in [1, 16] each element takes floor(32/s_q) bits
(one sign bit, the rest level bits), and the level count is
l_q = 2^(floor(32/s_q) - 1) - 1. Levels are the ceiling of the scaled
magnitude, so quantized magnitudes never shrink and the per-element error is
at most max_abs / l_q. ``bit_cost`` charges d * floor(32/s_q) + 32 (the 32 is
the max-abs scalar at float32 width); the packed bitstream materializes
exactly those payload bits but frames them with a 32-bit element count and a
float64 max_abs for lossless round-trips.

Kronecker factors are compressed by truncated SVD, keeping l_v triples per
factor, then quantizing each factor matrix separately with its own max_abs.
The budget planner picks the largest uniform fraction of each layer's rank
whose exact realized bits (headers included) fit in 16 * d, the footprint of
the float32 model weights halved to s_q = 2.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .fisher import KFACFisher, KFACLayer
from .numerics import LowRankFactors, top_k_svd

MIN_SQ, MAX_SQ = 1, 16


@dataclass
class QuantizedVector:
    s_q: int
    max_abs: float
    signs: np.ndarray  # (n,), +/-1 int8 (zero elements stored as +1)
    levels: np.ndarray  # (n,), int64 in [0, l_q]

    @property
    def n(self) -> int:
        return self.levels.shape[0]


def _element_bits(s_q: int) -> int:
    if not isinstance(s_q, (int, np.integer)) or not MIN_SQ <= s_q <= MAX_SQ:
        raise ValueError(f"s_q must be an integer in [{MIN_SQ}, {MAX_SQ}], got {s_q}")
    return 32 // int(s_q)


def level_count(s_q: int) -> int:
    """Number of positive quantization levels l_q for a compression factor."""
    return 2 ** (_element_bits(s_q) - 1) - 1


def quantize(x: np.ndarray, s_q: int) -> QuantizedVector:
    """Quantize a 1-d vector to ceil-scaled levels of its max magnitude.

    The level of each element is the smallest k whose dequantized magnitude
    max_abs * (k / l_q), computed with the same float operations dequantize
    uses, covers the element. That makes quantize exactly idempotent on its
    own output grid, where a plain floating-point ceil can drift up a level.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"quantize expects a 1-d vector, got ndim={x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    l_q = level_count(s_q)
    signs = np.where(x < 0, -1, 1).astype(np.int8)
    max_abs = float(np.max(np.abs(x))) if x.size else 0.0
    if max_abs == 0.0:
        return QuantizedVector(int(s_q), 0.0, signs, np.zeros(x.shape, dtype=np.int64))
    mag = np.abs(x)
    levels = np.minimum(np.ceil(l_q * mag / max_abs), l_q).astype(np.int64)
    for _ in range(2):  # one-sided float slop is at most a level per pass
        covered_below = (levels > 0) & (max_abs * ((levels - 1) / l_q) >= mag)
        if not covered_below.any():
            break
        levels[covered_below] -= 1
    short = (levels < l_q) & (max_abs * (levels / l_q) < mag)
    levels[short] += 1
    return QuantizedVector(int(s_q), max_abs, signs, levels)


def dequantize(q: QuantizedVector) -> np.ndarray:
    l_q = level_count(q.s_q)
    return q.max_abs * q.signs.astype(np.float64) * (q.levels.astype(np.float64) / l_q)


def to_bytes(q: QuantizedVector) -> bytes:
    """Packed bitstream: u32 count, f64 max_abs, then per element the sign bit
    followed by the level bits, filled LSB-first within each byte."""
    bits_per = _element_bits(q.s_q)
    level_bits = bits_per - 1
    bits = np.zeros((q.n, bits_per), dtype=np.uint8)
    bits[:, 0] = q.signs < 0
    if level_bits:
        shifts = np.arange(level_bits, dtype=np.int64)
        bits[:, 1:] = (q.levels[:, None] >> shifts) & 1
    packed = np.packbits(bits.ravel(), bitorder="little")
    return struct.pack("<I", q.n) + struct.pack("<d", q.max_abs) + packed.tobytes()


def from_bytes(buf: bytes, s_q: int) -> QuantizedVector:
    bits_per = _element_bits(s_q)
    if len(buf) < 12:
        raise ValueError("quantized payload shorter than its 12-byte header")
    (n,) = struct.unpack("<I", buf[:4])
    (max_abs,) = struct.unpack("<d", buf[4:12])
    expected = 12 + (n * bits_per + 7) // 8
    if len(buf) != expected:
        raise ValueError(f"quantized payload length {len(buf)} != expected {expected}")
    raw = np.unpackbits(np.frombuffer(buf[12:], dtype=np.uint8), bitorder="little")
    bits = raw[: n * bits_per].reshape(n, bits_per).astype(np.int64)
    signs = np.where(bits[:, 0] == 1, -1, 1).astype(np.int8)
    levels = np.zeros(n, dtype=np.int64)
    for j in range(1, bits_per):
        levels |= bits[:, j] << (j - 1)
    return QuantizedVector(int(s_q), float(max_abs), signs, levels)


@dataclass
class CompressedFactor:
    """Truncated SVD of one Kronecker factor, each matrix quantized alone."""

    qu: QuantizedVector
    qs: QuantizedVector
    qvt: QuantizedVector
    shape: tuple[int, int]  # (matrix dim, kept rank)

    def reconstruct(self) -> np.ndarray:
        m, l_v = self.shape
        u = dequantize(self.qu).reshape(m, l_v)
        s = dequantize(self.qs)
        vt = dequantize(self.qvt).reshape(l_v, m)
        return (u * s) @ vt


@dataclass
class CompressedKFACLayer:
    a: CompressedFactor
    b: CompressedFactor


@dataclass
class CompressedKFAC:
    layers: list[CompressedKFACLayer]
    s_q: int


@dataclass
class BudgetPlan:
    s_q: int
    l_v: list[int]
    total_bits: int
    budget_bits: int
    feasible: bool


def bit_cost(obj) -> int:
    """Exact communicated bits of a payload object.

    Raw float arrays are charged 32 bits per element (float32 transport);
    quantized vectors n * floor(32/s_q) + 32; structured payloads sum their
    parts.
    """
    if isinstance(obj, QuantizedVector):
        return obj.n * _element_bits(obj.s_q) + 32
    if isinstance(obj, LowRankFactors):
        return 32 * (obj.u.size + obj.s.size + obj.vt.size)
    if isinstance(obj, CompressedFactor):
        return bit_cost(obj.qu) + bit_cost(obj.qs) + bit_cost(obj.qvt)
    if isinstance(obj, CompressedKFACLayer):
        return bit_cost(obj.a) + bit_cost(obj.b)
    if isinstance(obj, CompressedKFAC):
        return sum(bit_cost(layer) for layer in obj.layers)
    if isinstance(obj, np.ndarray):
        return 32 * obj.size
    if isinstance(obj, (list, tuple)):
        return sum(bit_cost(item) for item in obj)
    raise ValueError(f"no bit accounting for {type(obj).__name__}")


def svd_compress(a: np.ndarray, s_v: int) -> LowRankFactors:
    """Keep the top floor(m / (2 s_v)) singular triples of a square matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"svd_compress expects a square matrix, got {a.shape}")
    if s_v < 1:
        raise ValueError(f"s_v must be >= 1, got {s_v}")
    l_v = a.shape[0] // (2 * s_v)
    if l_v < 1:
        raise ValueError(
            f"s_v={s_v} leaves no singular triples for a {a.shape[0]}x{a.shape[0]} matrix"
        )
    return top_k_svd(a, l_v)


def _quantize_factor(mat: np.ndarray, l_v: int, s_q: int) -> CompressedFactor:
    factors = top_k_svd(mat, l_v)
    return CompressedFactor(
        qu=quantize(factors.u.ravel(), s_q),
        qs=quantize(factors.s, s_q),
        qvt=quantize(factors.vt.ravel(), s_q),
        shape=(mat.shape[0], l_v),
    )


def compress_kfac(f: KFACFisher, s_q: int, l_v: list[int]) -> CompressedKFAC:
    """Compress each layer's factor pair with its planned kept rank."""
    if len(l_v) != len(f.layers):
        raise ValueError(f"need one l_v per layer: {len(l_v)} != {len(f.layers)}")
    layers = []
    for layer, l in zip(f.layers, l_v):
        cap = min(layer.a.shape[0], layer.b.shape[0])
        if not 1 <= l <= cap:
            raise ValueError(f"l_v={l} outside [1, {cap}] for factor dims "
                             f"{layer.a.shape[0]}/{layer.b.shape[0]}")
        layers.append(CompressedKFACLayer(
            a=_quantize_factor(layer.a, l, s_q),
            b=_quantize_factor(layer.b, l, s_q),
        ))
    return CompressedKFAC(layers, int(s_q))


def decompress_kfac(c: CompressedKFAC) -> KFACFisher:
    """Reconstruct factors (symmetrized, since quantization breaks symmetry)."""
    layers = []
    for layer in c.layers:
        a = layer.a.reconstruct()
        b = layer.b.reconstruct()
        layers.append(KFACLayer((a + a.T) / 2.0, (b + b.T) / 2.0))
    return KFACFisher(layers)


def _plan_bits(layer_dims: list[tuple[int, int]], l_v: list[int], s_q: int) -> int:
    eb = _element_bits(s_q)
    total = 0
    for (da, db), l in zip(layer_dims, l_v):
        total += eb * (2 * da * l + l) + 3 * 32  # factor A: u, s, vt payloads
        total += eb * (2 * db * l + l) + 3 * 32  # factor B
    return total


def kfac_budget_plan(layer_dims: list[tuple[int, int]], d: int, s_q: int) -> BudgetPlan:
    """Largest uniform-fraction kept ranks fitting the 16*d bit budget.

    ``layer_dims`` holds each layer's factor sizes (dim of A, dim of B); the
    kept rank of layer l is the common fraction f of min(dim_a, dim_b),
    floored and clamped to [1, full rank]. Returns the all-ones plan with
    ``feasible=False`` when even that exceeds the budget.
    """
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if not layer_dims:
        raise ValueError("layer_dims must not be empty")
    for da, db in layer_dims:
        if da < 1 or db < 1:
            raise ValueError(f"factor dims must be positive, got ({da}, {db})")
    _element_bits(s_q)
    budget = 16 * d
    ranks = [min(da, db) for da, db in layer_dims]
    d_max = max(ranks)
    for j in range(d_max, 0, -1):
        frac = j / d_max
        l_v = [min(r, max(1, int(frac * r))) for r in ranks]
        total = _plan_bits(layer_dims, l_v, s_q)
        if total <= budget:
            return BudgetPlan(int(s_q), l_v, total, budget, True)
    l_v = [1] * len(layer_dims)
    return BudgetPlan(int(s_q), l_v, _plan_bits(layer_dims, l_v, s_q), budget, False)


def quantize_blocks(x: np.ndarray, block_sizes: list[int], s_q: int) -> list[QuantizedVector]:
    """Quantize consecutive slices of a flat vector independently (one
    max_abs per block, e.g. per network layer)."""
    x = np.asarray(x, dtype=np.float64)
    if sum(block_sizes) != x.shape[0]:
        raise ValueError(f"block sizes sum to {sum(block_sizes)}, vector has {x.shape[0]}")
    out = []
    offset = 0
    for size in block_sizes:
        out.append(quantize(x[offset : offset + size], s_q))
        offset += size
    return out


def dequantize_blocks(blocks: list[QuantizedVector]) -> np.ndarray:
    return np.concatenate([dequantize(q) for q in blocks])
