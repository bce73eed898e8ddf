"""Bit-packed {-1,+1} tensors and the XNOR/PopCount kernels.

A BitTensor stores one bit per element (bit 1 <=> +1, bit 0 <=> -1), packed
into 64-bit words. Packing is row-major: one packed row per index along the
first axis, covering the flattened remaining axes (a 1-D tensor is a single
row). Padding bits past the valid length are always zero, so the dot product
of two rows can be recovered from the XOR popcount alone:

    matches p = n - popcount(a XOR b)   ->   dot = p - (n - p) = n - 2*popcount

which is exact because zero padding bits XOR to zero and are never counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64

# Word-block size for the chunked popcount GEMM (bounds transient memory).
_GEMM_BLOCK_WORDS = 1 << 22


def _popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


@dataclass(frozen=True)
class BitTensor:
    """Packed sign tensor: bit 1 means +1, bit 0 means -1."""

    shape: tuple[int, ...]
    words: np.ndarray  # uint64, shape (rows, words_per_row); rows = shape[0] for ndim > 1
    valid_bits_in_last_word: int

    @property
    def row_bits(self) -> int:
        """Number of valid bits per packed row."""
        n = 1
        for d in (self.shape[1:] if len(self.shape) > 1 else self.shape):
            n *= d
        return n

    @property
    def rows(self) -> int:
        return self.shape[0] if len(self.shape) > 1 else 1


def _pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, n) uint8 array of {0,1} into (rows, ceil(n/64)) uint64."""
    rows, n = bits.shape
    packed = np.packbits(bits, axis=-1, bitorder="little")
    nbytes = packed.shape[-1]
    pad = (-nbytes) % 8
    if pad:
        packed = np.concatenate(
            [packed, np.zeros((rows, pad), dtype=np.uint8)], axis=-1
        )
    return np.ascontiguousarray(packed).view("<u8")


def _unpack_bit_rows(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of _pack_bit_rows: (rows, nwords) uint64 -> (rows, n) uint8 {0,1}."""
    u8 = np.ascontiguousarray(words).view(np.uint8)
    return np.unpackbits(u8, axis=-1, count=n, bitorder="little")


def sign_pack(x: np.ndarray) -> BitTensor:
    """Threshold a full-precision tensor to sign bits and pack it.

    Elements >= 0 map to +1 (sign(0) = +1 by convention), negatives to -1.
    Raises ValueError on non-finite input.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot pack an empty tensor")
    if not np.isfinite(x).all():
        raise ValueError("non-finite activation")
    shape = x.shape
    bits = (x >= 0).astype(np.uint8).reshape(shape[0] if x.ndim > 1 else 1, -1)
    words = _pack_bit_rows(bits)
    n = bits.shape[1]
    return BitTensor(shape=shape, words=words, valid_bits_in_last_word=((n - 1) % WORD_BITS) + 1)


def unpack(t: BitTensor) -> np.ndarray:
    """Expand a BitTensor back to a {-1,+1} int8 array of its original shape."""
    bits = _unpack_bit_rows(t.words, t.row_bits)
    return (bits.astype(np.int8) * 2 - 1).reshape(t.shape)


def xnor_popcount_dot(a: BitTensor, b: BitTensor) -> int:
    """Dot product of two packed sign vectors via XOR + PopCount (2p - n)."""
    if len(a.shape) != 1 or len(b.shape) != 1:
        raise ValueError("xnor_popcount_dot expects 1-D bit tensors")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    mismatches = int(_popcount(a.words ^ b.words).sum())
    return n - 2 * mismatches


@dataclass(frozen=True)
class ScaleFactors:
    """Per-output-channel weight scale alpha and scalar activation scale beta."""

    alpha: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float32)
        object.__setattr__(self, "alpha", a)
        if a.ndim != 1:
            raise ValueError("alpha must be one value per output channel")
        if (a < 0).any() or self.beta < 0:
            raise ValueError("scale factors must be nonnegative")

    @classmethod
    def unit(cls, out_channels: int) -> "ScaleFactors":
        return cls(alpha=np.ones(out_channels, dtype=np.float32), beta=1.0)


def weight_scale(w: np.ndarray) -> np.ndarray:
    """Per-output-channel mean absolute value of latent weights (axis 0 = out).

    Computed as sum * (1/n) so it is bit-identical to the training tape's
    mean, keeping the packed inference path exactly equal to the float path.
    """
    w = np.asarray(w)
    flat = np.abs(w).reshape(w.shape[0], -1)
    inv = np.asarray(1.0 / flat.shape[1], dtype=w.dtype if w.dtype.kind == "f" else np.float32)
    return (flat.sum(axis=1) * inv).astype(np.float32)


def _mismatch_counts(w_words: np.ndarray, rhs_words: np.ndarray) -> np.ndarray:
    """popcount(w_i XOR r_j) summed over words, for all row pairs -> (M, N) int64."""
    m, kw = w_words.shape
    n = rhs_words.shape[0]
    out = np.empty((m, n), dtype=np.int64)
    block = max(1, _GEMM_BLOCK_WORDS // max(1, n * kw))
    for i0 in range(0, m, block):
        i1 = min(m, i0 + block)
        xor = w_words[i0:i1, None, :] ^ rhs_words[None, :, :]
        out[i0:i1] = _popcount(xor).sum(axis=2, dtype=np.int64)
    return out


def binary_gemm(w: BitTensor, a: BitTensor, s: ScaleFactors) -> np.ndarray:
    """Scaled binary matrix product: out[i, j] = alpha[i] * beta * <w_i, a_:j>.

    w is (M, K), a is (K, N); the dot products are computed with XOR/PopCount
    over the packed words and are exact integers before scaling.
    """
    if len(w.shape) != 2 or len(a.shape) != 2:
        raise ValueError("binary_gemm expects 2-D bit tensors")
    m, k = w.shape
    k2, n = a.shape
    if k != k2:
        raise ValueError(f"dimension mismatch: ({m},{k}) @ ({k2},{n})")
    if s.alpha.shape[0] != m:
        raise ValueError(f"alpha length {s.alpha.shape[0]} != row count {m}")
    a_cols = _pack_bit_rows(np.ascontiguousarray(_unpack_bit_rows(a.words, n).T))
    dots = k - 2 * _mismatch_counts(w.words, a_cols)
    return (s.alpha[:, None] * (s.beta * dots)).astype(np.float32)


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    span = dilation * (k - 1) + 1
    return (size + 2 * padding - span) // stride + 1


def binary_conv2d(
    w: BitTensor,
    a: BitTensor,
    s: ScaleFactors,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> np.ndarray:
    """Binary 2-D convolution with zero-padding semantics on the sign tensor.

    w is (Cout, Cin, kh, kw), a is (Cin, H, W). Positions introduced by
    padding are packed as -1 bits; an analytic correction (the per-position
    sum of weights over padded taps) is added so the result equals the
    convolution of the {-1,+1} tensor with true zero padding.
    """
    if len(w.shape) != 4 or len(a.shape) != 3:
        raise ValueError("binary_conv2d expects 4-D weights and a 3-D activation")
    co, ci, kh, kw = w.shape
    ci2, h, wid = a.shape
    if ci != ci2:
        raise ValueError(f"dimension mismatch: weight Cin {ci} vs activation Cin {ci2}")
    if s.alpha.shape[0] != co:
        raise ValueError(f"alpha length {s.alpha.shape[0]} != out channels {co}")
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(wid, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")

    bits = _unpack_bit_rows(a.words, h * wid).reshape(ci, h, wid)
    padded = np.zeros((ci, h + 2 * padding, wid + 2 * padding), dtype=np.uint8)
    padded[:, padding : padding + h, padding : padding + wid] = bits

    cols = np.empty((ci, kh, kw, ho, wo), dtype=np.uint8)
    for i in range(kh):
        for j in range(kw):
            ii, jj = i * dilation, j * dilation
            cols[:, i, j] = padded[:, ii : ii + ho * stride : stride, jj : jj + wo * stride : stride]
    k = ci * kh * kw
    npos = ho * wo
    patches = np.ascontiguousarray(cols.reshape(k, npos).T)

    dots = k - 2 * _mismatch_counts(w.words, _pack_bit_rows(patches))

    if padding > 0:
        valid = np.zeros((h + 2 * padding, wid + 2 * padding), dtype=np.float32)
        valid[padding : padding + h, padding : padding + wid] = 1.0
        taps = np.empty((kh, kw, ho, wo), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                ii, jj = i * dilation, j * dilation
                taps[i, j] = valid[ii : ii + ho * stride : stride, jj : jj + wo * stride : stride]
        pad_taps = (1.0 - taps).reshape(kh * kw, npos)
        w_signs = _unpack_bit_rows(w.words, ci * kh * kw).astype(np.int32) * 2 - 1
        w_tap_sum = w_signs.reshape(co, ci, kh * kw).sum(axis=1).astype(np.float32)
        dots = dots + np.rint(w_tap_sum @ pad_taps).astype(np.int64)

    out = s.alpha[:, None] * (s.beta * dots)
    return out.reshape(co, ho, wo).astype(np.float32)
