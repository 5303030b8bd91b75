"""Bit-packed execution of binary-weight and XNOR convolutions.

Signs are packed ``+1 -> 1``, ``-1 -> 0`` into little-endian 64-bit words,
least significant bit first, pad bits zero. For two packed vectors of length
``n`` the +-1 dot product is ``n - 2 * popcount(a ^ b)``.

Operation counting follows the per-layer conventions of the analytic model
(:mod:`xfq.costmodel`), per image:

* ``binary_ops``: one per weight bit touched (BW add/subtract), or two per
  bit in XNOR mode (XOR + bitcount) unless ``double_xnor=False``.
* ``scale_muls`` / ``real_macs``: ``N_o * n_groups``. The group scale is
  hoisted per group, which is the most favourable reading of the MAC column
  for cross-filter layers.
* ``fold_muls``: folding the activation scale into each group scale (XNOR).
* ``output_muls``: multiplications actually executed, one per output element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InstrumentationError, ShapeError
from .quantizer import Mode, QuantizedLayer, quantize_activation
from .tensor import ConvGeometry, Tensor4, conv2d_reference, pad_constant

__all__ = [
    "WORD_BITS",
    "PackedBits",
    "PackedLayer",
    "OpCounter",
    "pack",
    "unpack",
    "pack_rows",
    "binary_dot",
    "pack_layer",
    "im2col",
    "conv_bw",
    "conv_xnor",
    "conv_quantized",
    "op_counters",
    "xnor_reference",
]

WORD_BITS = 64


def _n_words(bit_len: int) -> int:
    return -(-bit_len // WORD_BITS)


def pack_rows(signs: np.ndarray) -> np.ndarray:
    """Pack each row of a 2-D +-1 array into ``(rows, n_words)`` uint64."""
    s = np.asarray(signs)
    rows, bit_len = s.shape
    n_words = _n_words(bit_len)
    bits = np.zeros((rows, n_words * WORD_BITS), dtype=np.uint8)
    bits[:, :bit_len] = s > 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


@dataclass(frozen=True, eq=False)
class PackedBits:
    words: np.ndarray
    bit_len: int

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.uint64).reshape(-1)
        if words.size != _n_words(self.bit_len):
            raise ShapeError("packed word count", _n_words(self.bit_len), words.size)
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    def __eq__(self, other):
        if not isinstance(other, PackedBits):
            return NotImplemented
        return self.bit_len == other.bit_len and np.array_equal(self.words, other.words)


def pack(signs) -> PackedBits:
    s = np.asarray(signs).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot pack an empty sign vector")
    return PackedBits(pack_rows(s[None, :])[0], int(s.size))


def unpack(bits: PackedBits) -> np.ndarray:
    raw = np.unpackbits(bits.words.astype("<u8").view(np.uint8), bitorder="little")
    return np.where(raw[: bits.bit_len] == 1, 1, -1).astype(np.int8)


def _tail_mask(bit_len: int) -> np.uint64:
    rem = bit_len % WORD_BITS
    return np.uint64(0xFFFFFFFFFFFFFFFF) if rem == 0 else np.uint64((1 << rem) - 1)


def binary_dot(a: PackedBits, b: PackedBits) -> int:
    """+-1 inner product of two packed vectors via XOR and popcount."""
    if a.bit_len != b.bit_len:
        raise ShapeError("binary_dot bit_len", a.bit_len, b.bit_len)
    x = a.words ^ b.words
    x[-1:] &= _tail_mask(a.bit_len)
    return a.bit_len - 2 * int(np.bitwise_count(x).sum())


@dataclass(frozen=True, eq=False)
class PackedLayer:
    """Execution layout: one packed row per output filter, im2col order."""

    rows: np.ndarray
    bit_len: int
    filter_alphas: np.ndarray
    filter_groups: np.ndarray
    group_alphas: np.ndarray
    geometry: tuple[int, int, int, int]
    mode: Mode

    @property
    def n_groups(self) -> int:
        return int(self.group_alphas.size)


def pack_layer(qlayer: QuantizedLayer) -> PackedLayer:
    rows = pack_rows(qlayer.sign_rows())
    rows.setflags(write=False)
    return PackedLayer(
        rows=rows,
        bit_len=qlayer.n_k,
        filter_alphas=qlayer.filter_alphas(),
        filter_groups=qlayer.filter_groups(),
        group_alphas=qlayer.alphas,
        geometry=qlayer.geometry,
        mode=qlayer.mode,
    )


class OpCounter:
    """Accumulates operation counts for the conv calls it is passed to."""

    FIELDS = ("binary_ops", "real_macs", "scale_muls", "fold_muls", "output_muls")

    def __init__(self, double_xnor: bool = True):
        self.double_xnor = double_xnor
        self.enabled = False
        for f in self.FIELDS:
            setattr(self, f, 0)

    def add(self, **counts):
        self.enabled = True
        for k, v in counts.items():
            setattr(self, k, getattr(self, k) + int(v))

    def counts(self) -> dict[str, int]:
        if not self.enabled:
            raise InstrumentationError("no instrumented convolution has run on this counter")
        return {f: getattr(self, f) for f in self.FIELDS}


def op_counters(counter: OpCounter | None) -> dict[str, int]:
    if counter is None:
        raise InstrumentationError("instrumentation disabled: pass an OpCounter to the conv call")
    return counter.counts()


def im2col(x: np.ndarray, k_h: int, k_w: int, stride: int) -> np.ndarray:
    """Padded ``(h, w, c)`` image -> ``(o_h*o_w, c*k_h*k_w)`` rows in ``(c, k_h, k_w)`` order."""
    h, w, c = x.shape
    o_h = (h - k_h) // stride + 1
    o_w = (w - k_w) // stride + 1
    cols = np.empty((o_h, o_w, c, k_h, k_w), dtype=x.dtype)
    for dy in range(k_h):
        for dx in range(k_w):
            cols[:, :, :, dy, dx] = x[
                dy : dy + stride * (o_h - 1) + 1 : stride,
                dx : dx + stride * (o_w - 1) + 1 : stride,
            ]
    return cols.reshape(o_h * o_w, c * k_h * k_w)


def _check(inp: Tensor4, qlayer: QuantizedLayer, geom: ConvGeometry, mode: Mode):
    if qlayer.mode is not mode:
        raise ShapeError("layer mode", mode.value, qlayer.mode.value)
    x = inp.data if isinstance(inp, Tensor4) else np.asarray(inp, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError("input rank", 4, x.ndim)
    k_h, k_w, i_c, _ = qlayer.geometry
    if x.shape[2] != i_c:
        raise ShapeError("input channels (input c vs weight i_c)", i_c, x.shape[2])
    o_h, o_w = geom.output_size(x.shape[0], x.shape[1], k_h, k_w)
    return x, o_h, o_w


def conv_bw(
    inp: Tensor4,
    qlayer: QuantizedLayer,
    geom: ConvGeometry = ConvGeometry(),
    counter: OpCounter | None = None,
) -> Tensor4:
    """Binary-weight convolution: real inputs, add/subtract accumulation, one scale per output."""
    x, o_h, o_w = _check(inp, qlayer, geom, Mode.BW)
    packed = pack_layer(qlayer)
    k_h, k_w, _, o_c = qlayer.geometry
    batch = x.shape[3]
    plus = np.unpackbits(
        packed.rows.astype("<u8").view(np.uint8).reshape(o_c, -1), axis=1, bitorder="little"
    )[:, : packed.bit_len].astype(bool)
    xp = pad_constant(x, geom.padding)
    out = np.empty((o_h * o_w, o_c, batch))
    for b in range(batch):
        cols = im2col(xp[..., b], k_h, k_w, geom.stride)
        for j in range(o_c):
            acc = cols[:, plus[j]].sum(axis=1) - cols[:, ~plus[j]].sum(axis=1)
            out[:, j, b] = packed.filter_alphas[j] * acc
    if counter is not None:
        n_o = o_h * o_w
        counter.add(
            binary_ops=batch * n_o * o_c * packed.bit_len,
            real_macs=batch * n_o * packed.n_groups,
            scale_muls=batch * n_o * packed.n_groups,
            output_muls=batch * n_o * o_c,
        )
    return Tensor4.activation(out.reshape(o_h, o_w, o_c, batch))


def conv_xnor(
    inp: Tensor4,
    qlayer: QuantizedLayer,
    geom: ConvGeometry = ConvGeometry(),
    counter: OpCounter | None = None,
) -> Tensor4:
    """XNOR convolution: sign-quantized input and weights, XOR + popcount inner products.

    Each image's activation map is quantized once with its own l1-mean scale.
    Padded positions enter as +1 bits (sign(0) = +1) and are not masked.
    """
    x, o_h, o_w = _check(inp, qlayer, geom, Mode.XNOR)
    packed = pack_layer(qlayer)
    k_h, k_w, _, o_c = qlayer.geometry
    n_k = packed.bit_len
    batch = x.shape[3]
    out = np.empty((o_h * o_w, o_c, batch))
    mask = _tail_mask(n_k)
    for b in range(batch):
        aq = quantize_activation(x[..., b])
        signs = pad_constant(aq.signs[..., None].astype(np.float64), geom.padding, 1.0)[..., 0]
        cols = pack_rows(im2col(signs, k_h, k_w, geom.stride))
        xor = cols[:, None, :] ^ packed.rows[None, :, :]
        xor[..., -1] &= mask
        dots = n_k - 2 * np.bitwise_count(xor).sum(axis=2, dtype=np.int64)
        folded = aq.scale * packed.group_alphas
        out[:, :, b] = folded[packed.filter_groups][None, :] * dots
    if counter is not None:
        n_o = o_h * o_w
        per_bit = 2 if counter.double_xnor else 1
        counter.add(
            binary_ops=batch * per_bit * n_o * o_c * n_k,
            real_macs=batch * n_o * packed.n_groups,
            scale_muls=batch * n_o * packed.n_groups,
            fold_muls=batch * packed.n_groups,
            output_muls=batch * n_o * o_c,
        )
    return Tensor4.activation(out.reshape(o_h, o_w, o_c, batch))


def conv_quantized(inp, qlayer, geom=ConvGeometry(), counter=None) -> Tensor4:
    fn = conv_xnor if qlayer.mode is Mode.XNOR else conv_bw
    return fn(inp, qlayer, geom, counter)


def xnor_reference(inp: Tensor4, qlayer: QuantizedLayer, geom: ConvGeometry = ConvGeometry()) -> Tensor4:
    """Dense oracle for :func:`conv_xnor`: quantize both operands, then convolve densely.

    Padding uses the same +1 convention as the packed path.
    """
    x = inp.data if isinstance(inp, Tensor4) else np.asarray(inp, dtype=np.float64)
    planes = []
    for b in range(x.shape[3]):
        aq = quantize_activation(x[..., b])
        planes.append(aq.scale * aq.signs.astype(np.float64))
        planes[-1] = pad_constant(planes[-1][..., None], geom.padding, aq.scale)[..., 0]
    xq = np.stack(planes, axis=3)
    return conv2d_reference(xq, qlayer.dequantize(), ConvGeometry(geom.stride, 0))
