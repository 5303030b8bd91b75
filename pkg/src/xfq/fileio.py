"""XFQT (tensor) and XFQM (quantized model) binary formats.

All integers and floats are little-endian.

XFQT::

    "XFQT" | version u16 | d0 d1 d2 d3 u32 | role u8 | d0*d1*d2*d3 x f64

XFQM::

    "XFQM" | version u16 | layer count u16
    per layer:  k_h k_w i_c o_c u32 | mode u8 | beta u16 | group count u32
    per group:  beta_g u16 | alpha f64 | ceil(beta_g*n_k/64) x u64 sign words

Group signs are packed LSB-first, +1 -> 1, filter-major with each filter in
``(i_c, k_h, k_w)`` order, zero pad bits.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .bitkernel import pack_rows
from .errors import FormatError, QuantizationError, XfqError
from .quantizer import Mode, QuantGroup, QuantizedLayer
from .tensor import AxisRole, Tensor4

__all__ = [
    "TENSOR_MAGIC",
    "MODEL_MAGIC",
    "VERSION",
    "encode_tensor",
    "decode_tensor",
    "encode_model",
    "decode_model",
    "write_tensor",
    "read_tensor",
    "write_model",
    "read_model",
    "sniff",
]

TENSOR_MAGIC = b"XFQT"
MODEL_MAGIC = b"XFQM"
VERSION = 1

_MODE_CODES = {Mode.BW: 0, Mode.XNOR: 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"truncated while reading {what} ({size} bytes needed, "
                f"{len(self.buf) - self.pos} left)",
                self.pos,
            )
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"truncated while reading {what} ({size} bytes needed, "
                f"{len(self.buf) - self.pos} left)",
                self.pos,
            )
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr

    def header(self, magic: bytes):
        (got,) = self.take("<4s", "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        (version,) = self.take("<H", "version")
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}", 4)

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def encode_tensor(t: Tensor4) -> bytes:
    head = struct.pack("<4sH4IB", TENSOR_MAGIC, VERSION, *t.dims, int(t.role))
    return head + t.data.astype("<f8").tobytes()


def decode_tensor(buf: bytes) -> Tensor4:
    r = _Reader(buf)
    r.header(TENSOR_MAGIC)
    dims = r.take("<4I", "dims")
    role_at = r.pos
    (role,) = r.take("<B", "axis role")
    if role not in (0, 1):
        raise FormatError(f"unknown axis role {role}", role_at)
    data_at = r.pos
    values = r.array("<f8", int(np.prod(dims)), "tensor data")
    r.finish()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite tensor value", data_at + 8 * int(bad[0]))
    return Tensor4(values.astype(np.float64).reshape(dims), AxisRole(role))


def encode_model(layers) -> bytes:
    layers = list(layers)
    out = [struct.pack("<4sHH", MODEL_MAGIC, VERSION, len(layers))]
    for layer in layers:
        out.append(
            struct.pack(
                "<4IBHI", *layer.geometry, _MODE_CODES[layer.mode], layer.beta, len(layer.groups)
            )
        )
        for g in layer.groups:
            out.append(struct.pack("<Hd", g.beta_g, g.alpha))
            words = pack_rows(g.signs.reshape(1, -1))[0]
            out.append(words.astype("<u8").tobytes())
    return b"".join(out)


def decode_model(buf: bytes) -> list[QuantizedLayer]:
    r = _Reader(buf)
    r.header(MODEL_MAGIC)
    (n_layers,) = r.take("<H", "layer count")
    layers = []
    for li in range(n_layers):
        layer_at = r.pos
        *geometry, mode_code, beta, n_groups = r.take("<4IBHI", f"layer {li} header")
        if mode_code not in _CODE_MODES:
            raise FormatError(f"layer {li}: unknown mode byte {mode_code}", layer_at + 16)
        k_h, k_w, i_c, o_c = geometry
        n_k = k_h * k_w * i_c
        groups = []
        start = 0
        for gi in range(n_groups):
            group_at = r.pos
            beta_g, alpha = r.take("<Hd", f"layer {li} group {gi} header")
            if beta_g == 0 or start + beta_g > o_c:
                raise FormatError(f"layer {li} group {gi}: bad group size {beta_g}", group_at)
            bits = beta_g * n_k
            words = r.array("<u8", -(-bits // 64), f"layer {li} group {gi} signs")
            flat = np.unpackbits(words.view(np.uint8), bitorder="little")
            if flat[bits:].any():
                raise FormatError(f"layer {li} group {gi}: non-zero pad bits", group_at + 10)
            signs = np.where(flat[:bits] == 1, 1, -1).astype(np.int8).reshape(beta_g, n_k)
            try:
                groups.append(QuantGroup(signs, alpha, (start, start + beta_g)))
            except QuantizationError as e:
                raise FormatError(f"layer {li} group {gi}: {e}", group_at + 2) from None
            start += beta_g
        try:
            layers.append(QuantizedLayer(tuple(groups), tuple(geometry), beta, _CODE_MODES[mode_code]))
        except XfqError as e:
            raise FormatError(f"layer {li}: {e}", layer_at) from None
    r.finish()
    return layers


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read file: {e.strerror}", None, path) from None


def _with_path(fn, buf, path):
    try:
        return fn(buf)
    except FormatError as e:
        if e.path is None:
            raise FormatError(e.message, e.offset, path) from None
        raise


def write_tensor(path, t: Tensor4):
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> Tensor4:
    return _with_path(decode_tensor, _read_bytes(path), path)


def write_model(path, layers):
    Path(path).write_bytes(encode_model(layers))


def read_model(path) -> list[QuantizedLayer]:
    return _with_path(decode_model, _read_bytes(path), path)


def sniff(path) -> bytes:
    """Return the 4-byte magic of a file."""
    with open(path, "rb") as f:
        return f.read(4)
