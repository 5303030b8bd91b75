"""Dense 4-D tensors, deterministic fixtures and the reference convolution.

Axis conventions are fixed:

* ``WEIGHT`` tensors are ``(k_h, k_w, i_c, o_c)``; the output-channel axis is
  fastest in memory, so "adjacent filters" are consecutive ``o_c`` indices.
* ``ACTIVATION`` tensors are ``(h, w, c, batch)``.

"Convolution" here is cross-correlation (no kernel flip), as in every deep
learning framework.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeError

__all__ = [
    "AxisRole",
    "Distribution",
    "Tensor4",
    "ConvGeometry",
    "conv2d_reference",
    "seeded_random_tensor",
    "pad_constant",
    "max_rel_error",
]


class AxisRole(enum.IntEnum):
    WEIGHT = 0
    ACTIVATION = 1


class Distribution(enum.Enum):
    UNIFORM = "uniform"
    NORMAL = "normal"


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Immutable float64 tensor of rank 4 with a semantic axis tag."""

    data: np.ndarray
    role: AxisRole = AxisRole.WEIGHT

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 4:
            raise ShapeError("tensor rank", 4, arr.ndim)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "role", AxisRole(self.role))

    @classmethod
    def weight(cls, data) -> "Tensor4":
        return cls(data, AxisRole.WEIGHT)

    @classmethod
    def activation(cls, data) -> "Tensor4":
        return cls(data, AxisRole.ACTIVATION)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def flat(self) -> np.ndarray:
        """Row-major flat view (d0 slowest, d3 fastest)."""
        return self.data.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, Tensor4):
            return NotImplemented
        return self.role == other.role and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Tensor4(dims={self.dims}, role={self.role.name})"


@dataclass(frozen=True)
class ConvGeometry:
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise GeometryError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise GeometryError(f"padding must be non-negative, got {self.padding}")

    def output_size(self, i_h: int, i_w: int, k_h: int, k_w: int) -> tuple[int, int]:
        return (
            self._out_len(i_h, k_h, "height"),
            self._out_len(i_w, k_w, "width"),
        )

    def _out_len(self, size: int, k: int, axis: str) -> int:
        span = size + 2 * self.padding - k
        if span < 0:
            raise GeometryError(
                f"kernel {axis} {k} exceeds padded input {axis} {size + 2 * self.padding}"
            )
        if span % self.stride:
            raise GeometryError(
                f"output {axis} ({size} + 2*{self.padding} - {k})/{self.stride} + 1 "
                "is not an integer"
            )
        return span // self.stride + 1


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor4) else np.asarray(t, dtype=np.float64)


def pad_constant(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    """Pad the two spatial axes of an ``(h, w, c, batch)`` array."""
    if padding == 0:
        return x
    return np.pad(
        x,
        ((padding, padding), (padding, padding), (0, 0), (0, 0)),
        mode="constant",
        constant_values=value,
    )


def conv2d_reference(inp, weight, geom: ConvGeometry = ConvGeometry()) -> Tensor4:
    """Dense cross-correlation of ``(h, w, c, batch)`` with ``(k_h, k_w, i_c, o_c)``.

    Returns an ``(o_h, o_w, o_c, batch)`` activation tensor. Each output is
    accumulated kernel-position by kernel-position in a fixed order, so the
    result does not depend on any threading.
    """
    x = _as_array(inp)
    w = _as_array(weight)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("tensor rank", 4, (x.ndim, w.ndim))
    i_h, i_w, i_c, batch = x.shape
    k_h, k_w, w_ic, o_c = w.shape
    if i_c != w_ic:
        raise ShapeError("input channels (input c vs weight i_c)", w_ic, i_c)
    o_h, o_w = geom.output_size(i_h, i_w, k_h, k_w)
    s = geom.stride
    xp = pad_constant(x, geom.padding)
    out = np.zeros((o_h, o_w, o_c, batch), dtype=np.float64)
    for dy in range(k_h):
        for dx in range(k_w):
            patch = xp[dy : dy + s * (o_h - 1) + 1 : s, dx : dx + s * (o_w - 1) + 1 : s]
            out += np.einsum("hwcb,co->hwob", patch, w[dy, dx])
    return Tensor4.activation(out)


# Philox4x64-10 keyed directly by the seed, counter starting at zero. Uniforms
# use the top 53 bits of each raw 64-bit word, so the stream is bit-exact on
# every platform; normals go through Box-Muller on those uniforms.
def _raw_words(seed: int, count: int) -> np.ndarray:
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    gen = np.random.Philox(key=seed)
    return gen.random_raw(count).astype(np.uint64)


def _unit_interval(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to [0, 1) with 53-bit resolution."""
    return (words >> np.uint64(11)).astype(np.float64) * 2.0**-53


def seeded_random_tensor(
    dims,
    seed: int,
    distribution: Distribution | str = Distribution.UNIFORM,
    sigma: float = 1.0,
    role: AxisRole = AxisRole.WEIGHT,
) -> Tensor4:
    """Deterministic random tensor; UNIFORM draws from [-1, 1), NORMAL from N(0, sigma^2)."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ShapeError("tensor rank", 4, len(dims))
    if any(d <= 0 for d in dims):
        raise ValueError(f"all dims must be positive, got {dims}")
    distribution = Distribution(distribution)
    n = int(np.prod(dims))
    if distribution is Distribution.UNIFORM:
        values = 2.0 * _unit_interval(_raw_words(seed, n)) - 1.0
    else:
        m = (n + 1) // 2
        words = _raw_words(seed, 2 * m)
        u1 = 1.0 - _unit_interval(words[0::2])  # (0, 1]
        u2 = _unit_interval(words[1::2])
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        values = sigma * z[:n]
    return Tensor4(values.reshape(dims), role)


def max_rel_error(actual, expected) -> float:
    """max |actual - expected| divided by max |expected| (norm-wise relative error)."""
    a = _as_array(actual)
    b = _as_array(expected)
    if a.shape != b.shape:
        raise ShapeError("compared shapes", b.shape, a.shape)
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    if scale == 0.0:
        return diff
    return diff / scale
