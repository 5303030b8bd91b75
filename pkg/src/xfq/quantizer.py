"""Cross-filter binary quantization.

A weight tensor ``(k_h, k_w, i_c, o_c)`` is cut into runs of ``beta``
consecutive output filters. Every run shares one scale ``alpha`` and keeps a
sign plane ``B``; the least-squares optimum is ``B = sign(W)`` and ``alpha``
equal to the mean absolute value of the run.

Inside a group, signs are stored filter-major: each member filter contributes
one row of ``k_h * k_w * i_c`` signs ordered ``(i_c, k_h, k_w)`` with ``k_w``
fastest. The bit-packed kernels and the XFQM file use the same order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import QuantizationError, ShapeError
from .tensor import AxisRole, Tensor4

__all__ = [
    "Mode",
    "QuantGroup",
    "QuantizedLayer",
    "ActivationQuant",
    "ScaleStats",
    "sign_pm1",
    "filter_rows",
    "rows_to_weight",
    "quantize_group",
    "quantize_layer",
    "quantize_activation",
    "merge_groups",
    "scale_stats",
    "group_errors",
    "relative_error",
]


class Mode(enum.Enum):
    FP = "fp"
    BW = "bw"
    XNOR = "xnor"


def sign_pm1(x) -> np.ndarray:
    """Elementwise sign as int8 with sign(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def filter_rows(weight) -> np.ndarray:
    """``(k_h, k_w, i_c, o_c)`` -> ``(o_c, i_c*k_h*k_w)``, one row per filter."""
    w = weight.data if isinstance(weight, Tensor4) else np.asarray(weight, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError("weight rank", 4, w.ndim)
    o_c = w.shape[3]
    return np.ascontiguousarray(w.transpose(3, 2, 0, 1)).reshape(o_c, -1)


def rows_to_weight(rows: np.ndarray, geometry) -> np.ndarray:
    """Inverse of :func:`filter_rows`."""
    k_h, k_w, i_c, o_c = geometry
    return np.ascontiguousarray(rows.reshape(o_c, i_c, k_h, k_w).transpose(2, 3, 1, 0))


@dataclass(frozen=True, eq=False)
class QuantGroup:
    """One cross-filter group: ``beta_g`` filters sharing ``alpha``.

    ``signs`` has shape ``(beta_g, n_k)``; row ``r`` belongs to filter
    ``filter_range[0] + r``.
    """

    signs: np.ndarray
    alpha: float
    filter_range: tuple[int, int]

    def __post_init__(self):
        signs = np.array(self.signs, dtype=np.int8)
        if signs.ndim != 2:
            raise ShapeError("group sign rank", 2, signs.ndim)
        if not np.all((signs == 1) | (signs == -1)):
            raise QuantizationError("signs must be +1 or -1")
        start, end = (int(v) for v in self.filter_range)
        if end - start != signs.shape[0] or end <= start:
            raise QuantizationError(
                f"filter_range {start}..{end} does not match {signs.shape[0]} sign rows"
            )
        alpha = float(self.alpha)
        if not math.isfinite(alpha) or alpha < 0:
            raise QuantizationError(f"alpha must be finite and >= 0, got {alpha!r}")
        signs.setflags(write=False)
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "filter_range", (start, end))

    @property
    def beta_g(self) -> int:
        return self.filter_range[1] - self.filter_range[0]

    @property
    def n(self) -> int:
        return int(self.signs.size)

    def __eq__(self, other):
        if not isinstance(other, QuantGroup):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and self.filter_range == other.filter_range
            and np.array_equal(self.signs, other.signs)
        )


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    groups: tuple[QuantGroup, ...]
    geometry: tuple[int, int, int, int]
    beta: int
    mode: Mode = Mode.BW

    def __post_init__(self):
        groups = tuple(self.groups)
        geometry = tuple(int(g) for g in self.geometry)
        mode = Mode(self.mode)
        if mode is Mode.FP:
            raise QuantizationError("a quantized layer must be BW or XNOR")
        if self.beta < 1:
            raise QuantizationError(f"beta must be >= 1, got {self.beta}")
        k_h, k_w, i_c, o_c = geometry
        n_k = k_h * k_w * i_c
        if len(groups) != -(-o_c // self.beta):
            raise QuantizationError(
                f"{len(groups)} groups for o_c={o_c}, beta={self.beta}"
            )
        pos = 0
        for g in groups:
            if g.filter_range[0] != pos:
                raise QuantizationError(f"group ranges not contiguous at filter {pos}")
            if g.beta_g > self.beta:
                raise QuantizationError(f"group of {g.beta_g} filters exceeds beta={self.beta}")
            if g.signs.shape[1] != n_k:
                raise ShapeError("group row length", n_k, g.signs.shape[1])
            pos = g.filter_range[1]
        if pos != o_c:
            raise QuantizationError(f"groups cover {pos} filters, layer has {o_c}")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "geometry", geometry)
        object.__setattr__(self, "beta", int(self.beta))
        object.__setattr__(self, "mode", mode)

    @property
    def n_k(self) -> int:
        k_h, k_w, i_c, _ = self.geometry
        return k_h * k_w * i_c

    @property
    def alphas(self) -> np.ndarray:
        return np.array([g.alpha for g in self.groups], dtype=np.float64)

    def filter_alphas(self) -> np.ndarray:
        """Scale applied to each output filter, length ``o_c``."""
        return np.repeat(self.alphas, [g.beta_g for g in self.groups])

    def filter_groups(self) -> np.ndarray:
        """Group index of each output filter."""
        return np.repeat(np.arange(len(self.groups)), [g.beta_g for g in self.groups])

    def sign_rows(self) -> np.ndarray:
        return np.concatenate([g.signs for g in self.groups], axis=0)

    def dequantize(self) -> Tensor4:
        rows = self.sign_rows() * self.filter_alphas()[:, None]
        return Tensor4(rows_to_weight(rows, self.geometry), AxisRole.WEIGHT)

    def __eq__(self, other):
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.beta == other.beta
            and self.mode == other.mode
            and self.groups == other.groups
        )


@dataclass(frozen=True, eq=False)
class ActivationQuant:
    signs: np.ndarray
    scale: float


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise QuantizationError(f"{what} contains non-finite values")


def quantize_group(w_slice) -> tuple[np.ndarray, float]:
    """Optimal ``(signs, alpha)`` minimizing ``||w - alpha * signs||^2``."""
    w = np.asarray(w_slice, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise QuantizationError("cannot quantize an empty slice")
    _check_finite(w, "weight slice")
    return sign_pm1(w), math.fsum(np.abs(w)) / w.size


def _filter_scales(rows: np.ndarray) -> list[float]:
    n_k = rows.shape[1]
    return [math.fsum(r) / n_k for r in np.abs(rows)]


def quantize_layer(weight, beta: int, mode: Mode | str = Mode.BW) -> QuantizedLayer:
    """Quantize every run of ``beta`` adjacent filters with a shared scale.

    The last group is ragged when ``beta`` does not divide ``o_c``. A group's
    scale is computed as the mean of its members' per-filter l1 means, which
    is the group's own l1 mean (all filters have the same size) and lets a
    filter-wise model be merged into exactly the same bits.
    """
    if beta < 1:
        raise QuantizationError(f"beta must be >= 1, got {beta}")
    rows = filter_rows(weight)
    _check_finite(rows, "weight")
    if rows.shape[1] == 0:
        raise QuantizationError("weight has an empty receptive field")
    geometry = tuple(int(d) for d in (weight.dims if isinstance(weight, Tensor4) else np.shape(weight)))
    o_c = geometry[3]
    scales = _filter_scales(rows)
    signs = sign_pm1(rows)
    groups = []
    for start in range(0, o_c, beta):
        end = min(start + beta, o_c)
        alpha = math.fsum(scales[start:end]) / (end - start)
        groups.append(QuantGroup(signs[start:end], alpha, (start, end)))
    return QuantizedLayer(tuple(groups), geometry, beta, Mode(mode))


def quantize_activation(x) -> ActivationQuant:
    """Sign plane plus one l1-mean scale for the whole tensor."""
    a = x.data if isinstance(x, Tensor4) else np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise QuantizationError("cannot quantize an empty activation")
    _check_finite(a, "activation")
    return ActivationQuant(sign_pm1(a), math.fsum(np.abs(a).reshape(-1)) / a.size)


def merge_groups(filterwise: QuantizedLayer, new_beta: int) -> QuantizedLayer:
    """Build the ``new_beta`` quantization from a filter-wise (beta=1) one.

    Signs are concatenated unchanged and the shared scale is the plain mean of
    the member scales; no full-precision weights are needed.
    """
    if filterwise.beta != 1:
        raise QuantizationError(
            f"merge_groups needs a filter-wise layer (beta=1), got beta={filterwise.beta}"
        )
    if new_beta < 1:
        raise QuantizationError(f"beta must be >= 1, got {new_beta}")
    scales = [g.alpha for g in filterwise.groups]
    o_c = filterwise.geometry[3]
    groups = []
    for start in range(0, o_c, new_beta):
        end = min(start + new_beta, o_c)
        members = filterwise.groups[start:end]
        signs = np.concatenate([g.signs for g in members], axis=0)
        alpha = math.fsum(scales[start:end]) / (end - start)
        groups.append(QuantGroup(signs, alpha, (start, end)))
    return QuantizedLayer(tuple(groups), filterwise.geometry, new_beta, filterwise.mode)


@dataclass(frozen=True)
class ScaleStats:
    max: float
    min: float
    mean: float
    variance: float
    histogram: np.ndarray = field(repr=False)
    bin_edges: np.ndarray = field(repr=False)


def scale_stats(layer: QuantizedLayer, bins: int = 10) -> ScaleStats:
    """Summary of the group scales; variance is the population variance."""
    alphas = layer.alphas
    if alphas.size == 0:
        raise QuantizationError("layer has no groups")
    lo, hi = float(alphas.min()), float(alphas.max())
    counts, edges = np.histogram(alphas, bins=bins, range=(lo, hi))
    return ScaleStats(
        max=hi,
        min=lo,
        mean=float(alphas.mean()),
        variance=float(alphas.var()),
        histogram=counts,
        bin_edges=edges,
    )


def group_errors(weight, layer: QuantizedLayer) -> np.ndarray:
    """Per-group squared reconstruction error ``||W_g - alpha_g B_g||^2``."""
    rows = filter_rows(weight)
    recon = filter_rows(layer.dequantize())
    sq = ((rows - recon) ** 2).sum(axis=1)
    return np.array(
        [sq[g.filter_range[0] : g.filter_range[1]].sum() for g in layer.groups]
    )


def relative_error(weight, layer: QuantizedLayer) -> float:
    """``||W - W_hat||^2 / ||W||^2`` (0 for an all-zero weight)."""
    w = weight.data if isinstance(weight, Tensor4) else np.asarray(weight)
    denom = float((w**2).sum())
    num = float(group_errors(weight, layer).sum())
    return num / denom if denom else 0.0
