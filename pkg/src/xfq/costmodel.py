"""Analytic operation, memory and speedup model for (cross-filter) binary layers.

Cycle model: one ``L``-bit binary operation per cycle, one full-precision MAC
costs ``mac_ratio`` cycles. Data movement and memory access are ignored.

Counting conventions (per image):

* ``flops = N_k * N_o * o_c``: the dense multiply-accumulate count of the
  layer, reported for every mode as the full-precision baseline.
* FP: ``real_macs = flops``.
* BW / XNOR: ``binary_ops = N_k * N_o * o_c`` (doubled for XNOR when
  ``double_xnor`` is set: one XOR plus one bitcount per bit),
  ``real_macs = scale_muls = N_o * ceil(o_c / beta)``.
* Parameters: 4 bytes per float, 1 bit per binary weight, no alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .quantizer import Mode

__all__ = [
    "LayerSpec",
    "HardwareModel",
    "CostReport",
    "Comparison",
    "layer_cost",
    "speedup",
    "speedup_nk",
    "dilemma_boundary",
    "compare_architectures",
    "canonical_pair",
    "memory_ratio",
    "speedup_sweep",
    "BW_SPEEDUP",
]

FLOAT_BYTES = 4
# Add-only binary-weight layers are credited the customary ~2x.
BW_SPEEDUP = 2.0


@dataclass(frozen=True)
class LayerSpec:
    k_h: int
    k_w: int
    i_c: int
    o_c: int
    n_o: int
    beta: int = 1
    mode: Mode = Mode.XNOR

    def __post_init__(self):
        for name in ("k_h", "k_w", "i_c", "o_c", "n_o", "beta"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def n_k(self) -> int:
        return self.k_h * self.k_w * self.i_c

    @property
    def n_groups(self) -> int:
        return -(-self.o_c // self.beta)

    @property
    def n_weights(self) -> int:
        return self.n_k * self.o_c


@dataclass(frozen=True)
class HardwareModel:
    L: int = 64
    mac_ratio: float = 1.91

    def __post_init__(self):
        if not 1 <= self.L <= 4096:
            raise ValueError(f"L must be in 1..4096, got {self.L}")
        if not self.mac_ratio > 0:
            raise ValueError(f"mac_ratio must be positive, got {self.mac_ratio}")


@dataclass(frozen=True)
class CostReport:
    flops: int
    binary_ops: int
    real_macs: int
    scale_muls: int
    param_bytes_fp: int
    binary_param_bytes: int
    float_param_bytes: int
    speedup: float

    @property
    def param_bytes_quant(self) -> int:
        return self.binary_param_bytes + self.float_param_bytes

    @property
    def memory_ratio(self) -> float:
        return self.param_bytes_fp / self.param_bytes_quant


def speedup_nk(n_k: float, beta: float, hw: HardwareModel) -> float:
    """``1 / (1/(beta*N_k) + 1/(mac_ratio*L))``."""
    return 1.0 / (1.0 / (beta * n_k) + 1.0 / (hw.mac_ratio * hw.L))


def speedup(spec: LayerSpec, hw: HardwareModel = HardwareModel()) -> float:
    return speedup_nk(spec.n_k, spec.beta, hw)


def layer_cost(
    spec: LayerSpec, hw: HardwareModel = HardwareModel(), double_xnor: bool = True
) -> CostReport:
    fp_bytes = FLOAT_BYTES * spec.n_weights
    if spec.mode is Mode.FP:
        return CostReport(
            flops=spec.n_k * spec.n_o * spec.o_c,
            binary_ops=0,
            real_macs=spec.n_k * spec.n_o * spec.o_c,
            scale_muls=0,
            param_bytes_fp=fp_bytes,
            binary_param_bytes=0,
            float_param_bytes=fp_bytes,
            speedup=1.0,
        )
    binary_ops = spec.n_k * spec.n_o * spec.o_c
    if spec.mode is Mode.XNOR and double_xnor:
        binary_ops *= 2
    macs = spec.n_o * spec.n_groups
    return CostReport(
        flops=spec.n_k * spec.n_o * spec.o_c,
        binary_ops=binary_ops,
        real_macs=macs,
        scale_muls=macs,
        param_bytes_fp=fp_bytes,
        binary_param_bytes=-(-spec.n_weights // 8),
        float_param_bytes=FLOAT_BYTES * spec.n_groups,
        speedup=speedup(spec, hw) if spec.mode is Mode.XNOR else BW_SPEEDUP,
    )


def memory_ratio(spec: LayerSpec) -> float:
    return layer_cost(spec).memory_ratio


def dilemma_boundary(hw: HardwareModel = HardwareModel(), beta: int = 1) -> float:
    """Input-channel count where one quantized 5x5 layer and two 3x3 layers cost the same.

    Below the boundary the single 5x5 layer is cheaper (its smaller MAC count
    dominates); above it the two 3x3 layers win on binary operations.
    """
    if beta < 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    return hw.mac_ratio * hw.L / (7 * beta)


def _cycles(specs, hw: HardwareModel) -> float:
    total = 0.0
    for s in specs:
        c = layer_cost(s, hw, double_xnor=False)
        if s.mode is Mode.FP:
            total += hw.mac_ratio * c.flops
        else:
            total += c.binary_ops / hw.L + hw.mac_ratio * c.real_macs
    return total


def canonical_pair(i_c: int, n_o: int = 1, beta: int = 1, mode: Mode = Mode.XNOR):
    """One 5x5 ``i_c -> i_c`` layer and its two-layer 3x3 replacement."""
    big = [LayerSpec(5, 5, i_c, i_c, n_o, beta, mode)]
    small = [LayerSpec(3, 3, i_c, i_c, n_o, beta, mode)] * 2
    return big, small


def _is_canonical(a, b) -> bool:
    if len(a) != 1 or len(b) != 2:
        return False
    big, s1, s2 = a[0], b[0], b[1]
    i_c = big.i_c
    same = {(l.i_c, l.o_c, l.n_o, l.beta, l.mode) for l in (big, s1, s2)}
    return (
        (big.k_h, big.k_w) == (5, 5)
        and (s1.k_h, s1.k_w, s2.k_h, s2.k_w) == (3, 3, 3, 3)
        and big.o_c == i_c
        and len(same) == 1
        and big.mode is not Mode.FP
    )


@dataclass(frozen=True)
class Comparison:
    cycles_a: float
    cycles_b: float
    verdict: str  # "A", "B" or "TIE": the cheaper stack
    crossover_i_c: float | None = None


def compare_architectures(a, b, hw: HardwareModel = HardwareModel()) -> Comparison:
    """Modeled cycles of two layer stacks: ``sum(binary_ops/L + mac_ratio*real_macs)``.

    Binary operations are counted once per bit here, as in the cycle model.
    For the canonical 5x5 vs 2x(3x3) pair the crossover channel count is
    reported as well.
    """
    if not a or not b:
        raise ValueError("both layer stacks must be non-empty")
    ca, cb = _cycles(a, hw), _cycles(b, hw)
    verdict = "TIE" if ca == cb else ("A" if ca < cb else "B")
    crossover = dilemma_boundary(hw, a[0].beta) if _is_canonical(a, b) else None
    return Comparison(ca, cb, verdict, crossover)


def speedup_sweep(n_ks, betas, hw: HardwareModel = HardwareModel()) -> list[list[float]]:
    """Grid of speedups, one row per beta and one column per ``N_k``."""
    return [[speedup_nk(nk, beta, hw) for nk in n_ks] for beta in betas]
