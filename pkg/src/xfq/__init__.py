"""Cross-filter binary quantization: quantizer, bit-packed kernels, cost model and toy trainer."""

from .costmodel import (
    HardwareModel,
    LayerSpec,
    compare_architectures,
    dilemma_boundary,
    layer_cost,
    memory_ratio,
    speedup,
)
from .quantizer import (
    Mode,
    QuantGroup,
    QuantizedLayer,
    merge_groups,
    quantize_activation,
    quantize_group,
    quantize_layer,
    scale_stats,
)
from .tensor import AxisRole, ConvGeometry, Tensor4, conv2d_reference, seeded_random_tensor

__version__ = "0.1.0"
