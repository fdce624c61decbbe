"""8-bit fixed-point weight quantization with power-of-two group scaling."""

from .accounting import original_model_size, proposed_model_size, quant_error_stats, size_report
from .grouping import group_count, partition
from .kernels import BACKEND
from .quantizer import (
    dequantize_model,
    lloyd_codebook,
    precision_sweep,
    quantize_lq,
    quantize_model,
    quantize_nlq,
    scale_exponent,
)
from .store import (
    FixedPointFormat,
    FloatModel,
    Grouping,
    ModelManifest,
    QuantizedModel,
    Scheme,
    WeightTensor,
    read_float_file,
    read_quantized_file,
    write_float_file,
    write_quantized_file,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FixedPointFormat",
    "FloatModel",
    "Grouping",
    "ModelManifest",
    "QuantizedModel",
    "Scheme",
    "WeightTensor",
    "dequantize_model",
    "group_count",
    "lloyd_codebook",
    "original_model_size",
    "partition",
    "precision_sweep",
    "proposed_model_size",
    "quant_error_stats",
    "quantize_lq",
    "quantize_model",
    "quantize_nlq",
    "read_float_file",
    "read_quantized_file",
    "scale_exponent",
    "size_report",
    "write_float_file",
    "write_quantized_file",
]
