"""Ultra-low-bit (1-3 bit) quantization and bitserial CPU inference."""

from .bitpack import BitplaneTensor, pack_bitplanes, unpack_bitplanes
from .bitserial import (
    TilePlan,
    conv2d_bitserial,
    dense_bitserial,
    dot_1bit,
    dot_corrected,
    dot_multibit,
    gemm_bitserial,
    im2col,
    make_tile_plan,
)
from .container import load_model, read_model, save_model, write_model
from .errors import ConfigError, DataError, LowbitError, ShapeError, ValidationError
from .graph import FP32, GraphSpec, Layer, Precision, validate_graph
from .netdesc import load_net, parse_net
from .planner import PrecisionPlan, plan_mixed_precision, quantize_graph
from .quant import QuantParams, dequantize, fake_quantize, fit_scale, quant_error, quantize
from .ref_ops import ConvParams, conv2d_f32, dense_f32, maxpool2d, relu
from .runtime import ExecutionPlan, benchmark, compile, run
from .simulate import simulate
from .tensor import IntTensor, Layout, Tensor, tensor_allclose, tensor_create

__version__ = "0.1.0"
