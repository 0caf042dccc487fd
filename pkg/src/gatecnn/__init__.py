"""Gate-level compiler and evaluator for shift-accumulate quantized CNNs.

The package turns a quantized convolutional network into a Boolean circuit
built only from two-input gates (plus MUX), evaluates it on a clear-bit
backend that accounts costs as if each gate were homomorphic, and checks the
result bit-for-bit against a pure integer oracle.
"""

from .fixedpoint import FixedFormat, PlainWord, encode_fixed, decode_fixed, sign_extend
from .backend import (
    ClearBackend,
    CounterReport,
    DepthBudget,
    GateCostModel,
    WireBit,
)
from .quantize import QuantConfig, QuantizedTensor, log_quantize, dequantize, quantize_activations
from .model import ModelSpec, parse_model, fold_batchnorm, ModelError
from .compile import DepthCostTable, EvaluationPlan, compile_model, estimate_layer_depth, check_budget, message_size
from .runtime import InferenceResult, evaluate, reference_eval, emit_report

__all__ = [
    "FixedFormat", "PlainWord", "encode_fixed", "decode_fixed", "sign_extend",
    "ClearBackend", "CounterReport", "DepthBudget", "GateCostModel", "WireBit",
    "QuantConfig", "QuantizedTensor", "log_quantize", "dequantize", "quantize_activations",
    "ModelSpec", "parse_model", "fold_batchnorm", "ModelError",
    "DepthCostTable", "EvaluationPlan", "compile_model", "estimate_layer_depth",
    "check_budget", "message_size",
    "InferenceResult", "evaluate", "reference_eval", "emit_report",
]
