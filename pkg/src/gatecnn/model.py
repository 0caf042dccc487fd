"""Layered network description: JSON schema, validation, batch-norm folding,
and weight quantization.

Layer kinds map to topology letters the way cost ledgers are usually
written: Conv=C, BatchNorm=B, ReLU=A, MaxPool=P, FC=F.
"""

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FixedFormat, round_half_even
from .quantize import QuantConfig, QuantizedTensor, log_quantize, dequantize

ACCUM_CAP_BITS = 16

# Layer kinds the schema reserves for architectures this compiler does not
# lower (residual nets, recurrent cells, mean pooling).
RESERVED_KINDS = ("AvgPool", "Residual", "LSTM", "Flatten")


class ModelError(ValueError):
    """Raised with a diagnostic naming the first violated model constraint."""


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: str = "valid"
    weights: np.ndarray = None          # float, shape (out_c, in_c, k, k)
    qweights: QuantizedTensor = None    # same shape
    bias: np.ndarray = None             # float, per output channel
    out_scale_exp: int = 0
    kind = "Conv"
    letter = "C"


@dataclass
class FCSpec:
    in_features: int
    out_features: int
    weights: np.ndarray = None          # float, shape (out_f, in_f)
    qweights: QuantizedTensor = None
    bias: np.ndarray = None
    out_scale_exp: int = 0
    kind = "FC"
    letter = "F"


@dataclass
class BatchNormSpec:
    scale: np.ndarray                   # gamma', inference-folded
    offset: np.ndarray                  # beta'
    folded: bool = False
    scale_exp: np.ndarray = None        # per-channel power-of-2 exponent
    scale_sign: np.ndarray = None
    scale_zero: np.ndarray = None
    offset_raw: np.ndarray = None       # constant add, raw accumulator units
    kind = "BatchNorm"
    letter = "B"


@dataclass
class ReluSpec:
    kind = "ReLU"
    letter = "A"


@dataclass
class MaxPoolSpec:
    kernel: int
    stride: int
    kind = "MaxPool"
    letter = "P"


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple                  # (H, W, C)
    quant: QuantConfig
    layers: list

    @property
    def topology(self) -> str:
        return "-".join(l.letter for l in self.layers)

    def is_quantized(self) -> bool:
        return all(
            l.qweights is not None for l in self.layers if l.kind in ("Conv", "FC")
        )


# -- shape inference -------------------------------------------------------


def _conv_out_hw(h, w, k, stride, padding):
    if padding == "valid":
        oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    elif padding == "same":
        if stride != 1:
            raise ModelError("padding 'same' is only supported with stride 1")
        if k % 2 == 0:
            raise ModelError("padding 'same' requires an odd kernel")
        oh, ow = h, w
    else:
        raise ModelError(f"unknown padding {padding!r}")
    if oh < 1 or ow < 1:
        raise ModelError(f"kernel {k} stride {stride} does not fit input {h}x{w}")
    return oh, ow


def infer_shapes(m: ModelSpec):
    """Output (H, W, C) after each layer; raises ModelError on mismatch."""
    h, w, c = m.input_shape
    shapes = []
    for i, layer in enumerate(m.layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind == "Conv":
            if layer.in_channels != c:
                raise ModelError(f"{where}: in_channels {layer.in_channels} != incoming {c}")
            h, w = _conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
            c = layer.out_channels
        elif layer.kind == "MaxPool":
            if layer.kernel < 1:
                raise ModelError(f"{where}: kernel must be >= 1")
            h, w = (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise ModelError(f"{where}: pooling window does not fit")
        elif layer.kind == "FC":
            flat = h * w * c
            if layer.in_features != flat:
                raise ModelError(f"{where}: in_features {layer.in_features} != incoming {flat}")
            h, w, c = 1, 1, layer.out_features
        elif layer.kind == "BatchNorm":
            if len(layer.scale) != c:
                raise ModelError(f"{where}: {len(layer.scale)} channels != incoming {c}")
        elif layer.kind == "ReLU":
            pass
        else:
            raise ModelError(f"{where}: unsupported kind")
        shapes.append((h, w, c))
    return shapes


# -- parsing ---------------------------------------------------------------


def _decode_weights(entry, shape, where):
    if "qweights" in entry:
        qw = entry["qweights"]
        sign = np.asarray(qw["sign"], dtype=np.int8).reshape(shape)
        exp = np.asarray(qw["exp"], dtype=np.int32).reshape(shape)
        zero = np.asarray(qw["zero"], dtype=bool).reshape(shape)
        if not np.all(np.abs(sign[~zero]) == 1):
            raise ModelError(f"{where}: qweights sign must be +/-1")
        return None, QuantizedTensor(sign=sign, exponent=exp, zero=zero)
    if "weights" in entry:
        buf = base64.b64decode(entry["weights"])
        flat = np.frombuffer(buf, dtype="<f4").astype(np.float64)
        if flat.size != int(np.prod(shape)):
            raise ModelError(f"{where}: weight blob has {flat.size} values, expected {np.prod(shape)}")
        return flat.reshape(shape), None
    raise ModelError(f"{where}: missing 'weights' or 'qweights'")


def parse_model(data) -> ModelSpec:
    """Parse and validate a model file (bytes, str, or already-loaded dict)."""
    if isinstance(data, (bytes, str)):
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as e:
            raise ModelError(f"not valid JSON: {e}") from None
    else:
        doc = data
    for key in ("name", "input_shape", "quant", "layers"):
        if key not in doc:
            raise ModelError(f"missing top-level key {key!r}")
    ishape = tuple(int(v) for v in doc["input_shape"])
    if len(ishape) != 3 or any(v < 1 for v in ishape):
        raise ModelError(f"input_shape must be [H, W, C] of positive ints, got {ishape}")
    q = doc["quant"]
    try:
        act_total = int(q.get("act_total_bits", 5))
        act_frac = int(q.get("act_frac_bits", 4))
        if act_frac >= act_total:
            raise ValueError("act_frac_bits must be below act_total_bits")
        quant = QuantConfig(
            bitwidth=int(q.get("bitwidth", 5)),
            e_max=int(q.get("e_max", 0)),
            e_min=int(q["e_min"]) if "e_min" in q else None,
            activation_format=FixedFormat(act_total, act_frac),
        )
    except ValueError as e:
        raise ModelError(f"quant config: {e}") from None

    layers = []
    for i, entry in enumerate(doc["layers"]):
        kind = entry.get("kind")
        where = f"layer {i} ({kind})"
        if kind == "Conv":
            k = int(entry["kernel"])
            if k < 1:
                raise ModelError(f"{where}: kernel must be >= 1, got {k}")
            spec = ConvSpec(
                in_channels=int(entry["in_channels"]),
                out_channels=int(entry["out_channels"]),
                kernel=k,
                stride=int(entry.get("stride", 1)),
                padding=entry.get("padding", "valid"),
                out_scale_exp=int(entry.get("out_scale_exp", 0)),
            )
            if spec.stride < 1:
                raise ModelError(f"{where}: stride must be >= 1")
            if spec.stride > spec.kernel:
                raise ModelError(f"{where}: stride larger than kernel is not supported")
            shape = (spec.out_channels, spec.in_channels, k, k)
            spec.weights, spec.qweights = _decode_weights(entry, shape, where)
            if "bias" in entry:
                spec.bias = np.asarray(entry["bias"], dtype=np.float64)
                if spec.bias.shape != (spec.out_channels,):
                    raise ModelError(f"{where}: bias length != out_channels")
            layers.append(spec)
        elif kind == "FC":
            spec = FCSpec(
                in_features=int(entry["in_features"]),
                out_features=int(entry["out_features"]),
                out_scale_exp=int(entry.get("out_scale_exp", 0)),
            )
            shape = (spec.out_features, spec.in_features)
            spec.weights, spec.qweights = _decode_weights(entry, shape, where)
            if "bias" in entry:
                spec.bias = np.asarray(entry["bias"], dtype=np.float64)
                if spec.bias.shape != (spec.out_features,):
                    raise ModelError(f"{where}: bias length != out_features")
            layers.append(spec)
        elif kind == "BatchNorm":
            if "scale" not in entry or "offset" not in entry:
                raise ModelError(f"{where}: BatchNorm needs inference statistics 'scale' and 'offset'")
            layers.append(BatchNormSpec(
                scale=np.asarray(entry["scale"], dtype=np.float64),
                offset=np.asarray(entry["offset"], dtype=np.float64),
            ))
        elif kind == "ReLU":
            layers.append(ReluSpec())
        elif kind == "MaxPool":
            spec = MaxPoolSpec(kernel=int(entry["kernel"]), stride=int(entry.get("stride", entry["kernel"])))
            if spec.kernel < 1 or spec.stride < 1:
                raise ModelError(f"{where}: kernel and stride must be >= 1")
            layers.append(spec)
        elif kind in RESERVED_KINDS:
            raise ModelError(f"{where}: kind is reserved but not implemented")
        else:
            raise ModelError(f"{where}: unknown layer kind")

    m = ModelSpec(name=str(doc["name"]), input_shape=ishape, quant=quant, layers=layers)
    infer_shapes(m)  # raises on any composition mismatch
    return m


def serialize_model(m: ModelSpec) -> bytes:
    """Canonical JSON encoding (sorted keys, fixed separators)."""
    doc = {
        "name": m.name,
        "input_shape": list(m.input_shape),
        "quant": {
            "bitwidth": m.quant.bitwidth,
            "e_max": m.quant.e_max,
            "e_min": m.quant.e_min,
            "act_total_bits": m.quant.activation_format.total_bits,
            "act_frac_bits": m.quant.activation_format.frac_bits,
        },
        "layers": [],
    }
    for layer in m.layers:
        if layer.kind in ("Conv", "FC"):
            if layer.kind == "Conv":
                entry = {
                    "kind": "Conv",
                    "in_channels": layer.in_channels,
                    "out_channels": layer.out_channels,
                    "kernel": layer.kernel,
                    "stride": layer.stride,
                    "padding": layer.padding,
                }
            else:
                entry = {
                    "kind": "FC",
                    "in_features": layer.in_features,
                    "out_features": layer.out_features,
                }
            if layer.qweights is not None:
                qw = layer.qweights
                entry["qweights"] = {
                    "sign": qw.sign.ravel().tolist(),
                    "exp": qw.exponent.ravel().tolist(),
                    "zero": [int(z) for z in qw.zero.ravel()],
                }
            elif layer.weights is not None:
                entry["weights"] = base64.b64encode(
                    layer.weights.astype("<f4").tobytes()).decode("ascii")
            if layer.bias is not None:
                entry["bias"] = [float(b) for b in layer.bias]
            if layer.out_scale_exp:
                entry["out_scale_exp"] = layer.out_scale_exp
        elif layer.kind == "BatchNorm":
            entry = {
                "kind": "BatchNorm",
                "scale": [float(v) for v in layer.scale],
                "offset": [float(v) for v in layer.offset],
            }
        elif layer.kind == "ReLU":
            entry = {"kind": "ReLU"}
        else:
            entry = {"kind": "MaxPool", "kernel": layer.kernel, "stride": layer.stride}
        doc["layers"].append(entry)
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


# -- transformations ---------------------------------------------------------


def fold_batchnorm(m: ModelSpec) -> ModelSpec:
    """Lower each BatchNorm to a power-of-2 scale plus a fixed-point constant
    add.  Topology and layer count are unchanged; B layers are re-tagged as
    folded affine stages."""
    f = m.quant.activation_format.frac_bits
    fmt_wide = FixedFormat(ACCUM_CAP_BITS, f)
    layers = []
    for layer in m.layers:
        if layer.kind != "BatchNorm" or layer.folded:
            layers.append(layer)
            continue
        scale = np.asarray(layer.scale, dtype=np.float64)
        offset = np.asarray(layer.offset, dtype=np.float64)
        zero = scale == 0.0
        with np.errstate(divide="ignore"):
            e = np.rint(np.log2(np.abs(np.where(zero, 1.0, scale))))
        e = np.clip(e, -(ACCUM_CAP_BITS - 1), ACCUM_CAP_BITS - 1).astype(np.int32)
        raw = np.array(
            [round_half_even(v * (1 << f)) for v in offset], dtype=np.int64)
        raw = np.clip(raw, fmt_wide.raw_min, fmt_wide.raw_max)
        layers.append(BatchNormSpec(
            scale=scale,
            offset=offset,
            folded=True,
            scale_exp=e,
            scale_sign=np.where(scale < 0, -1, 1).astype(np.int8),
            scale_zero=zero,
            offset_raw=raw,
        ))
    return ModelSpec(m.name, m.input_shape, m.quant, layers)


def quantize_model(m: ModelSpec, cfg: QuantConfig = None):
    """Replace float Conv/FC weights with log-quantized triples.

    Returns (quantized ModelSpec, per-layer stats list).  Stats report the
    max and mean relative error of nonzero weights and the zeroed fraction.
    """
    cfg = cfg or m.quant
    layers = []
    stats = []
    for i, layer in enumerate(m.layers):
        if layer.kind not in ("Conv", "FC") or layer.qweights is not None:
            layers.append(layer)
            continue
        if layer.weights is None:
            raise ModelError(f"layer {i}: no float weights to quantize")
        q = log_quantize(layer.weights, cfg)
        deq = dequantize(q)
        nz = layer.weights != 0
        rel = np.abs(deq[nz] - layer.weights[nz]) / np.abs(layer.weights[nz]) if nz.any() else np.array([0.0])
        stats.append({
            "layer": i,
            "kind": layer.kind,
            "max_rel_err": float(rel.max()),
            "mean_rel_err": float(rel.mean()),
            "zero_fraction": float(q.zero.mean()),
            "all_zero": bool(q.zero.all()),
        })
        new = ConvSpec(**{**layer.__dict__}) if layer.kind == "Conv" else FCSpec(**{**layer.__dict__})
        new.weights = None
        new.qweights = q
        layers.append(new)
    return ModelSpec(m.name, m.input_shape, m.quant, layers), stats
