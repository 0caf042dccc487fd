"""Power-of-2 logarithmic weight quantization and fixed-point activation
encoding, the ingredients that turn every multiplication into a shift.

Each weight becomes (sign, exponent, zero) with value sign * 2**exponent, or
exactly zero; exponents are the round-to-nearest integer of log2|w|, clamped
to [e_min, e_max], with underflow-to-zero below e_min.
"""

from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FixedFormat, encode_fixed


@dataclass(frozen=True)
class QuantConfig:
    bitwidth: int = 5
    e_max: int = 0
    e_min: int = None
    activation_format: FixedFormat = field(default_factory=lambda: FixedFormat(5, 4))

    def __post_init__(self):
        if self.e_min is None:
            object.__setattr__(self, "e_min", self.e_max - 14)
        if self.e_min >= self.e_max:
            raise ValueError("e_min must be below e_max")
        # One sign bit; remaining bits hold the exponent code plus a zero code.
        if self.e_max - self.e_min + 1 > (1 << (self.bitwidth - 1)):
            raise ValueError(
                f"exponent range [{self.e_min}, {self.e_max}] does not fit "
                f"{self.bitwidth - 1} exponent bits"
            )


@dataclass
class QuantizedTensor:
    """Per-element (sign, exponent, zero_flag) triples."""

    sign: np.ndarray      # int8, values in {-1, +1}
    exponent: np.ndarray  # int32
    zero: np.ndarray      # bool

    @property
    def shape(self):
        return self.sign.shape

    def __eq__(self, other):
        return (
            isinstance(other, QuantizedTensor)
            and self.shape == other.shape
            and bool(np.all(self.zero == other.zero))
            and bool(np.all((self.sign == other.sign) | self.zero))
            and bool(np.all((self.exponent == other.exponent) | self.zero))
        )


def log_quantize(w, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a real tensor to signed powers of two."""
    w = np.asarray(w, dtype=np.float64)
    sign = np.where(w < 0, -1, 1).astype(np.int8)
    mag = np.abs(w)
    with np.errstate(divide="ignore"):
        e = np.rint(np.log2(mag))  # rint rounds half to even
    zero = (mag == 0) | (e < cfg.e_min)
    e = np.clip(e, cfg.e_min, cfg.e_max)
    e = np.where(zero, cfg.e_min, e).astype(np.int32)
    return QuantizedTensor(sign=sign, exponent=e, zero=zero)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    out = q.sign.astype(np.float64) * np.exp2(q.exponent.astype(np.float64))
    return np.where(q.zero, 0.0, out)


def quantize_activations(x, fmt: FixedFormat):
    """Element-wise fixed-point encoding of a real tensor.

    Returns an object array of PlainWord with the input's shape.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = [encode_fixed(float(v), fmt) for v in x.ravel()]
    out = np.empty(x.size, dtype=object)
    out[:] = flat
    return out.reshape(x.shape)


def quantize_activations_raw(x, fmt: FixedFormat) -> np.ndarray:
    """Same rounding/saturation as quantize_activations, as raw integers."""
    x = np.asarray(x, dtype=np.float64)
    raw = np.rint(x * (1 << fmt.frac_bits))
    return np.clip(raw, fmt.raw_min, fmt.raw_max).astype(np.int64)
