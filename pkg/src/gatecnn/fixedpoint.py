"""Two's-complement fixed-point words on plaintext bits.

Bit order is LSB first everywhere in this package; the top bit of a word is
the sign bit.  Values relate to raw integers by ``value = raw * 2**-frac_bits``.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class FixedFormat:
    """Width and binary-point position of a two's-complement word."""

    total_bits: int
    frac_bits: int = 0

    def __post_init__(self):
        if not (1 <= self.total_bits <= 32):
            raise ValueError(f"total_bits must be in [1, 32], got {self.total_bits}")
        # Intermediate circuit words may be narrower than their binary point
        # (a right shift keeps raw-unit bookkeeping), so frac_bits is only
        # required to be non-negative here; encodable formats additionally
        # need total_bits > frac_bits, checked where values enter.
        if self.frac_bits < 0:
            raise ValueError(f"frac_bits must be non-negative, got {self.frac_bits}")

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    def with_total_bits(self, total_bits: int) -> "FixedFormat":
        return FixedFormat(total_bits, self.frac_bits)


@dataclass(frozen=True)
class PlainWord:
    """A fixed-point value as plaintext bits, LSB first."""

    bits: tuple
    format: FixedFormat

    def __post_init__(self):
        if len(self.bits) != self.format.total_bits:
            raise ValueError(
                f"bit count {len(self.bits)} != total_bits {self.format.total_bits}"
            )
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("bits must be 0 or 1")

    @property
    def raw(self) -> int:
        return bits_to_raw(self.bits)


def raw_to_bits(raw: int, total_bits: int) -> tuple:
    """Two's-complement bit pattern (LSB first) of a raw integer."""
    u = raw & ((1 << total_bits) - 1)
    return tuple((u >> i) & 1 for i in range(total_bits))


def bits_to_raw(bits) -> int:
    """Signed raw integer of an LSB-first two's-complement bit pattern."""
    u = 0
    for i, b in enumerate(bits):
        u |= (b & 1) << i
    n = len(bits)
    if bits[n - 1]:
        u -= 1 << n
    return u


def round_half_even(x: float) -> int:
    # Python's round() implements banker's rounding on floats.
    return int(round(x))


def encode_raw(raw: int, fmt: FixedFormat) -> PlainWord:
    """Word for a raw integer, saturating at the format's range limits."""
    raw = max(fmt.raw_min, min(fmt.raw_max, raw))
    return PlainWord(raw_to_bits(raw, fmt.total_bits), fmt)


def encode_fixed(x: float, fmt: FixedFormat) -> PlainWord:
    """Round-to-nearest-even of x * 2**frac_bits, saturating out-of-range x."""
    return encode_raw(round_half_even(x * (1 << fmt.frac_bits)), fmt)


def decode_fixed(w: PlainWord) -> float:
    return w.raw / (1 << w.format.frac_bits)


def sign_extend(w: PlainWord, new_total_bits: int) -> PlainWord:
    """Widen a word by replicating the sign bit; the decoded value is unchanged."""
    cur = w.format.total_bits
    if new_total_bits < cur:
        raise ValueError(f"cannot sign-extend {cur} bits down to {new_total_bits}")
    sign = w.bits[cur - 1]
    return PlainWord(w.bits + (sign,) * (new_total_bits - cur), w.format.with_total_bits(new_total_bits))
