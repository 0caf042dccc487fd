"""Generators for the arithmetic and comparison circuits used by compiled
networks: ripple-carry adders, the ReLU and max-pooling units, zero-cost
arithmetic shifts, the mixed-bitwidth accumulator, and a plaintext-constant
multiplier.

Every generator is pure given a backend instance.  High-level operation
counters (cc_add, pc_shift, ...) are incremented here, by the generator that
owns the operation, so reports match the usual cost-table conventions;
per-gate HGOP/depth accounting happens inside the backend.
"""

import numpy as np

from .backend import ClearBackend, WireBit
from .fixedpoint import FixedFormat, PlainWord


class Word:
    """An ordered vector of circuit wires holding a two's-complement value."""

    __slots__ = ("bits", "format")

    def __init__(self, bits, format):
        if len(bits) != format.total_bits:
            raise ValueError(f"bit count {len(bits)} != total_bits {format.total_bits}")
        self.bits = list(bits)
        self.format = format

    @property
    def width(self):
        return self.format.total_bits

    @property
    def frac_bits(self):
        return self.format.frac_bits

    @property
    def sign(self):
        return self.bits[-1]

    def is_const(self):
        return all(b.is_const for b in self.bits)

    def __repr__(self):
        return f"Word(width={self.width}, frac={self.frac_bits})"


# -- shadow I/O ----------------------------------------------------------


def word_from_raw_lanes(backend: ClearBackend, raws, fmt: FixedFormat) -> Word:
    """Fresh cipher word whose lane l carries the raw integer raws[l]."""
    raws = np.asarray(raws, dtype=np.int64)
    if raws.shape != (backend.lanes,):
        raise ValueError(f"expected {backend.lanes} lane values, got shape {raws.shape}")
    if raws.min() < fmt.raw_min or raws.max() > fmt.raw_max:
        raise ValueError("raw value out of format range")
    bits = []
    for j in range(fmt.total_bits):
        col = ((raws >> j) & 1).astype(np.uint8)
        mask = int.from_bytes(np.packbits(col, bitorder="little").tobytes(), "little")
        bits.append(backend.fresh_input(mask))
    return Word(bits, fmt)


def word_from_plain(backend: ClearBackend, pw: PlainWord) -> Word:
    """Plaintext-constant word (same value on every lane)."""
    return Word([backend.const(b) for b in pw.bits], pw.format)


def word_shadow_raws(backend: ClearBackend, w: Word) -> np.ndarray:
    """Per-lane signed raw integers decoded from a word's shadow bits."""
    lanes = backend.lanes
    nbytes = (lanes + 7) // 8
    raws = np.zeros(lanes, dtype=np.int64)
    for j, bit in enumerate(w.bits):
        buf = bit.shadow.to_bytes(nbytes, "little")
        col = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[:lanes]
        weight = 1 << j
        if j == w.width - 1:
            weight = -(1 << j)  # sign bit
        raws += col.astype(np.int64) * weight
    return raws


def word_max_depth(w: Word) -> int:
    return max(b.depth for b in w.bits)


# -- wire-level helpers (free: no gates, no counters) ----------------------


def sign_extend_word(w: Word, new_total_bits: int) -> Word:
    """Replicate the sign wire into new high positions; value unchanged."""
    if new_total_bits < w.width:
        raise ValueError(f"cannot sign-extend {w.width} bits down to {new_total_bits}")
    bits = w.bits + [w.sign] * (new_total_bits - w.width)
    return Word(bits, w.format.with_total_bits(new_total_bits))


def truncate_word(backend: ClearBackend, w: Word, nbits: int, flag_wrap=False) -> Word:
    """Keep the low nbits wires (value mod 2**nbits, two's complement).

    With flag_wrap, lanes whose value changes are recorded as overflow
    events on the backend; detection reads shadows and costs no gates.
    """
    if nbits >= w.width:
        return w
    if flag_wrap:
        sign_new = w.bits[nbits - 1].shadow
        diff = 0
        for bit in w.bits[nbits:]:
            diff |= bit.shadow ^ sign_new
        backend.flag_overflow(diff & backend.lane_mask)
    return Word(w.bits[:nbits], w.format.with_total_bits(nbits))


# -- ripple-carry core (uncounted; built on by the public generators) ------


def _ripple_add(backend, abits, bbits, carry_in):
    """Sum bits of two equal-width operands plus carry.  Operands are
    pre-extended by callers, so the carry out of the top position is
    redundant and never built."""
    assert len(abits) == len(bbits)
    g = backend.gate
    carry = carry_in
    out = []
    last = len(abits) - 1
    for i, (a, b) in enumerate(zip(abits, bbits)):
        axb = g("XOR", a, b)
        out.append(g("XOR", axb, carry))
        if i < last:
            carry = g("OR", g("AND", a, b), g("AND", axb, carry))
    return out


def _add_words(backend, a: Word, b: Word, out_width: int, carry_in=None) -> Word:
    """a + b over out_width bits (operands sign-extended; top carry dropped)."""
    if a.frac_bits != b.frac_bits:
        raise ValueError(f"frac_bits mismatch: {a.frac_bits} vs {b.frac_bits}")
    ax = sign_extend_word(a, out_width)
    bx = sign_extend_word(b, out_width)
    cin = carry_in if carry_in is not None else backend.const(0)
    bits = _ripple_add(backend, ax.bits, bx.bits, cin)
    return Word(bits, a.format.with_total_bits(out_width))


def _sub_words(backend, a: Word, b: Word, out_width: int) -> Word:
    """a - b over out_width bits via a + NOT(b) + 1."""
    if a.frac_bits != b.frac_bits:
        raise ValueError(f"frac_bits mismatch: {a.frac_bits} vs {b.frac_bits}")
    ax = sign_extend_word(a, out_width)
    bx = sign_extend_word(b, out_width)
    nb = [backend.gate("NOT", bit) for bit in bx.bits]
    bits = _ripple_add(backend, ax.bits, nb, backend.const(1))
    return Word(bits, a.format.with_total_bits(out_width))


# -- public generators -----------------------------------------------------


def build_adder(backend: ClearBackend, a: Word, b: Word, count=True) -> Word:
    """Exact sum at width max(widths)+1; counts one ciphertext addition."""
    w = max(a.width, b.width) + 1
    out = _add_words(backend, a, b, w)
    if count:
        backend.count_cc_add()
    return out


def build_subtract(backend: ClearBackend, a: Word, b: Word, count=True) -> Word:
    """Exact difference at width max(widths)+1; counts one ciphertext addition."""
    w = max(a.width, b.width) + 1
    out = _sub_words(backend, a, b, w)
    if count:
        backend.count_cc_add()
    return out


def negate_word(backend: ClearBackend, x: Word) -> Word:
    """Exact two's-complement negation (NOT then +1), one bit wider."""
    xw = sign_extend_word(x, x.width + 1)
    nb = [backend.gate("NOT", bit) for bit in xw.bits]
    g = backend.gate
    carry = backend.const(1)
    out = []
    last = len(nb) - 1
    for i, bit in enumerate(nb):
        out.append(g("XOR", bit, carry))
        if i < last:
            carry = g("AND", bit, carry)
    return Word(out, x.format.with_total_bits(x.width + 1))


def build_relu(backend: ClearBackend, x: Word) -> Word:
    """max(x, 0): each output bit is the input bit gated by NOT(sign)."""
    keep = backend.gate("NOT", x.sign)
    bits = [backend.gate("AND", b, keep) for b in x.bits]
    backend.count_cc_com()
    return Word(bits, x.format)


def build_max(backend: ClearBackend, x: Word, y: Word) -> Word:
    """max(x, y): the sign of x - y selects per-bit between y and x."""
    if x.format != y.format:
        raise ValueError(f"format mismatch: {x.format} vs {y.format}")
    d = _sub_words(backend, x, y, x.width + 1)
    s = d.sign  # 1 iff x < y
    bits = [backend.gate("MUX", s, yb, xb) for xb, yb in zip(x.bits, y.bits)]
    backend.count_cc_com()
    return Word(bits, x.format)


def build_maxpool(backend: ClearBackend, inputs, kernel_size: int) -> Word:
    """Balanced tree of max units over kernel_size**2 inputs."""
    if len(inputs) == 0:
        raise ValueError("empty input list")
    if len(inputs) != kernel_size * kernel_size:
        raise ValueError(f"expected {kernel_size * kernel_size} inputs, got {len(inputs)}")
    level = list(inputs)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(build_max(backend, level[i], level[i + 1]))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def arithmetic_shift(backend: ClearBackend, x: Word, k: int, count=True) -> Word:
    """floor(x * 2**k) in raw units by pure rewiring: zero gates, zero depth.

    Left shifts insert constant-0 low wires and widen; right shifts drop low
    wires and keep at least the sign.  Counted as one plaintext shift.
    """
    if abs(k) >= 32:
        raise ValueError(f"shift amount {k} out of range")
    if count:
        backend.count_pc_shift()
    if k == 0:
        return Word(list(x.bits), x.format)
    if k > 0:
        bits = [backend.const(0)] * k + x.bits
        return Word(bits, x.format.with_total_bits(x.width + k))
    drop = -k
    if drop >= x.width:
        bits = [x.sign]
    else:
        bits = x.bits[drop:]
    return Word(bits, x.format.with_total_bits(len(bits)))


def accumulator_level_width(b: int, level: int, cap_bits: int) -> int:
    """Adder width at a tree level: min(b + level, cap_bits)."""
    return min(b + level, cap_bits)


def build_mixed_accumulator(backend: ClearBackend, inputs, cap_bits: int = 16, trace=None) -> Word:
    """Balanced adder tree whose level-n adders run at min(b+n, cap) bits.

    Below the cap every level is exact by construction; once widths hit the
    cap, sums wrap modulo 2**cap and each actual wrap is flagged on the
    backend.  trace, if given, collects (level, adder_width) pairs.
    """
    if len(inputs) == 0:
        raise ValueError("empty input list")
    b = inputs[0].width
    fmt = inputs[0].format
    for w in inputs:
        if w.format != fmt:
            raise ValueError("accumulator inputs must share one format")
    if cap_bits < b:
        raise ValueError(f"cap_bits {cap_bits} below input width {b}")
    level = list(inputs)
    n = 0
    while len(level) > 1:
        n += 1
        w_out = accumulator_level_width(b, n, cap_bits)
        nxt = []
        for i in range(0, len(level) - 1, 2):
            a, c = level[i], level[i + 1]
            if b + n <= cap_bits:
                out = _add_words(backend, a, c, w_out)
            else:
                out = _modular_add(backend, a, c, cap_bits)
            backend.count_cc_add()
            if trace is not None:
                trace.append((n, w_out))
            nxt.append(out)
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def _modular_add(backend, a: Word, b: Word, cap: int) -> Word:
    """Add at the cap width, wrapping two's-complement; flags actual wraps."""
    ax = sign_extend_word(a, cap)
    bx = sign_extend_word(b, cap)
    bits = _ripple_add(backend, ax.bits, bx.bits, backend.const(0))
    out = Word(bits, a.format.with_total_bits(cap))
    # Signed overflow: operand signs equal but differ from the result sign.
    sa, sb, so = ax.sign.shadow, bx.sign.shadow, out.sign.shadow
    ovf = (~(sa ^ sb)) & (sa ^ so) & backend.lane_mask
    backend.flag_overflow(ovf)
    return out


def _modular_sub(backend, a: Word, b: Word, cap: int) -> Word:
    ax = sign_extend_word(a, cap)
    bx = sign_extend_word(b, cap)
    nb = [backend.gate("NOT", bit) for bit in bx.bits]
    bits = _ripple_add(backend, ax.bits, nb, backend.const(1))
    out = Word(bits, a.format.with_total_bits(cap))
    sa, sb, so = ax.sign.shadow, bx.sign.shadow, out.sign.shadow
    ovf = (sa ^ sb) & (sa ^ so) & backend.lane_mask
    backend.flag_overflow(ovf)
    return out


def signed_accumulate(backend: ClearBackend, pos, neg, cap_bits: int = 16) -> Word:
    """Sum(pos) - sum(neg) via two mixed-bitwidth trees and one subtractor.

    Routing the negative terms through a subtractor costs the same adder
    count as one big tree (the +1 rides the subtractor's carry-in) and keeps
    every term a plain shifted word.
    """
    if not pos and not neg:
        raise ValueError("empty input list")
    p = build_mixed_accumulator(backend, pos, cap_bits) if pos else None
    q = build_mixed_accumulator(backend, neg, cap_bits) if neg else None
    if q is None:
        return p
    if p is None:
        out = negate_word(backend, q)
        return truncate_word(backend, out, min(out.width, cap_bits), flag_wrap=True)
    w = max(p.width, q.width) + 1
    if w <= cap_bits:
        out = _sub_words(backend, p, q, w)
    else:
        out = _modular_sub(backend, p, q, cap_bits)
    backend.count_cc_add()
    return out


def build_pc_mult(backend: ClearBackend, x: Word, c: PlainWord, count=True) -> Word:
    """x times a plaintext fixed-point constant, by shift-and-add over the
    set bits of |c|; negated once when c < 0.  Reported as one plaintext
    multiplication (internal shifts and adds are part of it)."""
    if count:
        backend.count_pc_mult()
    out_width = x.width + c.format.total_bits
    out_fmt = FixedFormat(out_width, x.frac_bits + c.format.frac_bits)
    craw = c.raw
    if craw == 0:
        return Word([backend.const(0)] * out_width, out_fmt)
    mag = abs(craw)
    acc = None
    i = 0
    while mag:
        if mag & 1:
            term = arithmetic_shift(backend, x, i, count=False)
            acc = term if acc is None else _add_words(
                backend, acc, term, max(acc.width, term.width) + 1)
        mag >>= 1
        i += 1
    if craw < 0:
        acc = negate_word(backend, acc)
    if acc.width > out_width:
        acc = Word(acc.bits[:out_width], acc.format.with_total_bits(out_width))
    else:
        acc = sign_extend_word(acc, out_width)
    return Word(acc.bits, out_fmt)


def saturate_to(backend: ClearBackend, x: Word, nbits: int) -> Word:
    """Clamp to the nbits two's-complement range; free when already narrow.

    In-range means all wires above the kept sign position agree with the
    sign; out-of-range values clamp to the nearest representable extreme.
    """
    if nbits >= x.width:
        return sign_extend_word(x, nbits)
    g = backend.gate
    sign = x.sign
    agree = [g("XNOR", x.bits[i], sign) for i in range(nbits - 1, x.width - 1)]
    in_range = _and_tree(backend, agree) if agree else backend.const(1)
    sat_low = g("NOT", sign)  # 0111..1 for positive overflow, 1000..0 for negative
    bits = [g("MUX", in_range, x.bits[i], sat_low) for i in range(nbits - 1)]
    bits.append(sign)
    return Word(bits, x.format.with_total_bits(nbits))


def _and_tree(backend, bits):
    level = list(bits)
    while len(level) > 1:
        nxt = [backend.gate("AND", level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
