import numpy as np
import pytest

from gatecnn.backend import ClearBackend
from gatecnn.circuits import (
    Word, accumulator_level_width, arithmetic_shift, build_adder, build_max,
    build_maxpool, build_mixed_accumulator, build_pc_mult, build_relu,
    build_subtract, negate_word, saturate_to, sign_extend_word,
    signed_accumulate, truncate_word, word_from_raw_lanes, word_max_depth,
    word_shadow_raws,
)
from gatecnn.fixedpoint import FixedFormat, encode_fixed

F5 = FixedFormat(5, 0)

ALL5 = np.arange(-16, 16)
PAIR_A = np.repeat(ALL5, 32)   # all 1024 (a, b) pairs
PAIR_B = np.tile(ALL5, 32)


def fresh_word(bk, vals, fmt=F5):
    return word_from_raw_lanes(bk, np.asarray(vals), fmt)


def test_adder_exhaustive_5bit_pairs():
    bk = ClearBackend(lanes=1024)
    s = build_adder(bk, fresh_word(bk, PAIR_A), fresh_word(bk, PAIR_B))
    assert s.width == 6
    assert np.array_equal(word_shadow_raws(bk, s), PAIR_A + PAIR_B)
    assert bk.cc_add == 1


def test_adder_trivial_cases():
    bk = ClearBackend(lanes=2)
    s = build_adder(bk, fresh_word(bk, [3, 15]), fresh_word(bk, [-3, 15]))
    assert list(word_shadow_raws(bk, s)) == [0, 30]


def test_adder_width_law_and_frac_mismatch():
    bk = ClearBackend()
    a = fresh_word(bk, [1], FixedFormat(7, 0))
    b = fresh_word(bk, [1], FixedFormat(4, 0))
    assert build_adder(bk, a, b).width == 8
    with pytest.raises(ValueError):
        build_adder(bk, fresh_word(bk, [1], FixedFormat(5, 1)), fresh_word(bk, [1], F5))


def test_adder_gate_decomposition_counts():
    # A full adder stage is 2 XOR + 2 AND + 1 OR.  Over the 6 ripple stages
    # of a 5-bit adder, the constant carry-in folds 3 gates of the first
    # stage and the redundant top carry (3 gates) is never built.
    bk = ClearBackend(lanes=1)
    build_adder(bk, fresh_word(bk, [5]), fresh_word(bk, [-3]))
    assert bk.hgops == 5 * 6 - 3 - 3


def test_subtract_exhaustive():
    bk = ClearBackend(lanes=1024)
    d = build_subtract(bk, fresh_word(bk, PAIR_A), fresh_word(bk, PAIR_B))
    assert np.array_equal(word_shadow_raws(bk, d), PAIR_A - PAIR_B)


def test_negate_exhaustive():
    bk = ClearBackend(lanes=32)
    n = negate_word(bk, fresh_word(bk, ALL5))
    assert n.width == 6
    assert np.array_equal(word_shadow_raws(bk, n), -ALL5)


def test_relu_exhaustive_and_construction():
    bk = ClearBackend(lanes=32)
    r = build_relu(bk, fresh_word(bk, ALL5))
    assert r.width == 5
    assert np.array_equal(word_shadow_raws(bk, r), np.maximum(ALL5, 0))
    assert bk.cc_com == 1
    # AND-with-negated-sign form: the sign output bit is always 0
    assert bk.hgops == 5  # five ANDs; the NOT is free


def test_relu_trivial():
    bk = ClearBackend(lanes=2)
    r = build_relu(bk, fresh_word(bk, [-3, 3], FixedFormat(3, 0)))
    assert list(word_shadow_raws(bk, r)) == [0, 3]


def test_max_exhaustive_and_counters():
    bk = ClearBackend(lanes=1024)
    z = build_max(bk, fresh_word(bk, PAIR_A), fresh_word(bk, PAIR_B))
    assert np.array_equal(word_shadow_raws(bk, z), np.maximum(PAIR_A, PAIR_B))
    assert bk.cc_com == 1
    assert bk.cc_add == 0  # the comparator subtract belongs to the max unit


def test_max_trivial_and_format_mismatch():
    bk = ClearBackend(lanes=2)
    z = build_max(bk, fresh_word(bk, [-1, 7]), fresh_word(bk, [0, 7]))
    assert list(word_shadow_raws(bk, z)) == [0, 7]
    with pytest.raises(ValueError):
        build_max(bk, fresh_word(bk, [0]), fresh_word(bk, [0], FixedFormat(6, 0)))


def test_cc_com_counts_once_regardless_of_width():
    for width in (3, 5, 9, 16):
        bk = ClearBackend()
        fmt = FixedFormat(width, 0)
        build_max(bk, fresh_word(bk, [1], fmt), fresh_word(bk, [2], fmt))
        assert bk.cc_com == 1


def test_maxpool_identity_and_tree():
    bk = ClearBackend(lanes=1)
    w = fresh_word(bk, [4])
    assert build_maxpool(bk, [w], 1) is w
    assert bk.hgops == 0

    bk = ClearBackend(lanes=1)
    words = [fresh_word(bk, [v]) for v in (1, -2, 3, 0)]
    out = build_maxpool(bk, words, 2)
    assert word_shadow_raws(bk, out)[0] == 3
    assert bk.cc_com == 3


def test_maxpool_depth_is_two_max_units_for_2x2():
    bk = ClearBackend(lanes=1)
    unit = build_max(bk, fresh_word(bk, [1]), fresh_word(bk, [2]))
    one_unit_depth = word_max_depth(unit)

    bk2 = ClearBackend(lanes=1)
    out = build_maxpool(bk2, [fresh_word(bk2, [v]) for v in (1, -2, 3, 0)], 2)
    assert word_max_depth(out) == 2 * one_unit_depth


def test_maxpool_validation():
    bk = ClearBackend()
    with pytest.raises(ValueError):
        build_maxpool(bk, [], 0)
    with pytest.raises(ValueError):
        build_maxpool(bk, [fresh_word(bk, [1])] * 3, 2)


def test_maxpool_random_sweeps():
    rng = np.random.RandomState(5)
    for k in (2, 3):
        vals = rng.randint(-16, 16, size=(k * k, 64))
        bk = ClearBackend(lanes=64)
        out = build_maxpool(bk, [fresh_word(bk, vals[i]) for i in range(k * k)], k)
        assert np.array_equal(word_shadow_raws(bk, out), vals.max(axis=0))


def test_shift_semantics():
    bk = ClearBackend(lanes=1)
    w = fresh_word(bk, [3], FixedFormat(10, 0))
    out = arithmetic_shift(bk, w, 2)
    assert word_shadow_raws(bk, out)[0] == 12
    assert out.width == 12
    assert bk.hgops == 0 and bk.pc_shift == 1

    out = arithmetic_shift(bk, fresh_word(bk, [-5]), -1)
    assert word_shadow_raws(bk, out)[0] == -3  # floor(-2.5)

    w = fresh_word(bk, [7])
    out = arithmetic_shift(bk, w, 0)
    assert out.bits == w.bits and bk.pc_shift == 3  # identity shift still counted


def test_shift_freeness_1000_random_pairs():
    rng = np.random.RandomState(17)
    bk = ClearBackend(lanes=64)
    vals = rng.randint(-16, 16, size=64)
    w = fresh_word(bk, vals)
    # give the word some depth so freeness is tested on real circuit outputs
    w = build_adder(bk, w, fresh_word(bk, np.zeros(64, dtype=int)))
    for _ in range(1000):
        k = int(rng.randint(-8, 9))
        before = (bk.hgops, bk.max_depth)
        out = arithmetic_shift(bk, w, k)
        assert (bk.hgops, bk.max_depth) == before
        assert np.array_equal(
            word_shadow_raws(bk, out),
            word_shadow_raws(bk, w) << k if k >= 0 else word_shadow_raws(bk, w) >> -k)


def test_shift_exhaustive_vs_floor_oracle():
    bk = ClearBackend(lanes=32)
    w = fresh_word(bk, ALL5)
    for k in range(-6, 7):
        out = arithmetic_shift(bk, w, k)
        expect = ALL5 * (1 << k) if k >= 0 else ALL5 >> (-k)
        assert np.array_equal(word_shadow_raws(bk, out), expect), k


def test_accumulator_single_level():
    bk = ClearBackend(lanes=1)
    out = build_mixed_accumulator(bk, [fresh_word(bk, [15]), fresh_word(bk, [15])])
    assert out.width == 6
    assert word_shadow_raws(bk, out)[0] == 30


def test_accumulator_16x_equal_inputs():
    bk = ClearBackend(lanes=1)
    words = [fresh_word(bk, [15]) for _ in range(16)]
    trace = []
    out = build_mixed_accumulator(bk, words, trace=trace)
    assert word_shadow_raws(bk, out)[0] == 240
    assert out.width == 9  # b + log2(16)
    assert max(w for _, w in trace) == 9


def test_accumulator_level_width_law_random_trees():
    rng = np.random.RandomState(23)
    for _ in range(25):
        n = int(rng.randint(2, 257))
        vals = rng.randint(-16, 16, size=(n, 8))
        bk = ClearBackend(lanes=8)
        trace = []
        out = build_mixed_accumulator(
            bk, [fresh_word(bk, vals[i]) for i in range(n)], 16, trace=trace)
        for level, width in trace:
            assert width == accumulator_level_width(5, level, 16) == min(5 + level, 16)
        assert np.array_equal(word_shadow_raws(bk, out), vals.sum(axis=0))
        assert bk.cc_add == n - 1
        assert not bk.overflow_events


def test_accumulator_cap_wrap_and_flag():
    # cap 8: sums beyond +/-128 wrap and must be flagged
    rng = np.random.RandomState(29)
    vals = rng.randint(-16, 16, size=(40, 16))
    bk = ClearBackend(lanes=16)
    out = build_mixed_accumulator(bk, [fresh_word(bk, vals[i]) for i in range(40)], cap_bits=8)
    assert out.width == 8
    exact = vals.sum(axis=0)
    wrapped = ((exact + 128) % 256) - 128
    assert np.array_equal(word_shadow_raws(bk, out), wrapped)
    flagged = 0
    for _, mask in bk.overflow_events:
        flagged |= mask
    for lane in range(16):
        if exact[lane] != wrapped[lane]:
            assert (flagged >> lane) & 1, f"lane {lane} wrapped but was not flagged"


def test_accumulator_validation():
    bk = ClearBackend()
    with pytest.raises(ValueError):
        build_mixed_accumulator(bk, [])
    with pytest.raises(ValueError):
        build_mixed_accumulator(bk, [fresh_word(bk, [1])], cap_bits=3)


def test_signed_accumulate_matches_signed_sum():
    rng = np.random.RandomState(31)
    for _ in range(20):
        n_pos = int(rng.randint(0, 6))
        n_neg = int(rng.randint(0 if n_pos else 1, 6))
        pv = rng.randint(-16, 16, size=(n_pos, 32))
        nv = rng.randint(-16, 16, size=(n_neg, 32))
        bk = ClearBackend(lanes=32)
        out = signed_accumulate(
            bk,
            [fresh_word(bk, pv[i]) for i in range(n_pos)],
            [fresh_word(bk, nv[i]) for i in range(n_neg)],
        )
        expect = pv.sum(axis=0) - nv.sum(axis=0) if n_pos else -nv.sum(axis=0)
        assert np.array_equal(word_shadow_raws(bk, out), expect)
        assert bk.cc_add == max(n_pos + n_neg - 1, 0) + (0 if n_pos and not n_neg else 0)


def test_pc_mult_exhaustive_5bit():
    bk = ClearBackend(lanes=32)
    x = fresh_word(bk, ALL5)
    for craw in range(-16, 16):
        c = encode_fixed(float(craw), F5)
        p = build_pc_mult(bk, x, c)
        assert np.array_equal(word_shadow_raws(bk, p), ALL5 * craw), craw
    assert bk.pc_mult == 32
    assert bk.pc_shift == 0  # internal shifts are part of the multiplication
    assert bk.cc_add == 0


def test_pc_mult_trivial_paths():
    bk = ClearBackend(lanes=3)
    x = fresh_word(bk, [5, -7, 0])
    one = build_pc_mult(bk, x, encode_fixed(1.0, F5))
    assert list(word_shadow_raws(bk, one)) == [5, -7, 0]
    neg = build_pc_mult(bk, x, encode_fixed(-1.0, F5))
    assert list(word_shadow_raws(bk, neg)) == [-5, 7, 0]
    zero = build_pc_mult(bk, x, encode_fixed(0.0, F5))
    assert zero.is_const()
    assert list(word_shadow_raws(bk, zero)) == [0, 0, 0]
    assert bk.pc_mult == 3


def test_pc_mult_fixed_point_formats():
    # 0.75 (frac 2) times raws: product format carries frac 2
    bk = ClearBackend(lanes=32)
    x = fresh_word(bk, ALL5)
    p = build_pc_mult(bk, x, encode_fixed(0.75, FixedFormat(5, 2)))
    assert p.frac_bits == 2
    assert np.array_equal(word_shadow_raws(bk, p), ALL5 * 3)


def test_saturate_two_sided():
    bk = ClearBackend(lanes=6)
    w = fresh_word(bk, [100, -200, 7, -16, 15, 16], FixedFormat(9, 0))
    s = saturate_to(bk, w, 5)
    assert list(word_shadow_raws(bk, s)) == [15, -16, 7, -16, 15, 15]
    narrow = saturate_to(bk, fresh_word(bk, [1, 2, 3, -4, 0, -1], FixedFormat(3, 0)), 5)
    assert narrow.width == 5  # widening is a free sign extension


def test_truncate_wrap_flagging():
    bk = ClearBackend(lanes=2)
    w = fresh_word(bk, [40, 3], FixedFormat(8, 0))
    t = truncate_word(bk, w, 5, flag_wrap=True)
    assert list(word_shadow_raws(bk, t)) == [((40 + 16) % 32) - 16, 3]
    assert len(bk.overflow_events) == 1
    _, mask = bk.overflow_events[0]
    assert mask == 0b01  # only lane 0 wrapped


def test_exhaustive_oracle_equivalence_width_weighted_random():
    # generators above 10 input bits: randomized sweeps against integer oracles
    rng = np.random.RandomState(37)
    for width in (8, 12, 16):
        fmt = FixedFormat(width, 0)
        lo, hi = fmt.raw_min, fmt.raw_max
        a = rng.randint(lo, hi + 1, size=128)
        b = rng.randint(lo, hi + 1, size=128)
        bk = ClearBackend(lanes=128)
        wa, wb = fresh_word(bk, a, fmt), fresh_word(bk, b, fmt)
        assert np.array_equal(word_shadow_raws(bk, build_adder(bk, wa, wb)), a + b)
        assert np.array_equal(word_shadow_raws(bk, build_max(bk, wa, wb)), np.maximum(a, b))
        assert np.array_equal(word_shadow_raws(bk, build_relu(bk, wa)), np.maximum(a, 0))


def test_relu_depth_stable_and_matches_independent_longest_path():
    from test_backend import RecordingBackend, longest_path
    bk = RecordingBackend(lanes=32)
    r = build_relu(bk, fresh_word(bk, ALL5))
    for bit in r.bits:
        assert bit.depth == longest_path(bk, bit)
    assert word_max_depth(r) == bk.max_depth
