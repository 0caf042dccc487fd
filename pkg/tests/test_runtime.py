import base64
import json

import numpy as np
import pytest

from gatecnn.backend import ClearBackend, CounterReport
from gatecnn.model import fold_batchnorm, parse_model, quantize_model
from gatecnn.compile import compile_model
from gatecnn.runtime import (
    InferenceResult, emit_report, encode_image, evaluate, evaluate_batch,
    reference_eval, reference_eval_batch,
)


def b64(w):
    return base64.b64encode(np.asarray(w, dtype="<f4").tobytes()).decode()


def prep(layers, input_shape, name="t"):
    m = parse_model(json.dumps({
        "name": name, "input_shape": list(input_shape),
        "quant": {"bitwidth": 5, "e_max": 0, "e_min": -6,
                  "act_total_bits": 5, "act_frac_bits": 4},
        "layers": layers,
    }))
    mq, _ = quantize_model(m)
    return fold_batchnorm(mq)


def random_cnn(rng, input_hw=8):
    return prep([
        {"kind": "Conv", "in_channels": 1, "out_channels": 3, "kernel": 3,
         "stride": 1, "weights": b64(rng.randn(3, 1, 3, 3) * 0.4)},
        {"kind": "BatchNorm",
         "scale": rng.uniform(0.3, 1.5, 3).tolist(),
         "offset": rng.uniform(-0.5, 0.5, 3).tolist()},
        {"kind": "ReLU"},
        {"kind": "MaxPool", "kernel": 2, "stride": 2},
        {"kind": "FC", "in_features": 27, "out_features": 4,
         "weights": b64(rng.randn(4, 27) * 0.3),
         "bias": rng.uniform(-0.3, 0.3, 4).tolist()},
    ], (input_hw, input_hw, 1))


def test_identity_plan_returns_decoded_input():
    m = prep([
        {"kind": "Conv", "in_channels": 1, "out_channels": 1, "kernel": 1,
         "stride": 1, "weights": b64(np.array([[[[1.0]]]]))},
    ], (1, 1, 1))
    plan = compile_model(m)
    for raw in (-16, -1, 0, 7, 15):
        res = evaluate(plan, np.array([[[raw]]]))
        assert res.raw_logits[0] == raw
        assert res.logits[0] == raw / 16.0


def test_single_conv_weight_two_doubles_input():
    # weight 2^1 needs e_max 1 and exercises the widening left-shift path
    m = parse_model(json.dumps({
        "name": "x2", "input_shape": [1, 1, 1],
        "quant": {"bitwidth": 5, "e_max": 1, "e_min": -6,
                  "act_total_bits": 5, "act_frac_bits": 4},
        "layers": [{"kind": "Conv", "in_channels": 1, "out_channels": 1, "kernel": 1,
                    "stride": 1, "weights": b64(np.array([[[[2.0]]]]))}],
    }))
    mq, _ = quantize_model(m)
    m = fold_batchnorm(mq)
    assert reference_eval(m, np.array([[[3]]]))[0] * 16 == 6
    res = evaluate(compile_model(m), np.array([[[3]]]))
    assert res.raw_logits[0] == 6


def test_all_zero_image_zero_bias_model():
    rng = np.random.RandomState(71)
    m = prep([
        {"kind": "FC", "in_features": 4, "out_features": 3,
         "weights": b64(rng.randn(3, 4))},
    ], (2, 2, 1))
    logits = reference_eval(m, np.zeros((2, 2, 1), dtype=np.int64))
    assert np.all(logits == 0.0)
    res = evaluate(compile_model(m), np.zeros((2, 2, 1), dtype=np.int64))
    assert np.all(res.raw_logits == 0)


def test_circuit_oracle_bit_exactness_randomized():
    rng = np.random.RandomState(73)
    m = random_cnn(rng)
    plan = compile_model(m)
    images = rng.randint(0, 256, size=(32, 8, 8)).astype(np.uint8)
    raws = np.stack([encode_image(im, m.quant.activation_format) for im in images])
    results = evaluate_batch(plan, raws)
    oracle, _ = reference_eval_batch(m, raws)
    for i, r in enumerate(results):
        assert np.array_equal(r.raw_logits, oracle[i])


def test_shape_mismatch_errors():
    rng = np.random.RandomState(79)
    m = random_cnn(rng)
    plan = compile_model(m)
    with pytest.raises(ValueError, match="shape"):
        evaluate(plan, np.zeros((5, 5, 1), dtype=np.int64))
    with pytest.raises(ValueError, match="shape"):
        reference_eval_batch(m, np.zeros((1, 5, 5, 1), dtype=np.int64))


def test_worker_counts_do_not_change_results():
    rng = np.random.RandomState(83)
    m = random_cnn(rng)
    plan = compile_model(m)
    raws = rng.randint(0, 16, size=(20, 8, 8, 1))
    base = evaluate_batch(plan, raws, workers=1)
    for workers in (2, 8):
        other = evaluate_batch(plan, raws, workers=workers)
        for a, b in zip(base, other):
            assert np.array_equal(a.raw_logits, b.raw_logits)
            assert a.report == b.report
            assert a.depth_trace == b.depth_trace
            assert a.overflow_events == b.overflow_events


def test_counters_depend_only_on_plan_not_data():
    rng = np.random.RandomState(89)
    m = random_cnn(rng)
    plan = compile_model(m)
    r1 = evaluate(plan, rng.randint(0, 16, size=(8, 8, 1)))
    r2 = evaluate(plan, rng.randint(0, 16, size=(8, 8, 1)))
    assert r1.report == r2.report


def test_argmax_tie_breaks_to_lowest_index():
    res = InferenceResult(
        logits=[1.0, 3.0, 3.0, 0.0], raw_logits=np.array([16, 48, 48, 0]),
        predicted_class=int(np.argmax([1.0, 3.0, 3.0, 0.0])),
        report=CounterReport(), depth_trace=[], overflow_events=[])
    assert res.predicted_class == 1


def test_reference_matches_float_simulation_within_rounding_bound():
    # Float64 simulation of the same quantized network without the floor
    # steps; the only divergence is one raw unit per floor, propagated
    # through non-expansive relu/max/clamp stages.
    rng = np.random.RandomState(97)
    for trial in range(6):
        m = random_cnn(rng)
        conv, bn, _, _, fc = m.layers
        imgs = rng.randint(0, 16, size=(8, 8, 8, 1)).astype(np.int64)

        # float path in raw units
        x = imgs.astype(np.float64)
        wq = np.where(conv.qweights.zero, 0.0,
                      conv.qweights.sign * np.exp2(conv.qweights.exponent))
        acc = np.zeros((8, 6, 6, 3))
        for co in range(3):
            for kh in range(3):
                for kw in range(3):
                    acc[..., co] += wq[co, 0, kh, kw] * x[:, kh:kh + 6, kw:kw + 6, 0]
        conv_bound = (~conv.qweights.zero).sum(axis=(1, 2, 3)).max()  # 1 raw/floor
        s = np.where(bn.scale_zero, 0.0, bn.scale_sign * np.exp2(bn.scale_exp))
        acc = acc * s + bn.offset_raw
        bound = conv_bound * np.abs(s).max() + 1.0  # affine shift floors once
        acc = np.maximum(acc, 0)
        acc = np.clip(acc, -16, 15)
        pooled = np.max([acc[:, a::2, b::2][:, :3, :3] for a in range(2) for b in range(2)], axis=0)
        flat = pooled.reshape(8, -1)
        wq2 = np.where(fc.qweights.zero, 0.0,
                       fc.qweights.sign * np.exp2(fc.qweights.exponent))
        braw = np.round(np.asarray(fc.bias) * 16.0)
        logits_float = flat @ wq2.T + braw
        n_terms = (~fc.qweights.zero).sum(axis=1).max()
        bound = bound * np.abs(wq2).sum(axis=1).max() + n_terms + 0.5

        ref, events = reference_eval_batch(m, imgs)
        assert not events
        assert np.all(np.abs(ref - logits_float) <= bound + 1e-9), trial


def test_emit_report_text_and_json_roundtrip():
    rng = np.random.RandomState(101)
    m = random_cnn(rng)
    plan = compile_model(m)
    res = evaluate(plan, rng.randint(0, 16, size=(8, 8, 1)))
    text = emit_report(res, "text")
    for col in ("HOPs", "CC_Add", "PC_Mult", "CC_Mult", "PC_Shift", "CC_Com", "HGOPs", "Depth"):
        assert col in text
    doc1 = json.loads(emit_report(res, "json"))
    emit_report(res, "text")
    doc2 = json.loads(emit_report(res, "json"))
    assert doc1 == doc2
    assert doc1["cc_mult"] == 0
    assert doc1["hops"] == doc1["cc_add"] + doc1["pc_mult"] + doc1["pc_shift"] + doc1["cc_com"]
    assert all(isinstance(doc1[k], int) for k in
               ("hops", "cc_add", "pc_mult", "cc_mult", "pc_shift", "cc_com", "hgops", "depth"))


def test_zero_op_report_row():
    res = InferenceResult(logits=[0.0], raw_logits=np.array([0]), predicted_class=0,
                          report=CounterReport(), depth_trace=[], overflow_events=[])
    doc = json.loads(emit_report(res, "json"))
    assert doc["hops"] == 0 and doc["hgops"] == 0 and doc["depth"] == 0


def test_plainword_tensor_input_accepted():
    from gatecnn.quantize import quantize_activations
    m = prep([
        {"kind": "Conv", "in_channels": 1, "out_channels": 1, "kernel": 1,
         "stride": 1, "weights": b64(np.array([[[[1.0]]]]))},
    ], (1, 1, 1))
    words = quantize_activations(np.array([[[0.5]]]), m.quant.activation_format)
    assert reference_eval(m, words)[0] == 0.5
    res = evaluate(compile_model(m), words)
    assert res.logits[0] == 0.5
