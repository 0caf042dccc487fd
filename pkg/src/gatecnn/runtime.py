"""Plan execution on a gate backend, the pure fixed-point reference oracle,
and report emission.

The oracle (reference_eval) performs the same quantized arithmetic as the
circuits - floor shifts, exact accumulation wrapping at the 16-bit cap,
saturating requantization, max and relu - using plain integers and no gates.
It defines semantic ground truth: evaluate() must match it bit for bit.
"""

import json
from dataclasses import dataclass

import numpy as np

from .backend import ClearBackend, CounterReport, GateCostModel
from .fixedpoint import FixedFormat, PlainWord, encode_raw, round_half_even
from .model import ACCUM_CAP_BITS, ModelSpec, infer_shapes
from .quantize import quantize_activations_raw
from .compile import AffineOp, EvaluationPlan, MacOp, MaxPoolOp, ReluOp, RequantOp, accumulation_shift
from . import circuits as C


@dataclass
class InferenceResult:
    logits: list                 # decoded fixed-point values
    raw_logits: np.ndarray       # int64 raw accumulator units
    predicted_class: int
    report: CounterReport
    depth_trace: list            # simulated per-layer max-depth increase
    overflow_events: list        # (layer_index, neuron_tag)


def encode_image(pixels, fmt: FixedFormat) -> np.ndarray:
    """Pixels in [0, 255] to activation-format raw integers, shape (H, W, C)."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    if x.ndim == 2:
        x = x[:, :, None]
    return quantize_activations_raw(x, fmt)


# -- circuit execution --------------------------------------------------------


def _zero_word(backend, fmt):
    return C.Word([backend.const(0)] * fmt.total_bits, fmt)


def _eval_mac(backend, op, slots, act_fmt, cap):
    up = op.acc_shift
    max_up = max((k + up for _, k in op.pos_terms + op.neg_terms if k + up > 0), default=0)
    b_eff = act_fmt.total_bits + max_up

    def shifted(src, k):
        word = C.arithmetic_shift(backend, slots[src], k + up)
        return C.sign_extend_word(word, b_eff)

    pos = [shifted(s, k) for s, k in op.pos_terms]
    neg = [shifted(s, k) for s, k in op.neg_terms]
    if not pos and not neg:
        return _zero_word(backend, act_fmt)
    return C.signed_accumulate(backend, pos, neg, cap)


def _eval_affine(backend, op, word, frac, cap):
    if op.count_pc_mult:
        backend.count_pc_mult()
    if op.scale_zero:
        return C.word_from_plain(backend, encode_raw(_wrap(op.const_raw, cap), FixedFormat(cap, frac)))
    y = word
    if op.scale_exp:
        y = C.arithmetic_shift(backend, y, op.scale_exp, count=False)
        if y.width > cap:
            y = C.truncate_word(backend, y, cap, flag_wrap=True)
    const_adj = op.const_raw
    if op.scale_neg:
        # NOT gives -y-1; the +1 that completes the negation rides the
        # constant word, so sign handling costs no extra adder.
        y = C.Word([backend.gate("NOT", b) for b in y.bits], y.format)
        const_adj += 1
    if const_adj == 0:
        return y
    cw = C.word_from_plain(backend, encode_raw(_wrap(const_adj, cap), FixedFormat(cap, frac)))
    out = C._modular_add(backend, y, cw, cap)
    backend.count_cc_add()
    return out


def run_plan(plan: EvaluationPlan, backend: ClearBackend, images_raw: np.ndarray):
    """Execute a plan; images_raw is (lanes, H, W, C) raw activation units.

    Returns (raw logits (lanes, K), per-layer depth trace, overflow events
    as (layer, neuron, lane_mask) triples).
    """
    lanes = backend.lanes
    h, w, c = plan.input_shape
    if images_raw.shape != (lanes, h, w, c):
        raise ValueError(f"image shape {images_raw.shape} != (lanes={lanes}, {h}, {w}, {c})")
    act_fmt = plan.act_format
    frac = act_fmt.frac_bits
    cap = plan.cap_bits

    slots = [None] * plan.n_slots
    flat = np.ascontiguousarray(images_raw.reshape(lanes, -1))
    for j in range(h * w * c):
        slots[j] = C.word_from_raw_lanes(backend, flat[:, j], act_fmt)

    trace = []
    prev_depth = backend.max_depth
    for lp in plan.layers:
        for op in lp.ops:
            backend.overflow_label = (lp.index, op.tag)
            if isinstance(op, MacOp):
                slots[op.out] = _eval_mac(backend, op, slots, act_fmt, cap)
            elif isinstance(op, AffineOp):
                slots[op.out] = _eval_affine(backend, op, slots[op.src], frac, cap)
            elif isinstance(op, ReluOp):
                slots[op.out] = C.build_relu(backend, slots[op.src])
            elif isinstance(op, MaxPoolOp):
                slots[op.out] = C.build_maxpool(
                    backend, [slots[s] for s in op.srcs], op.kernel)
            elif isinstance(op, RequantOp):
                slots[op.out] = C.saturate_to(backend, slots[op.src], act_fmt.total_bits)
            else:
                raise TypeError(f"unknown plan op {type(op).__name__}")
        trace.append(backend.max_depth - prev_depth)
        prev_depth = backend.max_depth

    raw = np.stack([C.word_shadow_raws(backend, slots[s]) for s in plan.output_slots], axis=1)
    events = [(label[0], label[1], mask) for label, mask in backend.overflow_events]
    return raw, trace, events


def _results_from_run(plan, report, raw, trace, events, lanes):
    out = []
    scale = 1 << plan.act_format.frac_bits
    for lane in range(lanes):
        lane_events = [(li, tag) for li, tag, mask in events if (mask >> lane) & 1]
        logits = raw[lane].astype(np.float64) / scale
        out.append(InferenceResult(
            logits=[float(v) for v in logits],
            raw_logits=raw[lane].copy(),
            predicted_class=int(np.argmax(logits)),
            report=report,
            depth_trace=list(trace),
            overflow_events=lane_events,
        ))
    return out


def evaluate(plan: EvaluationPlan, image, backend: ClearBackend = None) -> InferenceResult:
    """Run one image through the compiled circuits on the clear backend."""
    raw = _image_to_raw(image, plan)
    backend = backend or ClearBackend(lanes=1)
    if backend.lanes != 1:
        raise ValueError("evaluate() takes a single image; use evaluate_batch for lanes > 1")
    before = backend.snapshot_report()
    raw_logits, trace, events = run_plan(plan, backend, raw[None, :, :, :])
    after = backend.snapshot_report()
    report = CounterReport(
        cc_add=after.cc_add - before.cc_add,
        pc_mult=after.pc_mult - before.pc_mult,
        pc_shift=after.pc_shift - before.pc_shift,
        cc_com=after.cc_com - before.cc_com,
        hgops=after.hgops - before.hgops,
        max_depth=after.max_depth,
    )
    return _results_from_run(plan, report, raw_logits, trace, events, 1)[0]


def evaluate_batch(plan: EvaluationPlan, images, workers: int = 1,
                   cost_model: GateCostModel = None) -> list:
    """Evaluate many images; workers split the batch over independent
    backends, and results are bitwise independent of the worker count."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    raws = np.stack([_image_to_raw(img, plan) for img in images])
    n = raws.shape[0]
    results = []
    for chunk in np.array_split(np.arange(n), min(workers, n)):
        if chunk.size == 0:
            continue
        backend = ClearBackend(lanes=int(chunk.size), cost_model=cost_model)
        raw_logits, trace, events = run_plan(plan, backend, raws[chunk])
        results.extend(_results_from_run(
            plan, backend.snapshot_report(), raw_logits, trace, events, int(chunk.size)))
    return results


def _image_to_raw(image, plan) -> np.ndarray:
    h, w, c = plan.input_shape
    arr = np.asarray(image)
    if arr.dtype == object:  # PlainWord tensor
        arr = np.vectorize(lambda pw: pw.raw, otypes=[np.int64])(arr)
    if arr.ndim == 2 and c == 1:
        arr = arr[:, :, None]
    if arr.shape != (h, w, c):
        raise ValueError(f"image shape {arr.shape} does not match plan input {(h, w, c)}")
    return arr.astype(np.int64)


# -- reference oracle ---------------------------------------------------------


def _wrap(v, cap=ACCUM_CAP_BITS):
    half = 1 << (cap - 1)
    return ((v + half) & ((1 << cap) - 1)) - half


def _shift_floor(v, k):
    return v << k if k >= 0 else v >> (-k)


class _Overflow:
    def __init__(self):
        self.events = []  # (layer, tag, lane-bool array over batch)

    def check(self, layer, exact, wrapped, tags):
        bad = exact != wrapped
        if bad.any():
            flat = bad.reshape(bad.shape[0], -1)
            tags_flat = tags.reshape(-1)
            for t in np.nonzero(flat.any(axis=0))[0]:
                self.events.append((layer, int(tags_flat[t]), flat[:, t].copy()))


def _affine_reference(x, scale_exp, scale_neg, scale_zero, const_raw, ovf, layer, tags):
    """Per-channel y = sign * floor(x * 2**e) + const on the trailing axis,
    wrapping at the accumulator cap exactly as the circuits do."""
    e = np.asarray(scale_exp, dtype=np.int64)
    neg = np.zeros(e.shape, bool) if scale_neg is None else np.asarray(scale_neg, bool)
    zero = np.zeros(e.shape, bool) if scale_zero is None else np.asarray(scale_zero, bool)
    const = np.asarray(const_raw, dtype=np.int64)
    y = np.where(zero, 0, x)
    shifted = np.where(e >= 0, y << np.maximum(e, 0), y >> np.maximum(-e, 0))
    w1 = _wrap(shifted)
    ovf.check(layer, shifted, w1, tags)
    y2 = np.where(neg, -w1, w1)
    exact = y2 + const
    out = _wrap(exact)
    ovf.check(layer, exact, out, tags)
    return out


def reference_eval_batch(m: ModelSpec, images_raw: np.ndarray):
    """Oracle forward pass on raw activation units, shape (N, H, W, C).

    Returns (raw logits (N, K), overflow events as (layer, tag, lane bools)).
    """
    if not m.is_quantized():
        raise ValueError("reference_eval needs a quantized model")
    shapes = infer_shapes(m)
    x = np.asarray(images_raw, dtype=np.int64)
    n = x.shape[0]
    h, w, c = m.input_shape
    if x.shape != (n, h, w, c):
        raise ValueError(f"image batch shape {x.shape} != (N, {h}, {w}, {c})")
    frac = m.quant.activation_format.frac_bits
    act_min = m.quant.activation_format.raw_min
    act_max = m.quant.activation_format.raw_max
    ovf = _Overflow()

    for i, layer in enumerate(m.layers):
        oh, ow, oc = shapes[i]
        if layer.kind == "Conv":
            q = layer.qweights
            e_hi = int(q.exponent[~q.zero].max()) if (~q.zero).any() else 0
            e_lo = int(q.exponent[~q.zero].min()) if (~q.zero).any() else 0
            n_terms = layer.in_channels * layer.kernel * layer.kernel
            up = accumulation_shift(n_terms, m.quant.activation_format.total_bits,
                                    e_hi, e_lo)
            pad = 0 if layer.padding == "valid" else (layer.kernel - 1) // 2
            if pad:
                xp = np.zeros((n, h + 2 * pad, w + 2 * pad, x.shape[3]), dtype=np.int64)
                xp[:, pad:pad + h, pad:pad + w, :] = x
            else:
                xp = x
            acc = np.zeros((n, oh, ow, oc), dtype=np.int64)
            s = layer.stride
            for co in range(oc):
                for ci in range(layer.in_channels):
                    for kh in range(layer.kernel):
                        for kw in range(layer.kernel):
                            if q.zero[co, ci, kh, kw]:
                                continue
                            patch = xp[:, kh:kh + (oh - 1) * s + 1:s, kw:kw + (ow - 1) * s + 1:s, ci]
                            t = _shift_floor(patch, int(q.exponent[co, ci, kh, kw]) + up)
                            if q.sign[co, ci, kh, kw] > 0:
                                acc[:, :, :, co] += t
                            else:
                                acc[:, :, :, co] -= t
            tags = np.arange(oh * ow * oc).reshape(oh, ow, oc)
            wrapped = _wrap(acc)
            ovf.check(i, acc, wrapped, tags)
            x = wrapped
            if layer.out_scale_exp != 0 or layer.bias is not None or up:
                braw = np.zeros(oc, dtype=np.int64)
                if layer.bias is not None:
                    braw = np.array([round_half_even(b * (1 << frac)) for b in layer.bias], dtype=np.int64)
                x = _affine_reference(
                    x, np.full(oc, layer.out_scale_exp - up), None, None, braw, ovf, i, tags)
        elif layer.kind == "FC":
            q = layer.qweights
            e_hi = int(q.exponent[~q.zero].max()) if (~q.zero).any() else 0
            e_lo = int(q.exponent[~q.zero].min()) if (~q.zero).any() else 0
            up = accumulation_shift(layer.in_features, m.quant.activation_format.total_bits,
                                    e_hi, e_lo)
            flat = x.reshape(n, -1)
            acc = np.zeros((n, oc), dtype=np.int64)
            signed = np.where(q.zero, 0, q.sign).astype(np.int64)  # (out, in)
            if (~q.zero).any():
                for e in np.unique(q.exponent[~q.zero]):
                    wmat = np.where((q.exponent == e) & ~q.zero, signed, 0)
                    acc += _shift_floor(flat, int(e) + up) @ wmat.T
            acc = acc.reshape(n, 1, 1, oc)
            tags = np.arange(oc).reshape(1, 1, oc)
            wrapped = _wrap(acc)
            ovf.check(i, acc, wrapped, tags)
            x = wrapped
            if layer.out_scale_exp != 0 or layer.bias is not None or up:
                braw = np.zeros(oc, dtype=np.int64)
                if layer.bias is not None:
                    braw = np.array([round_half_even(b * (1 << frac)) for b in layer.bias], dtype=np.int64)
                x = _affine_reference(
                    x, np.full(oc, layer.out_scale_exp - up), None, None, braw, ovf, i, tags)
        elif layer.kind == "BatchNorm":
            tags = np.arange(oh * ow * oc).reshape(oh, ow, oc)
            x = _affine_reference(
                x, layer.scale_exp.astype(np.int64),
                layer.scale_sign < 0, layer.scale_zero,
                layer.offset_raw, ovf, i, tags)
        elif layer.kind == "ReLU":
            x = np.maximum(x, 0)
        elif layer.kind == "MaxPool":
            k, s = layer.kernel, layer.stride
            out = np.full((n, oh, ow, oc), np.iinfo(np.int64).min, dtype=np.int64)
            for kh in range(k):
                for kw in range(k):
                    out = np.maximum(
                        out, x[:, kh:kh + (oh - 1) * s + 1:s, kw:kw + (ow - 1) * s + 1:s, :])
            x = out
        is_last = i == len(m.layers) - 1
        next_kind = None if is_last else m.layers[i + 1].kind
        wide = layer.kind in ("Conv", "FC", "BatchNorm", "ReLU")
        if wide and not is_last and next_kind not in ("BatchNorm", "ReLU"):
            x = np.clip(x, act_min, act_max)
        h, w, c = shapes[i]

    return x.reshape(n, -1), ovf.events


def reference_eval(m: ModelSpec, image) -> np.ndarray:
    """Decoded logits of the oracle on one image (raw ints or PlainWords)."""
    arr = np.asarray(image)
    if arr.dtype == object:
        arr = np.vectorize(lambda pw: pw.raw, otypes=[np.int64])(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    raw, _ = reference_eval_batch(m, arr[None])
    return raw[0].astype(np.float64) / (1 << m.quant.activation_format.frac_bits)


# -- reports -------------------------------------------------------------------


def emit_report(result: InferenceResult, format: str = "text") -> str:
    """One row in the usual cost-table column order, or its JSON twin."""
    r = result.report
    hops = r.cc_add + r.pc_mult + r.pc_shift + r.cc_com
    if format == "json":
        doc = {
            "hops": hops,
            "cc_add": r.cc_add,
            "pc_mult": r.pc_mult,
            "cc_mult": 0,
            "pc_shift": r.pc_shift,
            "cc_com": r.cc_com,
            "hgops": r.hgops,
            "depth": r.max_depth,
            "predicted_class": result.predicted_class,
            "logits": result.logits,
            "raw_logits": [int(v) for v in result.raw_logits],
            "depth_trace": result.depth_trace,
            "overflow_events": [[int(a), int(b)] for a, b in result.overflow_events],
        }
        return json.dumps(doc, sort_keys=True)
    cols = ["HOPs", "CC_Add", "PC_Mult", "CC_Mult", "PC_Shift", "CC_Com", "HGOPs", "Depth", "Pred"]
    vals = [hops, r.cc_add, r.pc_mult, 0, r.pc_shift, r.cc_com, r.hgops, r.max_depth,
            result.predicted_class]
    width = max(len(c) for c in cols) + 2
    head = "".join(c.rjust(width) for c in cols)
    row = "".join(str(v).rjust(width) for v in vals)
    return head + "\n" + row
