"""Compilation of layer stacks into gate-level evaluation plans, analytic
multiplicative-depth estimation, and depth-budget checking.

Every Conv/FC multiply-accumulate lowers to a plaintext-controlled shift of
the input word feeding a mixed-bitwidth accumulator; negative weights route
through the accumulator's subtractor side.  Batch-norm and bias stages lower
to a power-of-2 scale (pure rewiring, attributed as one plaintext multiply)
plus a fixed-point constant add.  The compiled plan therefore contains no
ciphertext-ciphertext multiplication anywhere.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .backend import ClearBackend, DepthBudget, GateCostModel
from .fixedpoint import FixedFormat, round_half_even
from .model import ACCUM_CAP_BITS, ModelError, ModelSpec, infer_shapes
from . import circuits as C


class BudgetExceeded(RuntimeError):
    def __init__(self, total, budget, layer_index):
        super().__init__(
            f"estimated depth {total} exceeds budget {budget} "
            f"(first exhausted at layer {layer_index})"
        )
        self.total = total
        self.budget = budget
        self.layer_index = layer_index


# -- measured depth-cost table ----------------------------------------------


class DepthCostTable:
    """Per-width multiplicative-depth of each generator, measured by probing
    the actual circuits under the active gate cost model (never hand-entered).

    DA[a]: a-bit adder; DM[b]: b-bit multiplier (0: multiplies are shifts);
    DR[c]: c-bit ReLU unit; DMx[d]: d-bit max unit.  The affine and requantize
    probes cover the batch-norm/bias and activation-narrowing stages this
    compiler adds around them.
    """

    def __init__(self, cost_model: GateCostModel, act_bits: int, cap_bits: int = ACCUM_CAP_BITS):
        self.cost_model = cost_model
        self.act_bits = act_bits
        self.cap_bits = cap_bits
        self.DA = {}
        self.DM = {}
        self.DR = {}
        self.DMx = {}
        self.AFF = {}
        self.REQ = {}

    def _probe_word(self, backend, width):
        return C.Word([backend.fresh_input(0) for _ in range(width)], FixedFormat(width, 0))

    def _measure(self, cache, width, build):
        if width not in cache:
            if width < 1:
                raise ModelError(f"no cost-table entry for width {width}")
            backend = ClearBackend(lanes=1, cost_model=self.cost_model)
            out = build(backend, width)
            cache[width] = C.word_max_depth(out)
        return cache[width]

    def da(self, w):
        return self._measure(
            self.DA, w,
            lambda bk, n: C.build_adder(bk, self._probe_word(bk, n), self._probe_word(bk, n), count=False),
        )

    def dm(self, w):
        # Multiplications are eliminated by shift lowering.
        return self.DM.get(w, 0)

    def dr(self, w):
        return self._measure(self.DR, w, lambda bk, n: C.build_relu(bk, self._probe_word(bk, n)))

    def dmx(self, w):
        return self._measure(
            self.DMx, w,
            lambda bk, n: C.build_max(bk, self._probe_word(bk, n), self._probe_word(bk, n)),
        )

    def aff(self, w):
        # Cipher-operand probe of the scale/negate/constant-add stage; an
        # upper bound for any plaintext constant, since folding only removes
        # gates from paths.
        def build(bk, n):
            x = self._probe_word(bk, n)
            y = C.arithmetic_shift(bk, x, -1, count=False)
            y = C.sign_extend_word(y, n)
            neg = C.Word([bk.gate("NOT", b) for b in y.bits], y.format)
            return C._modular_add(bk, neg, self._probe_word(bk, n), n)

        return self._measure(self.AFF, w, build)

    def req(self, w):
        if w <= self.act_bits:
            return 0
        return self._measure(self.REQ, w, lambda bk, n: C.saturate_to(bk, self._probe_word(bk, n), self.act_bits))


def _ceil_log2(n: int) -> int:
    return 0 if n <= 1 else math.ceil(math.log2(n))


def estimate_layer_depth(layer, cost: DepthCostTable) -> int:
    """Per-layer analytic depth: IN*ceil(log2 KC^2)*(DA[a]+DM[b]) for Conv,
    tree-height*(DA+DM) for FC, DR[c] for ReLU, ceil(log2 KP^2)*DMx[d] for
    MaxPool, and the affine-stage bound for folded BatchNorm.

    The accumulation multiplier is raised to ceil(log2 n_terms)+1 when that
    exceeds the channel form, so the estimate stays an upper bound on the
    simulated depth for degenerate shapes (e.g. 1x1 kernels).
    """
    a = cost.cap_bits
    if layer.kind == "Conv":
        n_terms = layer.in_channels * layer.kernel * layer.kernel
        if n_terms <= 1:
            return 0
        m = max(layer.in_channels * _ceil_log2(layer.kernel**2), _ceil_log2(n_terms) + 1)
        return m * (cost.da(a) + cost.dm(a))
    if layer.kind == "FC":
        n = layer.in_features
        if n <= 1:
            return 0
        return (_ceil_log2(n) + 1) * (cost.da(a) + cost.dm(a))
    if layer.kind == "ReLU":
        return cost.dr(a)
    if layer.kind == "MaxPool":
        return _ceil_log2(layer.kernel**2) * cost.dmx(cost.act_bits)
    if layer.kind == "BatchNorm":
        return cost.aff(a)
    raise ModelError(f"unsupported layer kind {layer.kind}")


# -- plan ops ---------------------------------------------------------------


@dataclass(frozen=True)
class MacOp:
    out: int
    pos_terms: tuple   # ((src_slot, weight_exp), ...)
    neg_terms: tuple
    tag: int           # neuron index within the layer
    acc_shift: int = 0  # extra left shift: terms accumulate at frac+acc_shift


def accumulation_shift(n_terms: int, act_bits: int, e_hi: int, e_lo: int,
                       cap_bits: int = ACCUM_CAP_BITS) -> int:
    """Extra fractional bits a layer's accumulator can afford.

    Shifting every term left by this amount keeps small-weight products
    (which a shift straight to the activation scale would floor away) while
    guaranteeing the worst-case sum still fits the accumulator cap.  Only
    negative exponents (e_lo, the layer's smallest) benefit, and the layer's
    largest exponent e_hi bounds the worst-case term magnitude.
    """
    if n_terms < 1 or e_lo >= 0:
        return 0
    worst = n_terms * (1 << (act_bits - 1)) << max(e_hi, 0)
    headroom = (1 << (cap_bits - 1)) - 1
    spare = 0
    while worst << (spare + 1) <= headroom:
        spare += 1
    return min(spare, -e_lo)


@dataclass(frozen=True)
class AffineOp:
    out: int
    src: int
    scale_exp: int
    scale_neg: bool
    scale_zero: bool
    const_raw: int     # raw accumulator units (binary point at act frac_bits)
    count_pc_mult: bool
    tag: int


@dataclass(frozen=True)
class ReluOp:
    out: int
    src: int
    tag: int


@dataclass(frozen=True)
class MaxPoolOp:
    out: int
    srcs: tuple
    kernel: int
    tag: int


@dataclass(frozen=True)
class RequantOp:
    out: int
    src: int
    tag: int


@dataclass
class LayerPlan:
    index: int
    kind: str
    letter: str
    ops: list
    lmd: int


@dataclass
class EvaluationPlan:
    """Topologically ordered op schedule plus its analytic depth ledger."""

    name: str
    topology: str
    input_shape: tuple
    act_format: FixedFormat
    cap_bits: int
    layers: list
    n_slots: int
    output_slots: tuple
    lmd_per_layer: list = field(default_factory=list)
    budget: DepthBudget = field(default_factory=DepthBudget)

    @property
    def total_estimate(self) -> int:
        return sum(self.lmd_per_layer)

    def count_macs(self) -> int:
        """Shift-attributed multiply-accumulates in the plan."""
        n = 0
        for lp in self.layers:
            for op in lp.ops:
                if isinstance(op, MacOp):
                    n += len(op.pos_terms) + len(op.neg_terms)
        return n


def count_nonzero_macs(m: ModelSpec) -> int:
    """Independent plaintext count of nonzero-weight MACs (in-bounds taps
    only); computed from the model alone, never from the plan."""
    shapes = infer_shapes(m)
    h, w, c = m.input_shape
    total = 0
    for i, layer in enumerate(m.layers):
        if layer.kind == "Conv":
            q = layer.qweights
            nz_per_tap = (~q.zero).sum(axis=0)  # (in_c, k, k) summed over out_c
            oh, ow, _ = shapes[i]
            if layer.padding == "valid":
                total += int(nz_per_tap.sum()) * oh * ow
            else:
                pad = (layer.kernel - 1) // 2
                for kh in range(layer.kernel):
                    for kw in range(layer.kernel):
                        rows = sum(1 for o in range(oh) if 0 <= o * layer.stride + kh - pad < h)
                        cols = sum(1 for o in range(ow) if 0 <= o * layer.stride + kw - pad < w)
                        total += int(nz_per_tap[:, kh, kw].sum()) * rows * cols
        elif layer.kind == "FC":
            total += int((~layer.qweights.zero).sum())
        h, w, c = shapes[i]
    return total


# -- compilation -------------------------------------------------------------


def _bias_raw(layer, frac_bits):
    if layer.bias is None:
        return None
    return np.array([round_half_even(b * (1 << frac_bits)) for b in layer.bias], dtype=np.int64)


def compile_model(m: ModelSpec, cost_model: GateCostModel = None,
                  budget: DepthBudget = None, strict: bool = False) -> EvaluationPlan:
    """Lower a folded, quantized model to a gate-level evaluation plan."""
    cost_model = cost_model or GateCostModel()
    budget = budget or DepthBudget()
    if not m.is_quantized():
        raise ModelError("model has float weights; quantize before compiling")
    for layer in m.layers:
        if layer.kind == "BatchNorm" and not layer.folded:
            raise ModelError("model has unfolded BatchNorm layers; fold before compiling")

    act_fmt = m.quant.activation_format
    act_bits = act_fmt.total_bits
    cap = ACCUM_CAP_BITS
    cost = DepthCostTable(cost_model, act_bits, cap)
    shapes = infer_shapes(m)

    h, w, c = m.input_shape
    slot_grid = np.arange(h * w * c, dtype=np.int64).reshape(h, w, c)
    next_slot = h * w * c
    frac = act_fmt.frac_bits

    layer_plans = []
    lmds = []
    for i, layer in enumerate(m.layers):
        ops = []
        lmd = estimate_layer_depth(layer, cost)
        is_last = i == len(m.layers) - 1
        next_kind = None if is_last else m.layers[i + 1].kind
        wide = False  # does this layer leave words wider than act_bits?

        if layer.kind in ("Conv", "FC"):
            q = layer.qweights
            nzmask = ~q.zero
            e_hi = int(q.exponent[nzmask].max()) if nzmask.any() else 0
            e_lo = int(q.exponent[nzmask].min()) if nzmask.any() else 0
            if layer.kind == "Conv":
                oh, ow, oc = shapes[i]
                pad = 0 if layer.padding == "valid" else (layer.kernel - 1) // 2
                n_terms = layer.in_channels * layer.kernel * layer.kernel
                acc_shift = accumulation_shift(n_terms, act_bits, e_hi, e_lo, cap)
                out_grid = np.zeros((oh, ow, oc), dtype=np.int64)
                tag = 0
                for yo in range(oh):
                    for xo in range(ow):
                        for co in range(oc):
                            pos, neg = [], []
                            for ci in range(layer.in_channels):
                                for kh in range(layer.kernel):
                                    yi = yo * layer.stride + kh - pad
                                    if not (0 <= yi < h):
                                        continue
                                    for kw in range(layer.kernel):
                                        xi = xo * layer.stride + kw - pad
                                        if not (0 <= xi < w):
                                            continue
                                        if q.zero[co, ci, kh, kw]:
                                            continue
                                        term = (int(slot_grid[yi, xi, ci]), int(q.exponent[co, ci, kh, kw]))
                                        (pos if q.sign[co, ci, kh, kw] > 0 else neg).append(term)
                            ops.append(MacOp(next_slot, tuple(pos), tuple(neg), tag, acc_shift))
                            out_grid[yo, xo, co] = next_slot
                            next_slot += 1
                            tag += 1
            else:
                flat = slot_grid.reshape(-1)
                oc = layer.out_features
                acc_shift = accumulation_shift(layer.in_features, act_bits, e_hi, e_lo, cap)
                out_grid = np.zeros((1, 1, oc), dtype=np.int64)
                for co in range(oc):
                    pos, neg = [], []
                    for ci in range(layer.in_features):
                        if q.zero[co, ci]:
                            continue
                        term = (int(flat[ci]), int(q.exponent[co, ci]))
                        (pos if q.sign[co, ci] > 0 else neg).append(term)
                    ops.append(MacOp(next_slot, tuple(pos), tuple(neg), co, acc_shift))
                    out_grid[0, 0, co] = next_slot
                    next_slot += 1
            wide = True
            bias = _bias_raw(layer, frac)
            # normalize the accumulation scale back to the activation frac and
            # apply the stage's own rescale/bias; a shift-only affine is pure
            # rewiring and costs no gates
            if layer.out_scale_exp != 0 or bias is not None or acc_shift:
                shaped = out_grid.reshape(-1, out_grid.shape[-1])
                new_grid = np.zeros_like(shaped)
                tag = 0
                for pix in range(shaped.shape[0]):
                    for co in range(shaped.shape[1]):
                        ops.append(AffineOp(
                            out=next_slot, src=int(shaped[pix, co]),
                            scale_exp=layer.out_scale_exp - acc_shift,
                            scale_neg=False, scale_zero=False,
                            const_raw=int(bias[co]) if bias is not None else 0,
                            count_pc_mult=layer.out_scale_exp != 0, tag=tag))
                        new_grid[pix, co] = next_slot
                        next_slot += 1
                        tag += 1
                out_grid = new_grid.reshape(out_grid.shape)
                if bias is not None:
                    lmd += cost.aff(cap)
            slot_grid = out_grid

        elif layer.kind == "BatchNorm":
            hh, ww, cc = shapes[i]
            out_grid = np.zeros((hh, ww, cc), dtype=np.int64)
            tag = 0
            for yo in range(hh):
                for xo in range(ww):
                    for co in range(cc):
                        ops.append(AffineOp(
                            out=next_slot, src=int(slot_grid[yo, xo, co]),
                            scale_exp=int(layer.scale_exp[co]),
                            scale_neg=bool(layer.scale_sign[co] < 0),
                            scale_zero=bool(layer.scale_zero[co]),
                            const_raw=int(layer.offset_raw[co]),
                            count_pc_mult=True, tag=tag))
                        out_grid[yo, xo, co] = next_slot
                        next_slot += 1
                        tag += 1
            slot_grid = out_grid
            wide = True

        elif layer.kind == "ReLU":
            hh, ww, cc = shapes[i]
            out_grid = np.zeros((hh, ww, cc), dtype=np.int64)
            flat_in = slot_grid.reshape(-1)
            flat_out = out_grid.reshape(-1)
            for j in range(flat_in.size):
                ops.append(ReluOp(next_slot, int(flat_in[j]), j))
                flat_out[j] = next_slot
                next_slot += 1
            slot_grid = out_grid
            wide = True

        elif layer.kind == "MaxPool":
            oh, ow, cc = shapes[i]
            out_grid = np.zeros((oh, ow, cc), dtype=np.int64)
            tag = 0
            for yo in range(oh):
                for xo in range(ow):
                    for co in range(cc):
                        srcs = tuple(
                            int(slot_grid[yo * layer.stride + kh, xo * layer.stride + kw, co])
                            for kh in range(layer.kernel)
                            for kw in range(layer.kernel)
                        )
                        ops.append(MaxPoolOp(next_slot, srcs, layer.kernel, tag))
                        out_grid[yo, xo, co] = next_slot
                        next_slot += 1
                        tag += 1
            slot_grid = out_grid

        # Activations re-enter Conv/FC/MaxPool at the activation width; only
        # the final layer keeps its widened accumulator format (the logits).
        if wide and not is_last and next_kind not in ("BatchNorm", "ReLU"):
            flat = slot_grid.reshape(-1)
            new_flat = np.zeros_like(flat)
            for j in range(flat.size):
                ops.append(RequantOp(next_slot, int(flat[j]), j))
                new_flat[j] = next_slot
                next_slot += 1
            slot_grid = new_flat.reshape(slot_grid.shape)
            lmd += cost.req(cap)

        layer_plans.append(LayerPlan(i, layer.kind, layer.letter, ops, lmd))
        lmds.append(lmd)

    plan = EvaluationPlan(
        name=m.name,
        topology=m.topology,
        input_shape=m.input_shape,
        act_format=act_fmt,
        cap_bits=cap,
        layers=layer_plans,
        n_slots=next_slot,
        output_slots=tuple(int(s) for s in slot_grid.reshape(-1)),
        lmd_per_layer=lmds,
        budget=budget,
    )
    if strict and plan.total_estimate > budget.max_depth:
        report = check_budget(plan, budget)
        raise BudgetExceeded(plan.total_estimate, budget.max_depth, report.first_exhausted)
    return plan


# -- budget verdicts ---------------------------------------------------------


@dataclass
class BudgetReport:
    passed: bool
    total: int
    budget: int
    topology: str
    per_layer: list          # (letter, lmd) pairs
    first_exhausted: int     # layer index, or -1

    def as_dict(self):
        return {
            "verdict": "PASS" if self.passed else "FAIL",
            "topology": self.topology,
            "per_layer_md": [lmd for _, lmd in self.per_layer],
            "total_md": self.total,
            "budget": self.budget,
            "first_exhausted_layer": self.first_exhausted,
        }


def check_budget(plan: EvaluationPlan, budget: DepthBudget = None) -> BudgetReport:
    """PASS/FAIL verdict plus the per-layer depth ledger."""
    budget = budget or plan.budget
    total = plan.total_estimate
    first = -1
    acc = 0
    for lp in plan.layers:
        acc += lp.lmd
        if acc > budget.max_depth and first < 0:
            first = lp.index
    return BudgetReport(
        passed=total <= budget.max_depth,
        total=total,
        budget=budget.max_depth,
        topology=plan.topology,
        per_layer=[(lp.letter, lp.lmd) for lp in plan.layers],
        first_exhausted=first,
    )


def format_ledger(report: BudgetReport, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report.as_dict(), indent=2, sort_keys=True)
    md = "-".join(str(lmd) for _, lmd in report.per_layer)
    lines = [
        f"topology    {report.topology}",
        f"MD overhead {md}",
        f"total       {report.total}",
        f"budget      {report.budget}",
        f"verdict     {'PASS' if report.passed else 'FAIL'}",
    ]
    if not report.passed:
        lines.append(f"first layer exhausting the budget: {report.first_exhausted}")
    return "\n".join(lines)


def message_size(input_pixels: int, polys_per_pixel: int, poly_bytes: int) -> int:
    """Encrypted request size in bytes: pixels x polynomials x polynomial size."""
    if input_pixels < 0 or polys_per_pixel < 0 or poly_bytes < 0:
        raise ValueError("arguments must be non-negative")
    return input_pixels * polys_per_pixel * poly_bytes
