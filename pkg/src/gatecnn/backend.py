"""Clear-bit gate backend: evaluates Boolean gates on plaintext shadows while
accounting costs as if every gate were homomorphic.

A backend instance is one evaluation context.  Each wire carries a shadow
value and a depth counter (longest depth-weighted gate chain from any fresh
input).  Shadows are bitmasks over ``lanes`` independent evaluations, so one
gate call evaluates the whole batch; counters and depth are counted once per
gate, matching the cost of a single homomorphic evaluation.

Plaintext-constant wires never consume gates: gates whose output is fixed by
a constant input are folded away, which is what makes plaintext-known shifts
and zero weights free.
"""

import json
from dataclasses import dataclass, field

GATE_KINDS = ("AND", "OR", "NAND", "NOR", "XOR", "XNOR", "NOT", "MUX")

CIPHER = 0
CONST = 1


class WireBit:
    """One circuit wire: opaque id, cipher/const kind, shadow mask, depth."""

    __slots__ = ("id", "kind", "shadow", "depth")

    def __init__(self, wid, kind, shadow, depth):
        self.id = wid
        self.kind = kind
        self.shadow = shadow
        self.depth = depth

    @property
    def is_const(self):
        return self.kind == CONST

    def __repr__(self):
        k = "const" if self.kind == CONST else "cipher"
        return f"WireBit(id={self.id}, {k}, depth={self.depth})"


@dataclass
class GateCost:
    depth_weight: int
    hgop_weight: int


class GateCostModel:
    """Per-gate-kind depth and HGOP weights; defines what 'depth' charges.

    The default charges depth 1 and one HGOP to every nontrivial gate and
    MUX; NOT is free (bit negation costs nothing in TFHE-style schemes).
    """

    def __init__(self, costs=None):
        self.costs = dict(_DEFAULT_COSTS)
        if costs:
            for kind, c in costs.items():
                if kind not in GATE_KINDS:
                    raise ValueError(f"unknown gate kind {kind!r}")
                self.costs[kind] = GateCost(int(c.depth_weight), int(c.hgop_weight))
        if self.costs["NOT"].depth_weight != 0:
            raise ValueError("NOT must have depth_weight 0")

    def depth_weight(self, kind):
        return self.costs[kind].depth_weight

    def hgop_weight(self, kind):
        return self.costs[kind].hgop_weight

    @classmethod
    def from_file(cls, path) -> "GateCostModel":
        """Load weights from a JSON file: {"AND": {"depth": 1, "hgop": 1}, ...}."""
        with open(path) as f:
            raw = json.load(f)
        costs = {}
        for kind, entry in raw.items():
            costs[kind] = GateCost(int(entry["depth"]), int(entry["hgop"]))
        return cls(costs)

    def to_dict(self):
        return {k: {"depth": c.depth_weight, "hgop": c.hgop_weight} for k, c in self.costs.items()}


_DEFAULT_COSTS = {
    "AND": GateCost(1, 1),
    "OR": GateCost(1, 1),
    "NAND": GateCost(1, 1),
    "NOR": GateCost(1, 1),
    "XOR": GateCost(1, 1),
    "XNOR": GateCost(1, 1),
    "MUX": GateCost(1, 1),
    "NOT": GateCost(0, 0),
}


@dataclass
class CounterReport:
    """Operation tallies in the columns a cost table reports them."""

    cc_add: int = 0
    pc_mult: int = 0
    pc_shift: int = 0
    cc_com: int = 0
    hgops: int = 0
    max_depth: int = 0

    def merge(self, other: "CounterReport") -> "CounterReport":
        """Combine reports from independent backends: counters add, depth maxes."""
        return CounterReport(
            cc_add=self.cc_add + other.cc_add,
            pc_mult=self.pc_mult + other.pc_mult,
            pc_shift=self.pc_shift + other.pc_shift,
            cc_com=self.cc_com + other.cc_com,
            hgops=self.hgops + other.hgops,
            max_depth=max(self.max_depth, other.max_depth),
        )

    def as_dict(self):
        return {
            "cc_add": self.cc_add,
            "pc_mult": self.pc_mult,
            "cc_mult": 0,  # never emitted: multiplications lower to shifts
            "pc_shift": self.pc_shift,
            "cc_com": self.cc_com,
            "hgops": self.hgops,
            "max_depth": self.max_depth,
        }


@dataclass(frozen=True)
class DepthBudget:
    """Depth the target leveled scheme can absorb before decryption fails."""

    max_depth: int = 32768

    def __post_init__(self):
        if self.max_depth <= 0:
            raise ValueError("max_depth must be positive")


class ClearBackend:
    """Evaluates the gate graph on plaintext shadows with full cost accounting.

    lanes > 1 packs that many independent evaluations into each wire's shadow
    bitmask; costs still count one circuit.
    """

    def __init__(self, lanes=1, cost_model=None, fold_constants=True):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.lanes = lanes
        self.lane_mask = (1 << lanes) - 1
        self.cost_model = cost_model or GateCostModel()
        self.fold_constants = fold_constants
        self._next_id = 0
        self.cc_add = 0
        self.pc_mult = 0
        self.pc_shift = 0
        self.cc_com = 0
        self.hgops = 0
        self.max_depth = 0
        self._const0 = WireBit(self._take_id(), CONST, 0, 0)
        self._const1 = WireBit(self._take_id(), CONST, self.lane_mask, 0)
        # (label, lane_mask) pairs recorded by width-capped accumulators.
        self.overflow_events = []
        self.overflow_label = None

    def _take_id(self):
        i = self._next_id
        self._next_id = i + 1
        return i

    def const(self, value) -> WireBit:
        return self._const1 if value else self._const0

    def fresh_input(self, value) -> WireBit:
        """New cipher wire at depth 0; value is a lane bitmask (0/1 when lanes == 1)."""
        if value & ~self.lane_mask:
            raise ValueError("input value has bits outside the lane mask")
        return WireBit(self._take_id(), CIPHER, value, 0)

    def flag_overflow(self, lanemask):
        if lanemask:
            self.overflow_events.append((self.overflow_label, lanemask))

    # -- gate evaluation -------------------------------------------------

    def gate(self, kind, a, b=None, c=None) -> WireBit:
        """Apply a gate; MUX is gate('MUX', select, then_bit, else_bit)."""
        if kind == "NOT":
            if b is not None or c is not None:
                raise ValueError("NOT takes exactly one input")
            return self._gate1(a)
        if kind == "MUX":
            if b is None or c is None:
                raise ValueError("MUX takes exactly three inputs")
            return self._gate3(a, b, c)
        if kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {kind!r}")
        if b is None or c is not None:
            raise ValueError(f"{kind} takes exactly two inputs")
        return self._gate2(kind, a, b)

    def _emit(self, kind, shadow, depth_in):
        cost = self.cost_model.costs[kind]
        d = depth_in + cost.depth_weight
        self.hgops += cost.hgop_weight
        if d > self.max_depth:
            self.max_depth = d
        return WireBit(self._take_id(), CIPHER, shadow, d)

    def _gate1(self, a):
        shadow = a.shadow ^ self.lane_mask
        if a.kind == CONST:
            return self.const(shadow & 1)
        return self._emit("NOT", shadow, a.depth)

    def _gate2(self, kind, a, b):
        m = self.lane_mask
        sa, sb = a.shadow, b.shadow
        if kind == "AND":
            out = sa & sb
        elif kind == "OR":
            out = sa | sb
        elif kind == "XOR":
            out = sa ^ sb
        elif kind == "NAND":
            out = (sa & sb) ^ m
        elif kind == "NOR":
            out = (sa | sb) ^ m
        else:  # XNOR
            out = (sa ^ sb) ^ m
        ka, kb = a.kind, b.kind
        if ka == CONST and kb == CONST:
            return self.const(out & 1)
        if self.fold_constants and (ka == CONST or kb == CONST):
            cv = sa & 1 if ka == CONST else sb & 1
            live = b if ka == CONST else a
            return self._fold2(kind, cv, live, out)
        d = a.depth if a.depth >= b.depth else b.depth
        return self._emit(kind, out, d)

    def _fold2(self, kind, cv, live, out):
        # Output determined by the constant alone: no gate at all.
        if (kind == "AND" and cv == 0) or (kind == "NOR" and cv == 1):
            return self._const0
        if (kind == "OR" and cv == 1) or (kind == "NAND" and cv == 0):
            return self._const1
        # Output equals the live input: pass the wire through.
        if (kind == "AND" and cv == 1) or (kind == "OR" and cv == 0) \
                or (kind == "XOR" and cv == 0) or (kind == "XNOR" and cv == 1):
            return live
        # Remaining cases (NAND/NOR/XOR/XNOR) negate the live input.
        return self._emit("NOT", out, live.depth)

    def _gate3(self, s, t, e):
        m = self.lane_mask
        out = (s.shadow & t.shadow) | ((s.shadow ^ m) & e.shadow)
        if self.fold_constants:
            if s.kind == CONST:
                return t if (s.shadow & 1) else e
            if t is e:
                return t
            if t.kind == CONST and e.kind == CONST:
                tv, ev = t.shadow & 1, e.shadow & 1
                if tv == ev:
                    return self.const(tv)
                if tv == 1:  # MUX(s, 1, 0) == s
                    return s
                return self._emit("NOT", out, s.depth)  # MUX(s, 0, 1) == !s
        if s.kind == CONST and t.kind == CONST and e.kind == CONST:
            return self.const(out & 1)
        d = max(s.depth, t.depth, e.depth)
        return self._emit("MUX", out, d)

    # -- high-level op attribution (incremented by circuit generators) ----

    def count_cc_add(self, n=1):
        self.cc_add += n

    def count_pc_mult(self, n=1):
        self.pc_mult += n

    def count_pc_shift(self, n=1):
        self.pc_shift += n

    def count_cc_com(self, n=1):
        self.cc_com += n

    def snapshot_report(self) -> CounterReport:
        return CounterReport(
            cc_add=self.cc_add,
            pc_mult=self.pc_mult,
            pc_shift=self.pc_shift,
            cc_com=self.cc_com,
            hgops=self.hgops,
            max_depth=self.max_depth,
        )
