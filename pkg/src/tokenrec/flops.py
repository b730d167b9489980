"""Analytic compute model for the backbone and its serving configurations.

Conventions: one multiply-add is 2 FLOPs; a matmul of (n, m) @ (m, p) costs
2nmp FLOPs. The attention core (scores plus aggregation) of a layer over L
tokens with visible width w costs 4*L*w*d FLOPs, so a full layer costs
4*L^2*d and the window/full ratio is exactly min(w, L)/L. Projections add
8*L*d^2 (query/key/value/output), the gate 2*L*d^2, and the gated
feed-forward 6*L*d*d_ff.

Serving either scores B candidate batches jointly, re-running the user
prefix each time, or decouples the user prefix from per-candidate suffixes:

    joint     = B * (L_u + L_a)^2 * d * c
    decoupled = (L_u^2 + B * (N + L_a)^2) * d * c
    gap       = joint - decoupled

with c the attention cost coefficient (4 FLOPs) and N the compressed user
state length each candidate suffix attends to.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .masks import MaskSchedule
from .numeric import ConfigError

ATTENTION_COST_COEF = 4  # FLOPs per (token pair, channel): scores + aggregation


def attention_flops(seq_len: int, dim: int, window: float | None = None) -> int:
    """Attention-core FLOPs of one layer; window None or inf means full."""
    if seq_len < 1 or dim < 1:
        raise ConfigError("seq_len and dim must be >= 1")
    if window is None or math.isinf(window):
        w = seq_len
    else:
        if window < 1:
            raise ConfigError("window must be >= 1")
        w = min(int(window), seq_len)
    return ATTENTION_COST_COEF * seq_len * w * dim


def window_ratio(seq_len: int, window: float) -> float:
    """Exact cost ratio of a windowed layer to a full layer."""
    if math.isinf(window):
        return 1.0
    return min(int(window), seq_len) / seq_len


def projection_flops(seq_len: int, dim: int) -> int:
    return 8 * seq_len * dim * dim


def gate_flops(seq_len: int, dim: int) -> int:
    return 2 * seq_len * dim * dim


def ffn_flops(seq_len: int, dim: int, ffn_mult: int = 2) -> int:
    return 6 * seq_len * dim * (ffn_mult * dim)


def score_entries(seq_len: int, window: float | None = None) -> int:
    """Analytic count of live score entries of one layer (memory proxy)."""
    if window is None or math.isinf(window):
        return seq_len * seq_len
    return seq_len * min(int(window), seq_len)


@dataclass
class FlopsReport:
    seq_len: int
    dim: int
    per_layer: list[dict] = field(default_factory=list)
    totals: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.totals["total"]

    def to_json(self) -> str:
        return json.dumps(
            {"seq_len": self.seq_len, "dim": self.dim,
             "per_layer": self.per_layer, "totals": self.totals},
            sort_keys=True,
        )

    def csv_rows(self) -> list[str]:
        out = ["layer,window,attention_core,projections,gate,ffn,total,score_entries"]
        for r in self.per_layer:
            out.append(
                f"{r['layer']},{r['window']},{r['attention_core']},"
                f"{r['projections']},{r['gate']},{r['ffn']},{r['total']},{r['score_entries']}"
            )
        return out


def backbone_flops(
    seq_len: int,
    dim: int,
    schedule: MaskSchedule,
    use_gate: bool = True,
    ffn_mult: int = 2,
) -> FlopsReport:
    """Per-layer and total FLOPs of one forward pass over seq_len tokens."""
    report = FlopsReport(seq_len=seq_len, dim=dim)
    totals = {"attention_core": 0, "projections": 0, "gate": 0, "ffn": 0,
              "score_entries": 0, "total": 0}
    for layer in range(schedule.depth):
        w = schedule.window_width(layer)
        core = attention_flops(seq_len, dim, w)
        proj = projection_flops(seq_len, dim)
        gate = gate_flops(seq_len, dim) if use_gate else 0
        ffn = ffn_flops(seq_len, dim, ffn_mult)
        row = {
            "layer": layer,
            "window": "inf" if math.isinf(w) else int(w),
            "attention_core": core,
            "projections": proj,
            "gate": gate,
            "ffn": ffn,
            "total": core + proj + gate + ffn,
            "score_entries": score_entries(seq_len, w),
        }
        report.per_layer.append(row)
        for key in ("attention_core", "projections", "gate", "ffn", "score_entries", "total"):
            totals[key] += row[key]
    report.totals = totals
    return report


@dataclass(frozen=True)
class ServingQuery:
    """One serving scenario: B candidate batches against one user prefix."""

    batch: int          # B, number of candidate batches scored
    user_len: int       # L_u, user prefix length
    suffix_len: int     # L_a, per-candidate suffix length
    state_len: int      # N, compressed user state visible to each suffix
    dim: int = 1        # d; leave 1 for shape-only comparisons

    def __post_init__(self) -> None:
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.user_len < 1 or self.suffix_len < 0 or self.dim < 1:
            raise ConfigError("user_len >= 1, suffix_len >= 0, dim >= 1 required")
        if self.state_len < 0:
            raise ConfigError("state_len must be >= 0")
        if self.state_len > self.user_len:
            raise ConfigError(
                f"state_len {self.state_len} cannot exceed user_len {self.user_len}: "
                "the compressed state is drawn from the user prefix"
            )


@dataclass
class ServingCost:
    joint: int
    decoupled: int
    gap: int
    speedup: float

    def to_json(self) -> str:
        return json.dumps(
            {"joint": self.joint, "decoupled": self.decoupled,
             "gap": self.gap, "speedup": self.speedup},
            sort_keys=True,
        )


def serving_cost(query: ServingQuery) -> ServingCost:
    """Exact joint vs decoupled attention cost and their gap."""
    c = ATTENTION_COST_COEF
    joint = query.batch * (query.user_len + query.suffix_len) ** 2 * query.dim * c
    decoupled = (
        query.user_len ** 2 + query.batch * (query.state_len + query.suffix_len) ** 2
    ) * query.dim * c
    return ServingCost(
        joint=int(joint),
        decoupled=int(decoupled),
        gap=int(joint - decoupled),
        speedup=float(joint) / float(decoupled),
    )


def serving_grid(
    batches: list[int], user_lens: list[int], state_fractions: list[float],
    suffix_len: int, dim: int = 1,
) -> list[dict]:
    """Serving cost over a grid; state_len = round(fraction * user_len)."""
    rows = []
    for b in batches:
        for lu in user_lens:
            for frac in state_fractions:
                n = int(round(frac * lu))
                cost = serving_cost(ServingQuery(b, lu, suffix_len, n, dim))
                rows.append({
                    "batch": b, "user_len": lu, "state_len": n,
                    "suffix_len": suffix_len,
                    "joint": cost.joint, "decoupled": cost.decoupled,
                    "gap": cost.gap, "speedup": cost.speedup,
                })
    return rows


def counted_layer_multiply_adds(seq_len: int, dim: int, window: float | None,
                                use_gate: bool, ffn_mult: int = 2) -> int:
    """Matmul multiply-adds the instrumented tape records for one layer.

    The analytic model above in FLOPs is exactly twice this, except that a
    dense implementation pays full L^2 scores even under a window; pass
    window=None to compare against a dense run.
    """
    core = attention_flops(seq_len, dim, window) // 2
    proj = projection_flops(seq_len, dim) // 2
    gate = gate_flops(seq_len, dim) // 2 if use_gate else 0
    ffn = ffn_flops(seq_len, dim, ffn_mult) // 2
    return core + proj + gate + ffn


def hybrid_vs_full_ratio(seq_len: int, dim: int, schedule: MaskSchedule,
                         use_gate: bool = True, ffn_mult: int = 2) -> float:
    """Total cost of a schedule relative to the all-full schedule of equal depth."""
    hybrid = backbone_flops(seq_len, dim, schedule, use_gate, ffn_mult).total
    full = MaskSchedule(schedule.depth, schedule.depth, (), False, 0)
    return hybrid / backbone_flops(seq_len, dim, full, use_gate, ffn_mult).total
