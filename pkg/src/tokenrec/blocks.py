"""Interaction block: rotary positions, masked attention, gating, SwiGLU.

One block computes, from its input rows X:

    Xn   = RMSNorm(X) * attn_gain
    A    = softmax(rotate(Xn Wq) rotate(Xn Wk)^T / sqrt(dk) + mask) (Xn Wv) Wo
    I    = X + sigmoid(X Wg) * A          (gate reads the raw input)
    In   = RMSNorm(I) * ffn_gain
    out  = I + (swish(In Wa) * (In Wb)) Wc

The gate is the non-linear residual path; with gating disabled the attention
output is added back unscaled. Rotation angles depend on the type-aware
positions, so tokens sharing a position (all fields, an item/action pair)
are rotated identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .numeric import ConfigError

RMSNORM_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ConfigError("rotary positions need an even head_dim >= 2")

    def frequencies(self) -> np.ndarray:
        """theta_j = base^(-2j / head_dim) for pair index j."""
        j = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / self.head_dim)


def rope_angles(positions: np.ndarray, cfg: RopeConfig) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape (len(positions), head_dim // 2)."""
    theta = cfg.frequencies()
    ang = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x: np.ndarray, positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Rotate each row of x by its position's angles, pairing dims (2j, 2j+1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.head_dim:
        raise ConfigError(f"rope input last dim {x.shape[-1]} != head_dim {cfg.head_dim}")
    cos, sin = rope_angles(positions, cfg)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


@dataclass
class BlockParams:
    """Weights of one interaction block."""

    attn_gain: np.ndarray  # (d,)
    w_query: np.ndarray    # (d, d)
    w_key: np.ndarray      # (d, d)
    w_value: np.ndarray    # (d, d)
    w_out: np.ndarray      # (d, d)
    w_gate: np.ndarray     # (d, d)
    ffn_gain: np.ndarray   # (d,)
    w_ffn_a: np.ndarray    # (d, d_ff), swish path
    w_ffn_b: np.ndarray    # (d, d_ff), linear path
    w_ffn_out: np.ndarray  # (d_ff, d)

    @staticmethod
    def init(dim: int, rng: np.random.Generator, ffn_mult: int = 2) -> "BlockParams":
        d_ff = ffn_mult * dim

        def w(rows, cols):
            return rng.normal(0.0, INIT_STD, size=(rows, cols))

        return BlockParams(
            attn_gain=np.ones(dim),
            w_query=w(dim, dim),
            w_key=w(dim, dim),
            w_value=w(dim, dim),
            w_out=w(dim, dim),
            w_gate=w(dim, dim),
            ffn_gain=np.ones(dim),
            w_ffn_a=w(dim, d_ff),
            w_ffn_b=w(dim, d_ff),
            w_ffn_out=w(d_ff, dim),
        )

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            prefix + "attn_gain": self.attn_gain,
            prefix + "w_query": self.w_query,
            prefix + "w_key": self.w_key,
            prefix + "w_value": self.w_value,
            prefix + "w_out": self.w_out,
            prefix + "w_gate": self.w_gate,
            prefix + "ffn_gain": self.ffn_gain,
            prefix + "w_ffn_a": self.w_ffn_a,
            prefix + "w_ffn_b": self.w_ffn_b,
            prefix + "w_ffn_out": self.w_ffn_out,
        }


@dataclass
class BlockTrace:
    """Stage activations of one block, for diagnostics."""

    attn_out: np.ndarray       # attention output before gating
    gate_values: np.ndarray | None  # sigmoid gate, None when gating is off
    gated: np.ndarray          # gated attention (equals attn_out when off)
    attn_residual: np.ndarray  # input + gated attention
    ffn_out: np.ndarray        # feed-forward output before its residual
    block_out: np.ndarray      # block output
    attn_weights: np.ndarray   # (heads, S, S) or (B, heads, S, S)


class BlockNodes:
    """Tape nodes of one block's parameters."""

    __slots__ = (
        "attn_gain", "w_query", "w_key", "w_value", "w_out",
        "w_gate", "ffn_gain", "w_ffn_a", "w_ffn_b", "w_ffn_out",
    )

    def __init__(self, tape: Tape, params: BlockParams, prefix: str) -> None:
        for name, value in params.named().items():
            setattr(self, name, tape.param(prefix + name, value))


def rms_normalize(tape: Tape, x: Node, gain: Node) -> Node:
    r = tape.rsqrt_mean_square(x, RMSNORM_EPS)
    return tape.mul(tape.mul(x, r), gain)


def split_heads(tape: Tape, x: Node, heads: int) -> Node:
    b, s, d = x.shape
    return tape.transpose(tape.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(tape: Tape, x: Node) -> Node:
    b, h, s, dk = x.shape
    return tape.reshape(tape.transpose(x, (0, 2, 1, 3)), (b, s, h * dk))


def block_forward_tape(
    tape: Tape,
    x: Node,
    cos: np.ndarray,
    sin: np.ndarray,
    mask: np.ndarray,
    p: BlockNodes,
    heads: int,
    use_gate: bool,
    gate_from_normalized: bool = False,
) -> dict[str, Node]:
    """Run one block on a (B, S, d) node; returns the stage nodes.

    `mask` is the additive visibility mask, a constant array broadcastable
    to the (B, heads, S, S) score tensor.
    """
    b, s, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    dk = d // heads

    xn = rms_normalize(tape, x, p.attn_gain)
    q = split_heads(tape, tape.matmul(xn, p.w_query), heads)
    k = split_heads(tape, tape.matmul(xn, p.w_key), heads)
    v = split_heads(tape, tape.matmul(xn, p.w_value), heads)
    # scale queries rather than the S x S score matrix; same product, less work
    qr = tape.scale(tape.rope(q, cos, sin), 1.0 / math.sqrt(dk))
    kr = tape.rope(k, cos, sin)
    scores = tape.matmul(qr, tape.transpose(kr, (0, 1, 3, 2)))
    probs = tape.softmax_masked(scores, mask)
    attn_out = tape.matmul(merge_heads(tape, tape.matmul(probs, v)), p.w_out)

    gate = None
    if use_gate:
        gate_src = xn if gate_from_normalized else x
        gate = tape.sigmoid(tape.matmul(gate_src, p.w_gate))
        gated = tape.mul(gate, attn_out)
    else:
        gated = attn_out
    attn_residual = tape.add(x, gated)

    inorm = rms_normalize(tape, attn_residual, p.ffn_gain)
    hidden = tape.mul(tape.swish(tape.matmul(inorm, p.w_ffn_a)), tape.matmul(inorm, p.w_ffn_b))
    ffn_out = tape.matmul(hidden, p.w_ffn_out)
    block_out = tape.add(attn_residual, ffn_out)

    return {
        "attn_out": attn_out,
        "gate_values": gate,
        "gated": gated,
        "attn_residual": attn_residual,
        "ffn_out": ffn_out,
        "block_out": block_out,
        "attn_weights": probs,
    }


def _run_block(
    x: np.ndarray,
    positions: np.ndarray,
    mask: np.ndarray,
    params: BlockParams,
    heads: int,
    use_gate: bool,
    gate_from_normalized: bool = False,
    rope_base: float = 10000.0,
) -> dict[str, np.ndarray | None]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    d = x.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    cos, sin = rope_angles(positions, RopeConfig(d // heads, rope_base))
    tape = Tape()
    nodes = block_forward_tape(
        tape,
        tape.constant(x),
        cos,
        sin,
        np.asarray(mask, dtype=np.float64),
        BlockNodes(tape, params, "block."),
        heads,
        use_gate,
        gate_from_normalized,
    )
    out: dict[str, np.ndarray | None] = {}
    for k, n in nodes.items():
        if n is None:
            out[k] = None
        else:
            out[k] = n.value[0] if single else n.value
    return out


def attention(
    x_norm: np.ndarray,
    positions: np.ndarray,
    mask: np.ndarray,
    params: BlockParams,
    heads: int,
    rope_base: float = 10000.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Masked rotary attention on pre-normalized rows.

    Returns (attention output, attention weights). Weights have one (S, S)
    panel per head; each visible row sums to 1.
    """
    x = np.asarray(x_norm, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    d = x.shape[-1]
    dk = d // heads
    cos, sin = rope_angles(positions, RopeConfig(dk, rope_base))
    tape = Tape()
    xn = tape.constant(x)
    p = BlockNodes(tape, params, "block.")
    q = split_heads(tape, tape.matmul(xn, p.w_query), heads)
    k = split_heads(tape, tape.matmul(xn, p.w_key), heads)
    v = split_heads(tape, tape.matmul(xn, p.w_value), heads)
    qr = tape.scale(tape.rope(q, cos, sin), 1.0 / math.sqrt(dk))
    kr = tape.rope(k, cos, sin)
    scores = tape.matmul(qr, tape.transpose(kr, (0, 1, 3, 2)))
    probs = tape.softmax_masked(scores, np.asarray(mask, dtype=np.float64))
    out = tape.matmul(merge_heads(tape, tape.matmul(probs, v)), p.w_out)
    if single:
        return out.value[0], probs.value[0]
    return out.value, probs.value


def nlir_gate(x_raw: np.ndarray, attn_out: np.ndarray, w_gate: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-linear residual gate: sigmoid(x_raw W) * attn_out.

    Returns (gated attention, gate values); the caller adds the residual.
    """
    tape = Tape()
    g = tape.sigmoid(tape.matmul(tape.constant(np.asarray(x_raw, dtype=np.float64)),
                                 tape.constant(np.asarray(w_gate, dtype=np.float64))))
    gated = tape.mul(g, tape.constant(np.asarray(attn_out, dtype=np.float64)))
    return gated.value, g.value


def swiglu_ffn(x: np.ndarray, params: BlockParams) -> np.ndarray:
    """Normalized gated feed-forward: (swish(In Wa) * (In Wb)) Wc on In = RMSNorm(x) * gain."""
    tape = Tape()
    xn = rms_normalize(tape, tape.constant(np.asarray(x, dtype=np.float64)),
                       tape.constant(params.ffn_gain))
    hidden = tape.mul(
        tape.swish(tape.matmul(xn, tape.constant(params.w_ffn_a))),
        tape.matmul(xn, tape.constant(params.w_ffn_b)),
    )
    return tape.matmul(hidden, tape.constant(params.w_ffn_out)).value


def block_forward(
    x: np.ndarray,
    positions: np.ndarray,
    mask: np.ndarray,
    params: BlockParams,
    heads: int,
    use_gate: bool = True,
    gate_from_normalized: bool = False,
    rope_base: float = 10000.0,
) -> BlockTrace:
    """One full block on (S, d) or (B, S, d) input; returns every stage."""
    stages = _run_block(x, positions, mask, params, heads, use_gate, gate_from_normalized, rope_base)
    return BlockTrace(
        attn_out=stages["attn_out"],
        gate_values=stages["gate_values"],
        gated=stages["gated"],
        attn_residual=stages["attn_residual"],
        ffn_out=stages["ffn_out"],
        block_out=stages["block_out"],
        attn_weights=stages["attn_weights"],
    )
