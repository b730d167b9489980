"""Backbone: embeddings, stacked interaction blocks, action head, metrics.

The model embeds a token stream through one stacked table (field, item,
action, separator rows), runs `depth` interaction blocks each under its
schedule's visibility mask, and scores every supervised position with a
linear head over the action vocabulary. All forward passes run one batched
code path; a lone stream is a batch of one.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .autodiff import Node, Tape
from .blocks import BlockNodes, BlockParams, BlockTrace, RopeConfig, block_forward_tape, rope_angles
from .masks import MaskSchedule, build_layer_mask
from .numeric import ConfigError, DataError, NumericsError, check_finite
from .stream import Supervision, TokenStream, combined_table_indices

# depth, dim, heads for the named model sizes
SIZE_PRESETS = {
    "T": (4, 64, 4),
    "S": (4, 256, 4),
    "M": (6, 256, 4),
    "L": (8, 256, 8),
}

STAGE_NAMES = ("attn_out", "attn_residual", "ffn_out", "block_out")


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    heads: int
    num_actions: int
    field_vocab: int
    item_vocab: int
    schedule: MaskSchedule
    supervision: Supervision = Supervision.USER_CENTRIC
    use_gate: bool = True
    gate_from_normalized: bool = False
    ffn_mult: int = 2
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2 != 0:
            raise ConfigError("head_dim must be even for rotary positions")
        if self.num_actions < 2:
            raise ConfigError("need at least 2 actions")
        if self.field_vocab < 1 or self.item_vocab < 1:
            raise ConfigError("vocabularies must be non-empty")

    @property
    def depth(self) -> int:
        return self.schedule.depth

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.dim

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "heads": self.heads,
            "num_actions": self.num_actions,
            "field_vocab": self.field_vocab,
            "item_vocab": self.item_vocab,
            "schedule": self.schedule.to_dict(),
            "supervision": int(self.supervision),
            "use_gate": self.use_gate,
            "gate_from_normalized": self.gate_from_normalized,
            "ffn_mult": self.ffn_mult,
            "rope_base": self.rope_base,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            dim=int(d["dim"]),
            heads=int(d["heads"]),
            num_actions=int(d["num_actions"]),
            field_vocab=int(d["field_vocab"]),
            item_vocab=int(d["item_vocab"]),
            schedule=MaskSchedule.from_dict(d["schedule"]),
            supervision=Supervision(int(d["supervision"])),
            use_gate=bool(d["use_gate"]),
            gate_from_normalized=bool(d["gate_from_normalized"]),
            ffn_mult=int(d["ffn_mult"]),
            rope_base=float(d["rope_base"]),
        )


def size_preset(name: str) -> tuple[int, int, int]:
    """(depth, dim, heads) for model sizes T, S, M, L."""
    if name not in SIZE_PRESETS:
        raise ConfigError(f"unknown model size {name!r}, pick from {sorted(SIZE_PRESETS)}")
    return SIZE_PRESETS[name]


@dataclass
class ModelParams:
    field_table: np.ndarray   # (field_vocab, d)
    item_table: np.ndarray    # (item_vocab, d)
    action_table: np.ndarray  # (num_actions, d)
    sep_row: np.ndarray       # (1, d)
    blocks: list[BlockParams] = field(default_factory=list)
    head_w: np.ndarray = None  # (num_actions, d)
    head_b: np.ndarray = None  # (num_actions,)

    @staticmethod
    def init(cfg: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        d = cfg.dim

        def w(rows, cols):
            return rng.normal(0.0, 0.02, size=(rows, cols))

        return ModelParams(
            field_table=w(cfg.field_vocab, d),
            item_table=w(cfg.item_vocab, d),
            action_table=w(cfg.num_actions, d),
            sep_row=w(1, d),
            blocks=[BlockParams.init(d, rng, cfg.ffn_mult) for _ in range(cfg.depth)],
            head_w=w(cfg.num_actions, d),
            head_b=np.zeros(cfg.num_actions),
        )

    def named(self) -> dict[str, np.ndarray]:
        out = {
            "field_table": self.field_table,
            "item_table": self.item_table,
            "action_table": self.action_table,
            "sep_row": self.sep_row,
        }
        for l, bp in enumerate(self.blocks):
            out.update(bp.named(f"layer{l}."))
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    @staticmethod
    def from_named(cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> "ModelParams":
        def take(name, shape):
            if name not in tensors:
                raise DataError(f"checkpoint missing tensor {name!r}")
            t = np.asarray(tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise DataError(f"tensor {name!r} has shape {t.shape}, expected {shape}")
            return t

        d = cfg.dim
        blocks = []
        for l in range(cfg.depth):
            p = f"layer{l}."
            blocks.append(BlockParams(
                attn_gain=take(p + "attn_gain", (d,)),
                w_query=take(p + "w_query", (d, d)),
                w_key=take(p + "w_key", (d, d)),
                w_value=take(p + "w_value", (d, d)),
                w_out=take(p + "w_out", (d, d)),
                w_gate=take(p + "w_gate", (d, d)),
                ffn_gain=take(p + "ffn_gain", (d,)),
                w_ffn_a=take(p + "w_ffn_a", (d, cfg.ffn_dim)),
                w_ffn_b=take(p + "w_ffn_b", (d, cfg.ffn_dim)),
                w_ffn_out=take(p + "w_ffn_out", (cfg.ffn_dim, d)),
            ))
        return ModelParams(
            field_table=take("field_table", (cfg.field_vocab, d)),
            item_table=take("item_table", (cfg.item_vocab, d)),
            action_table=take("action_table", (cfg.num_actions, d)),
            sep_row=take("sep_row", (1, d)),
            blocks=blocks,
            head_w=take("head_w", (cfg.num_actions, d)),
            head_b=take("head_b", (cfg.num_actions,)),
        )

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class ActivationTrace:
    """Stage activations of a forward pass: the embedded input plus each block."""

    input: np.ndarray
    blocks: list[BlockTrace]

    def stage(self, layer: int, name: str) -> np.ndarray:
        if name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {name!r}, pick from {STAGE_NAMES}")
        return getattr(self.blocks[layer], name)


@dataclass
class ForwardResult:
    logits: np.ndarray             # (n_supervised, num_actions)
    labels: np.ndarray             # (n_supervised,)
    supervised_index: np.ndarray   # (n_supervised, 2): (stream, position)
    trace: ActivationTrace | None


def _check_streams(streams: list[TokenStream]) -> None:
    if not streams:
        raise DataError("forward needs at least one stream")
    spec0 = streams[0].spec
    for s in streams[1:]:
        if s.spec != spec0:
            raise DataError("all streams in a batch must share one StreamSpec")


def forward_nodes(
    tape: Tape,
    streams: list[TokenStream],
    params: ModelParams,
    cfg: ModelConfig,
) -> tuple[Node, np.ndarray, np.ndarray, dict]:
    """Build the forward graph; returns (logits node, labels, index, stage nodes)."""
    _check_streams(streams)
    batch = len(streams)
    seq = streams[0].spec.length
    d = cfg.dim

    field_t = tape.param("field_table", params.field_table)
    item_t = tape.param("item_table", params.item_table)
    action_t = tape.param("action_table", params.action_table)
    sep_t = tape.param("sep_row", params.sep_row)
    stacked = tape.concat([field_t, item_t, action_t, sep_t], axis=0)

    idx = np.stack([
        combined_table_indices(s, cfg.field_vocab, cfg.item_vocab, cfg.num_actions)
        for s in streams
    ])
    x = tape.gather(stacked, idx)  # (B, S, d)

    positions = streams[0].positions
    cos, sin = rope_angles(positions, RopeConfig(cfg.head_dim, cfg.rope_base))

    stages: dict = {"input": x, "blocks": []}
    for layer in range(cfg.depth):
        mask = build_layer_mask(cfg.schedule, layer, seq)
        nodes = block_forward_tape(
            tape, x, cos, sin, mask,
            BlockNodes(tape, params.blocks[layer], f"layer{layer}."),
            cfg.heads, cfg.use_gate, cfg.gate_from_normalized,
        )
        stages["blocks"].append(nodes)
        x = nodes["block_out"]

    sup_mask = np.stack([s.loss_mask for s in streams])  # (B, S)
    flat_sup = np.nonzero(sup_mask.reshape(-1))[0]
    if flat_sup.size == 0:
        raise NumericsError("empty supervision set: no positions carry loss")
    rows = tape.gather(tape.reshape(x, (batch * seq, d)), flat_sup)
    head_w = tape.param("head_w", params.head_w)
    head_b = tape.param("head_b", params.head_b)
    logits = tape.add(tape.matmul(rows, tape.transpose(head_w, (1, 0))), head_b)

    labels = np.concatenate([s.action_labels[s.loss_mask] for s in streams])
    index = np.stack([flat_sup // seq, flat_sup % seq], axis=1)
    return logits, labels, index, stages


def _trace_from_stages(stages: dict, single: bool) -> ActivationTrace:
    def val(node):
        if node is None:
            return None
        return node.value[0] if single else node.value

    blocks = [
        BlockTrace(
            attn_out=val(n["attn_out"]),
            gate_values=val(n["gate_values"]),
            gated=val(n["gated"]),
            attn_residual=val(n["attn_residual"]),
            ffn_out=val(n["ffn_out"]),
            block_out=val(n["block_out"]),
            attn_weights=val(n["attn_weights"]),
        )
        for n in stages["blocks"]
    ]
    return ActivationTrace(input=val(stages["input"]), blocks=blocks)


def forward(
    streams: TokenStream | list[TokenStream],
    params: ModelParams,
    cfg: ModelConfig,
    want_trace: bool = False,
) -> ForwardResult:
    """Score every supervised position of the given stream(s)."""
    single = isinstance(streams, TokenStream)
    batch = [streams] if single else list(streams)
    tape = Tape()
    logits, labels, index, stages = forward_nodes(tape, batch, params, cfg)
    check_finite(logits.value, "logits")
    trace = _trace_from_stages(stages, single) if want_trace else None
    return ForwardResult(logits=logits.value, labels=labels, supervised_index=index, trace=trace)


def loss_and_grads(
    streams: list[TokenStream], params: ModelParams, cfg: ModelConfig
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean supervised cross-entropy and its parameter gradients."""
    tape = Tape()
    logits, labels, _, _ = forward_nodes(tape, list(streams), params, cfg)
    loss = tape.cross_entropy(logits, labels)
    tape.backward(loss)
    return float(loss.value), tape.gradients(), logits.value


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood, the evaluation-side mirror of training loss."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise NumericsError("empty supervision set: no positions carry loss")
    m = np.max(logits, axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.sum(np.exp(z), axis=1))
    return float(np.mean(lse - z[np.arange(labels.size), labels]))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=1, keepdims=True)


def binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-based AUC with average tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise NumericsError("AUC undefined: evaluation labels contain a single class")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean one-vs-rest AUC over the action classes present in the labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    probs = softmax_probs(logits)
    aucs = []
    for a in range(logits.shape[1]):
        pos = labels == a
        if pos.any() and (~pos).any():
            aucs.append(binary_auc(probs[:, a], pos))
    if not aucs:
        raise NumericsError("AUC undefined: evaluation labels contain a single class")
    return float(np.mean(aucs))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- checkpoint file ------------------------------------------------------------

_CKPT_MAGIC = b"TKRC"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned binary tensor file: json header, then raw little-endian f64."""
    entries = []
    for name, arr in tensors.items():
        entries.append({"name": name, "shape": list(np.asarray(arr).shape)})
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": meta, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise DataError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {header['version']}")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise DataError(f"checkpoint truncated at tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(
                np.float64
            ).reshape(shape)
    return tensors, header["meta"]


def with_supervision(cfg: ModelConfig, supervision: Supervision) -> ModelConfig:
    return replace(cfg, supervision=supervision)
