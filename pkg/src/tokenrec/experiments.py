"""Ablation grid: train model variants on one corpus and measure them.

Variants toggle the schedule (all-full, coarse-to-fine windows, the reversed
window order, all-window), the non-linear residual gate, and whether field
tokens are present at all. Each trained variant reports ranking quality
(macro AUC, accuracy, CE), the effective rank of its final-layer item-token
representations, the cluster-MI between its supervised logits and the
labels, and its analytic per-pass cost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .diagnostics import action_cluster_mi, effective_rank, stage_rows
from .flops import backbone_flops
from .masks import preset
from .model import ModelConfig, accuracy, ce_loss, forward, macro_auc
from .numeric import ConfigError
from .stream import Supervision, TokenType
from .synth import SynthSpec, generate, records_to_streams, split
from .training import TrainConfig, evaluate, train

MI_EVAL_CLUSTERS = 32
EVAL_BATCH = 32


@dataclass(frozen=True)
class Variant:
    """One ablation arm."""

    name: str
    schedule: str            # preset name
    use_gate: bool
    drop_fields: bool = False
    windows: tuple[int, ...] | None = None


ABLATION_VARIANTS: dict[str, Variant] = {
    "vanilla": Variant("vanilla", "4F", use_gate=False),
    "gate": Variant("gate", "4F", use_gate=True),
    "windows": Variant("windows", "2F2S", use_gate=False),
    "full": Variant("full", "2F2S", use_gate=True),
    "sequence_only": Variant("sequence_only", "4F", use_gate=False, drop_fields=True),
    "windows_first": Variant("windows_first", "2S2F", use_gate=True),
    "all_windows": Variant("all_windows", "4S", use_gate=True),
}


def variant_model_config(
    variant: Variant,
    synth: SynthSpec,
    dim: int = 64,
    heads: int = 4,
    supervision: Supervision = Supervision.USER_CENTRIC,
) -> ModelConfig:
    static_prefix = 0 if variant.drop_fields else synth.num_fields
    schedule = preset(
        variant.schedule,
        windows=variant.windows,
        static_prefix=static_prefix,
        discard_static=True,
    )
    return ModelConfig(
        dim=dim,
        heads=heads,
        num_actions=synth.actions,
        field_vocab=synth.field_vocab,
        item_vocab=synth.items,
        schedule=schedule,
        supervision=supervision,
        use_gate=variant.use_gate,
    )


def _item_token_mask(streams) -> np.ndarray:
    return np.asarray(streams[0].types == TokenType.ITEM)


def measure_variant(cfg, params, test_streams) -> dict:
    """Quality, rank, and MI measurements on held-out streams."""
    logits_parts = []
    labels_parts = []
    item_rows = []
    mask = _item_token_mask(test_streams)
    for start in range(0, len(test_streams), EVAL_BATCH):
        chunk = test_streams[start:start + EVAL_BATCH]
        res = forward(chunk, params, cfg, want_trace=True)
        logits_parts.append(res.logits)
        labels_parts.append(res.labels)
        item_rows.append(stage_rows([res.trace], cfg.depth - 1, "block_out", mask))
    logits = np.concatenate(logits_parts, axis=0)
    labels = np.concatenate(labels_parts, axis=0)
    rows = np.concatenate(item_rows, axis=0)
    return {
        "auc": macro_auc(logits, labels),
        "accuracy": accuracy(logits, labels),
        "ce": ce_loss(logits, labels),
        "effective_rank": effective_rank(rows),
        "cluster_mi": action_cluster_mi(logits, labels, MI_EVAL_CLUSTERS, seed=0),
    }


def run_variant(
    variant: Variant,
    synth: SynthSpec,
    records_split,
    seed: int,
    tcfg: TrainConfig,
    dim: int = 64,
    heads: int = 4,
) -> dict:
    """Train one arm on the given (train, valid, test) records."""
    train_recs, valid_recs, test_recs = records_split
    spec = synth.stream_spec()
    if variant.drop_fields:
        spec = replace(spec, num_fields=0)
    sup = Supervision.USER_CENTRIC
    train_streams = records_to_streams(train_recs, spec, sup, drop_fields=variant.drop_fields)
    valid_streams = records_to_streams(valid_recs, spec, sup, drop_fields=variant.drop_fields)
    test_streams = records_to_streams(test_recs, spec, sup, drop_fields=variant.drop_fields)

    cfg = variant_model_config(variant, synth, dim=dim, heads=heads, supervision=sup)
    run_tcfg = replace(tcfg, seed=seed)
    params, _, run = train(cfg, train_streams, valid_streams, run_tcfg)

    row = {"variant": variant.name, "seed": seed}
    row.update(measure_variant(cfg, params, test_streams))
    row["final_valid"] = run.final_metrics
    row["train_loss_last"] = run.losses[-1]
    row["flops_per_stream"] = backbone_flops(
        spec.length, cfg.dim, cfg.schedule, use_gate=cfg.use_gate
    ).total
    return row


def run_ablation(
    synth: SynthSpec,
    variant_names: list[str],
    seeds: list[int],
    tcfg: TrainConfig,
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    dim: int = 64,
    heads: int = 4,
) -> list[dict]:
    """The full grid; the corpus is generated once and shared by every arm."""
    unknown = [v for v in variant_names if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants: {unknown}")
    records = generate(synth)
    parts = split(records, split_fractions, synth.seed)
    rows = []
    for name in variant_names:
        for seed in seeds:
            rows.append(run_variant(ABLATION_VARIANTS[name], synth, parts, seed, tcfg,
                                    dim=dim, heads=heads))
    return rows


def gradcheck_setup(seed: int):
    """Small gated windowed model plus two streams for derivative checks.

    Sized so a full central-difference sweep of every parameter finishes in
    seconds: width 16, two heads, the coarse-to-fine schedule with windows
    (6, 3), discarding on, gate on, user-centric supervision.
    """
    from .model import ModelParams
    from .numeric import make_rng
    from .synth import generate, records_to_streams

    synth = SynthSpec(
        users=2, field_cards=(4, 3, 2), items=8, actions=4, history_len=3,
        num_targets=1, num_interests=2, noise=1.0, seed=seed,
    )
    streams = records_to_streams(
        generate(synth), synth.stream_spec(), Supervision.USER_CENTRIC
    )
    schedule = preset("2F2S", windows=(6, 3), static_prefix=synth.num_fields,
                      discard_static=True)
    cfg = ModelConfig(
        dim=16, heads=2, num_actions=synth.actions,
        field_vocab=synth.field_vocab, item_vocab=synth.items,
        schedule=schedule, supervision=Supervision.USER_CENTRIC, use_gate=True,
    )
    params = ModelParams.init(cfg, make_rng(seed, 5))
    return streams, params, cfg


def median_by_variant(rows: list[dict], metric: str) -> dict[str, float]:
    """Median of one metric across seeds, per variant."""
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(float(r[metric]))
    return {name: float(np.median(vals)) for name, vals in out.items()}


def ablation_csv_rows(rows: list[dict]) -> list[str]:
    cols = ["variant", "seed", "auc", "accuracy", "ce", "effective_rank",
            "cluster_mi", "train_loss_last", "flops_per_stream"]
    out = [",".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = r[c]
            vals.append(f"{v:.10g}" if isinstance(v, float) else str(v))
        out.append(",".join(vals))
    return out


def write_ablation(path_csv, path_json, rows: list[dict]) -> None:
    with open(path_csv, "w", encoding="utf-8") as fh:
        fh.write("\n".join(ablation_csv_rows(rows)) + "\n")
    with open(path_json, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"rows": rows}, sort_keys=True, default=float) + "\n")
