"""Command-line driver.

Subcommands: synth, train, ablate, diagnose, masks, flops, gradcheck. Each
takes `--config FILE` (flat key=value, strictly validated) and `--out DIR`,
writes its artifacts plus a canonical config snapshot into the out
directory, and exits 0 on success, 2 on config errors, 3 on data errors,
4 on numerical failures.

Heavy modules are imported inside the command bodies so thread environment
variables (TOKENREC_THREADS) take effect before the numeric stack loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .config import COMMANDS, config_hash, parse_config_file, resolve, snapshot
from .numeric import ConfigError, DataError, NumericsError


def _prepare_out(out_dir: Path, command: str, cfg: dict) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = snapshot(command, cfg, __version__)
    (out_dir / "config_snapshot.txt").write_text(text, encoding="utf-8")
    return config_hash(text)


def _synth_spec(cfg: dict):
    from .synth import SynthSpec

    return SynthSpec(
        users=cfg["users"], field_cards=cfg["field_cards"], items=cfg["items"],
        actions=cfg["actions"], history_len=cfg["history_len"],
        num_targets=cfg["num_targets"], num_interests=cfg["num_interests"],
        zipf_exponent=cfg["zipf_exponent"], markov_mix=cfg["markov_mix"],
        drift_rate=cfg["drift_rate"], field_match=cfg["field_match"],
        label_gain=cfg["label_gain"], noise=cfg["noise"],
        label_mode=cfg["label_mode"], seed=cfg["seed"],
    )


def cmd_synth(cfg: dict, out: Path, args, cfg_hash: str) -> int:
    from .synth import generate, label_marginals
    from .stream import write_records

    spec = _synth_spec(cfg)
    records = generate(spec)
    write_records(out / "records.txt", records, fmt="lines")
    write_records(out / "records.jsonl", records, fmt="jsonl")
    manifest = {
        "version": __version__,
        "config_hash": cfg_hash,
        "spec": spec.to_dict(),
        "count": len(records),
        "stream_length": spec.stream_spec().length,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    stats = {"label_marginals": label_marginals(records, spec.actions).tolist()}
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True) + "\n")
    print(f"synth: wrote {len(records)} records to {out}")
    return 0


def _load_corpus(data_dir: str):
    from .stream import read_records
    from .synth import SynthSpec

    if not data_dir:
        raise ConfigError("this command needs data=<synth output directory>")
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    spec = SynthSpec.from_dict(manifest["spec"])
    records = read_records(root / "records.txt", fmt="lines")
    if len(records) != manifest["count"]:
        raise DataError(
            f"manifest says {manifest['count']} records, file has {len(records)}"
        )
    return spec, records


def _model_config(cfg: dict, synth_spec) -> "object":
    from .masks import preset
    from .model import ModelConfig, size_preset
    from .stream import Supervision

    dim, heads = cfg["dim"], cfg["heads"]
    depth = 4
    if cfg["model_size"]:
        depth, dim, heads = size_preset(cfg["model_size"])
    schedule_name = cfg["schedule"]
    windows = cfg["windows"] or None
    schedule = preset(
        schedule_name,
        windows=windows,
        static_prefix=synth_spec.num_fields,
        discard_static=cfg["discard_static"],
    )
    if schedule.depth != depth:
        # named sizes deeper than 4 extend the full prefix of the preset
        from .masks import MaskSchedule

        extra = depth - schedule.depth
        if extra < 0:
            raise ConfigError(f"model_size depth {depth} below preset depth {schedule.depth}")
        override = None
        if schedule.omega_override is not None:
            override = tuple(schedule.omega_override) + (float("inf"),) * extra
        schedule = MaskSchedule(
            depth=depth,
            full_layers=schedule.full_layers + extra,
            windows=schedule.windows,
            discard_static=schedule.discard_static,
            static_prefix=schedule.static_prefix,
            omega_override=override,
        )
    supervision = {
        "user_centric": Supervision.USER_CENTRIC,
        "new_impression": Supervision.NEW_IMPRESSION,
    }.get(cfg["supervision"])
    if supervision is None:
        raise ConfigError(f"unknown supervision mode {cfg['supervision']!r}")
    return ModelConfig(
        dim=dim, heads=heads,
        num_actions=synth_spec.actions,
        field_vocab=synth_spec.field_vocab,
        item_vocab=synth_spec.items,
        schedule=schedule,
        supervision=supervision,
        use_gate=cfg["use_gate"],
        gate_from_normalized=cfg["gate_from_normalized"],
        ffn_mult=cfg["ffn_mult"],
        rope_base=cfg["rope_base"],
    )


def cmd_train(cfg: dict, out: Path, args, cfg_hash: str) -> int:
    from .synth import records_to_streams, split
    from .training import TrainConfig, load_checkpoint, train

    synth_spec, records = _load_corpus(cfg["data"])
    if len(cfg["split"]) != 3:
        raise ConfigError("split needs 3 fractions")
    parts = split(records, tuple(cfg["split"]), synth_spec.seed)
    model_cfg = _model_config(cfg, synth_spec)
    stream_spec = synth_spec.stream_spec()
    train_streams = records_to_streams(parts[0], stream_spec, model_cfg.supervision)
    valid_streams = records_to_streams(parts[1], stream_spec, model_cfg.supervision)

    tcfg = TrainConfig(
        seed=cfg["seed"], steps=cfg["steps"], batch_size=cfg["batch_size"],
        lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"],
        weight_decay=cfg["weight_decay"], clip_norm=cfg["clip_norm"],
        eval_every=cfg["eval_every"], checkpoint_every=cfg["checkpoint_every"],
        out_dir=str(out),
    )
    params = state = None
    if getattr(args, "resume", None):
        params, state, ckpt_cfg, _ = load_checkpoint(args.resume)
        if ckpt_cfg.to_dict() != model_cfg.to_dict():
            raise ConfigError("checkpoint model config does not match this run's config")
    params, state, run = train(model_cfg, train_streams, valid_streams, tcfg,
                               params=params, state=state)

    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("step,train_loss\n")
        start = state.step - len(run.losses)
        for i, loss in enumerate(run.losses):
            fh.write(f"{start + i + 1},{loss:.10g}\n")
    with open(out / "eval.csv", "w", encoding="utf-8") as fh:
        fh.write("step,ce,auc,accuracy\n")
        for m in run.metrics:
            fh.write(f"{m['step']},{m['ce']:.10g},{m['auc']:.10g},{m['accuracy']:.10g}\n")
    summary = {
        "config_hash": cfg_hash,
        "steps": state.step,
        "final": run.final_metrics,
        "train_loss_last": run.losses[-1] if run.losses else None,
    }
    (out / "run.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(f"train: {state.step} steps, final metrics {run.final_metrics}")
    return 0


def cmd_ablate(cfg: dict, out: Path, args, cfg_hash: str) -> int:
    from .experiments import median_by_variant, run_ablation, write_ablation
    from .training import TrainConfig

    synth_spec = _synth_spec(cfg)
    tcfg = TrainConfig(
        seed=0, steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"],
        weight_decay=cfg["weight_decay"], clip_norm=cfg["clip_norm"],
        eval_every=cfg["eval_every"],
    )
    rows = run_ablation(
        synth_spec, list(cfg["variants"]), list(cfg["train_seeds"]), tcfg,
        split_fractions=tuple(cfg["split"]), dim=cfg["dim"], heads=cfg["heads"],
    )
    write_ablation(out / "ablation.csv", out / "ablation.json", rows)
    medians = {
        metric: median_by_variant(rows, metric)
        for metric in ("auc", "accuracy", "ce", "effective_rank", "cluster_mi")
    }
    (out / "medians.json").write_text(json.dumps(medians, sort_keys=True) + "\n")
    print(f"ablate: {len(rows)} runs across {len(cfg['variants'])} variants")
    return 0


def cmd_diagnose(cfg: dict, out: Path, args, cfg_hash: str) -> int:
    import numpy as np

    from .diagnostics import (
        ReceptiveFieldAccumulator, mi_profile, spectral_trajectory,
        write_report_csv, write_report_json, write_trace,
    )
    from .model import forward
    from .stream import TokenType
    from .synth import records_to_streams, split
    from .training import load_checkpoint

    if not cfg["checkpoint"]:
        raise ConfigError("diagnose needs checkpoint=<file>")
    params, _, model_cfg, _ = load_checkpoint(cfg["checkpoint"])
    synth_spec, records = _load_corpus(cfg["data"])
    parts = split(records, tuple(cfg["split"]), synth_spec.seed)
    streams = records_to_streams(parts[2], synth_spec.stream_spec(), model_cfg.supervision)
    streams = streams[: cfg["max_streams"]]
    if not streams:
        raise DataError("no held-out streams to diagnose")

    types = streams[0].types
    flt = cfg["token_filter"]
    if flt == "item":
        token_mask = types == TokenType.ITEM
    elif flt == "target":
        token_mask = types == TokenType.TARGET
    elif flt == "supervised":
        token_mask = streams[0].loss_mask
    elif flt == "all":
        token_mask = np.ones_like(types, dtype=bool)
    else:
        raise ConfigError(f"unknown token_filter {flt!r}")

    seq_len = streams[0].spec.length
    acc = ReceptiveFieldAccumulator(model_cfg.depth, seq_len)
    traces = []
    logits_parts = []
    labels_parts = []
    for start in range(0, len(streams), cfg["eval_batch"]):
        chunk = streams[start:start + cfg["eval_batch"]]
        res = forward(chunk, params, model_cfg, want_trace=True)
        logits_parts.append(res.logits)
        labels_parts.append(res.labels)
        for layer, block in enumerate(res.trace.blocks):
            acc.add(layer, block.attn_weights)
        traces.append(res.trace)

    spectral = spectral_trajectory(traces, token_mask)
    write_report_json(out / "spectral.json", spectral)
    write_report_csv(out / "spectral.csv", spectral)

    logits = np.concatenate(logits_parts, axis=0)
    labels = np.concatenate(labels_parts, axis=0)
    mi = mi_profile(logits, labels, seed=cfg["seed"],
                    cluster_counts=cfg["mi_clusters"], include_ksg=cfg["include_ksg"])
    write_report_json(out / "mi.json", mi)
    write_report_csv(out / "mi.csv", mi)

    fields = acc.report()
    write_report_json(out / "receptive.json", fields)
    write_report_csv(out / "receptive.csv", fields)

    sample = forward(streams[0], params, model_cfg, want_trace=True)
    write_trace(out / "trace.bin", sample.trace)

    summary = {
        "config_hash": cfg_hash,
        "streams": len(streams),
        "token_filter": flt,
        "final_block_rank": spectral.rank_of(model_cfg.depth - 1, "block_out"),
        "mean_receptive_width": [r["mean_width"] for r in fields.rows],
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(f"diagnose: {len(streams)} streams, reports in {out}")
    return 0


def cmd_masks(cfg: dict, out: Path, args, cfg_hash: str) -> int:
    import numpy as np

    from .masks import build_layer_mask, preset

    schedule = preset(
        cfg["schedule"], windows=cfg["windows"] or None,
        static_prefix=cfg["static_prefix"], discard_static=cfg["discard_static"],
    )
    seq_len = cfg["seq_len"]
    if seq_len < 1:
        raise ConfigError("seq_len must be >= 1")
    for layer in range(schedule.depth):
        mask = build_layer_mask(schedule, layer, seq_len)
        visible = (mask == 0.0).astype(np.uint8)
        with open(out / f"mask_layer{layer}.csv", "w", encoding="utf-8") as fh:
            for row in visible:
                fh.write(",".join(str(int(v)) for v in row) + "\n")
        with open(out / f"mask_layer{layer}.pgm", "wb") as fh:
            fh.write(f"P5\n{seq_len} {seq_len}\n255\n".encode("ascii"))
            fh.write((visible * 255).astype(np.uint8).tobytes())
    (out / "schedule.json").write_text(
        json.dumps(schedule.to_dict(), sort_keys=True) + "\n"
    )
    print(f"masks: {schedule.depth} layers at {seq_len} tokens in {out}")
    return 0


def cmd_flops(cfg: dict, out: Path, args, cfg_hash: str) -> int:
    from .flops import ServingQuery, backbone_flops, serving_cost
    from .masks import preset

    schedule = preset(cfg["schedule"], windows=cfg["windows"] or None)
    report = backbone_flops(cfg["seq_len"], cfg["dim"], schedule,
                            use_gate=cfg["use_gate"], ffn_mult=cfg["ffn_mult"])
    (out / "flops.json").write_text(report.to_json() + "\n")
    with open(out / "flops.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.csv_rows()) + "\n")
    if cfg["serving_batch"] > 0:
        cost = serving_cost(ServingQuery(
            batch=cfg["serving_batch"], user_len=cfg["user_len"],
            suffix_len=cfg["suffix_len"], state_len=cfg["state_len"],
            dim=cfg["dim"],
        ))
        (out / "serving.json").write_text(cost.to_json() + "\n")
    print(f"flops: total {report.total} over {schedule.depth} layers")
    return 0


def cmd_gradcheck(cfg: dict, out: Path, args, cfg_hash: str) -> int:
    from .experiments import gradcheck_setup
    from .training import gradient_check

    streams, params, model_cfg = gradcheck_setup(cfg["seed"])
    report = gradient_check(streams, params, model_cfg, fd_step=cfg["fd_step"])
    worst = float(max(report.values()))
    payload = {
        "config_hash": cfg_hash,
        "fd_step": cfg["fd_step"],
        "tolerance": cfg["tolerance"],
        "per_parameter": report,
        "max_relative_error": worst,
        "passed": worst <= cfg["tolerance"],
    }
    (out / "gradcheck.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
    print(f"gradcheck: max relative error {worst:.3e} (tolerance {cfg['tolerance']:.1e})")
    if worst > cfg["tolerance"]:
        raise NumericsError(
            f"gradient check failed: {worst:.3e} > tolerance {cfg['tolerance']:.1e}"
        )
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "masks": cmd_masks,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenrec",
                                     description="token-stream recommender toolkit")
    parser.add_argument("--version", action="version", version=f"tokenrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("TOKENREC_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
        os.environ.setdefault("OPENBLAS_NUM_THREADS", threads)
        os.environ.setdefault("MKL_NUM_THREADS", threads)
    args = build_parser().parse_args(argv)
    try:
        raw = parse_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, raw)
        out = Path(args.out)
        cfg_hash = _prepare_out(out, args.command, cfg)
        return _HANDLERS[args.command](cfg, out, args, cfg_hash)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
