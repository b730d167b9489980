"""Training loop: decoupled weight decay, stateless batching, checkpoints.

Batch order is a pure function of (seed, epoch), so a run resumed from a
checkpoint replays the exact batches the uninterrupted run would have seen
and lands on bit-identical parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .model import (
    ModelConfig,
    ModelParams,
    accuracy,
    ce_loss,
    forward,
    forward_nodes,
    load_tensors,
    loss_and_grads,
    macro_auc,
    save_tensors,
)
from .numeric import ConfigError, NumericsError, make_rng
from .stream import TokenStream

_BATCH_STREAM = 101  # rng stream tag for batch shuffling


@dataclass
class OptimState:
    """First/second moment accumulators plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def init(named: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01) -> "OptimState":
        return OptimState(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
            step=0,
            m={k: np.zeros_like(v) for k, v in named.items()},
            v={k: np.zeros_like(v) for k, v in named.items()},
        )


def adamw_step(named: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One update, in place. Weight decay is decoupled from the moments."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in named.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= state.lr * (update + state.weight_decay * p)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = None
    eval_every: int = 0          # 0: evaluate only at the end
    checkpoint_every: int = 0    # 0: checkpoint only at the end (if out_dir set)
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class TrainRun:
    seed: int
    losses: list[float] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def final_metrics(self) -> dict:
        return self.metrics[-1] if self.metrics else {}


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic batch for a global step: epoch permutation, then slice."""
    if batch_size >= n:
        return np.arange(n)
    per_epoch = n // batch_size
    epoch, k = divmod(step, per_epoch)
    perm = make_rng(seed, _BATCH_STREAM, epoch).permutation(n)
    return perm[k * batch_size: (k + 1) * batch_size]


def evaluate(
    streams: list[TokenStream], params: ModelParams, cfg: ModelConfig, batch_size: int = 64
) -> dict:
    """Supervised CE, macro one-vs-rest AUC, and accuracy over a stream set."""
    logits_parts = []
    label_parts = []
    for start in range(0, len(streams), batch_size):
        res = forward(streams[start:start + batch_size], params, cfg)
        logits_parts.append(res.logits)
        label_parts.append(res.labels)
    logits = np.concatenate(logits_parts, axis=0)
    labels = np.concatenate(label_parts, axis=0)
    return {
        "ce": ce_loss(logits, labels),
        "auc": macro_auc(logits, labels),
        "accuracy": accuracy(logits, labels),
    }


def _checkpoint_tensors(params: ModelParams, state: OptimState) -> dict[str, np.ndarray]:
    tensors = dict(params.named())
    for name, m in state.m.items():
        tensors["opt.m." + name] = m
    for name, v in state.v.items():
        tensors["opt.v." + name] = v
    return tensors


def save_checkpoint(path, params: ModelParams, state: OptimState, cfg: ModelConfig,
                    extra: dict | None = None) -> None:
    meta = {
        "step": state.step,
        "model": cfg.to_dict(),
        "optim": {
            "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "weight_decay": state.weight_decay,
        },
    }
    if extra:
        meta.update(extra)
    save_tensors(path, _checkpoint_tensors(params, state), meta)


def load_checkpoint(path) -> tuple[ModelParams, OptimState, ModelConfig, dict]:
    tensors, meta = load_tensors(path)
    cfg = ModelConfig.from_dict(meta["model"])
    params = ModelParams.from_named(cfg, {k: v for k, v in tensors.items() if not k.startswith("opt.")})
    o = meta["optim"]
    state = OptimState(
        lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
        weight_decay=o["weight_decay"], step=int(meta["step"]),
        m={k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")},
        v={k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")},
    )
    return params, state, cfg, meta


def train(
    cfg: ModelConfig,
    train_streams: list[TokenStream],
    eval_streams: list[TokenStream],
    tcfg: TrainConfig,
    params: ModelParams | None = None,
    state: OptimState | None = None,
) -> tuple[ModelParams, OptimState, TrainRun]:
    """Advance training to global step tcfg.steps.

    A fresh run starts at step 0; passing a restored (params, state) pair
    continues from state.step through the exact batches the uninterrupted
    run would have drawn.
    """
    if params is None:
        params = ModelParams.init(cfg, make_rng(tcfg.seed, 0))
    if state is None:
        state = OptimState.init(params.named(), lr=tcfg.lr, beta1=tcfg.beta1,
                                beta2=tcfg.beta2, eps=tcfg.eps,
                                weight_decay=tcfg.weight_decay)
    named = params.named()
    run = TrainRun(seed=tcfg.seed)
    out_dir = Path(tcfg.out_dir) if tcfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    for step in range(state.step, tcfg.steps):
        idx = batch_indices(tcfg.seed, step, len(train_streams), tcfg.batch_size)
        batch = [train_streams[i] for i in idx]
        loss, grads, _ = loss_and_grads(batch, params, cfg)
        if not math.isfinite(loss):
            if out_dir:
                save_checkpoint(out_dir / "diverged.ckpt", params, state, cfg)
            raise NumericsError(f"training diverged at step {step}: loss={loss}")
        if tcfg.clip_norm is not None:
            clip_gradients(grads, tcfg.clip_norm)
        adamw_step(named, grads, state)
        run.losses.append(loss)
        done = state.step
        if tcfg.eval_every and done % tcfg.eval_every == 0 and eval_streams:
            ev = evaluate(eval_streams, params, cfg)
            ev["step"] = done
            run.metrics.append(ev)
        if out_dir and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step{done:06d}.ckpt", params, state, cfg)

    if eval_streams and (not run.metrics or run.metrics[-1]["step"] != state.step):
        ev = evaluate(eval_streams, params, cfg)
        ev["step"] = state.step
        run.metrics.append(ev)
    if out_dir:
        save_checkpoint(out_dir / "final.ckpt", params, state, cfg)
    run.wall_seconds = time.perf_counter() - t0
    return params, state, run


def loss_value(streams: list[TokenStream], params: ModelParams, cfg: ModelConfig) -> float:
    """Forward-only supervised CE of one batch."""
    tape = Tape()
    logits, labels, _, _ = forward_nodes(tape, list(streams), params, cfg)
    return float(tape.cross_entropy(logits, labels).value)


def gradient_check(
    streams: list[TokenStream],
    params: ModelParams,
    cfg: ModelConfig,
    fd_step: float = 1e-5,
) -> dict[str, float]:
    """Central-difference check of every parameter coordinate.

    Returns the max relative error per parameter, where the error of one
    coordinate is |analytic - numeric| / max(1, |analytic|). The forward
    graph is recorded once; each probe perturbs the live parameter array
    in place and replays the recorded ops, which skips graph rebuilding.
    """
    _, grads, _ = loss_and_grads(list(streams), params, cfg)
    tape = Tape()
    logits, labels, _, _ = forward_nodes(tape, list(streams), params, cfg)
    loss_node = tape.cross_entropy(logits, labels)
    named = params.named()
    report: dict[str, float] = {}
    for name, arr in named.items():
        leaf = (tape.param_node(name),)
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            tape.replay(changed=leaf)
            up = float(loss_node.value)
            flat[i] = orig - fd_step
            tape.replay(changed=leaf)
            down = float(loss_node.value)
            flat[i] = orig
            fd = (up - down) / (2.0 * fd_step)
            err = abs(g[i] - fd) / max(1.0, abs(g[i]))
            if err > worst:
                worst = err
        # re-sync downstream values to the restored weights before the
        # next tensor's probes reuse them
        tape.replay(changed=leaf)
        report[name] = worst
    return report
