"""Synthetic interaction corpus with planted structure.

Each user draws a latent interest cluster. The first user field is a noisy
observation of that cluster (the "group" field), the second is an
independent low-cardinality nuisance field, and any further fields are
skewed categorical noise. Item popularity is Zipf-skewed; the history is a
Markov walk that mostly stays on the user's current interest cluster and
occasionally drifts to a new one. Action labels follow a softmax over a
preferred action that combines the group field with a local sequential cue
(whether the item repeats the previous item's cluster), so a model must read
both static and sequential context to reach the label ceiling.

With label_mode="static_only" the preferred action is the nuisance field
alone: unlearnable from the history, trivially learnable once field tokens
are visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numeric import ConfigError, DataError, make_rng
from .stream import Record, StreamSpec, Supervision, TokenStream, build_stream

_SPLIT_STREAM = 2**31 + 7  # keep the split rng off the per-user streams

LABEL_MODES = ("joint", "static_only")


@dataclass(frozen=True)
class SynthSpec:
    users: int = 1000
    field_cards: tuple[int, ...] = (4, 4, 8, 16, 32, 64)
    items: int = 256
    actions: int = 4
    history_len: int = 64
    num_targets: int = 1
    num_interests: int = 4
    zipf_exponent: float = 1.1
    markov_mix: float = 0.8
    drift_rate: float = 0.05
    field_match: float = 0.85
    label_gain: float = 2.0
    noise: float = 1.0            # softmax temperature; inf = pure noise
    label_mode: str = "joint"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.users < 1 or self.items < 2 or self.actions < 2:
            raise ConfigError("need at least 1 user, 2 items, 2 actions")
        if self.history_len < 1 or self.num_targets < 1:
            raise ConfigError("history_len and num_targets must be >= 1")
        if self.num_interests < 2 or self.num_interests > self.items:
            raise ConfigError("num_interests must be in [2, items]")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}")
        if any(c < 2 for c in self.field_cards):
            raise ConfigError("field cardinalities must be >= 2")
        if not (0.0 <= self.markov_mix <= 1.0 and 0.0 <= self.drift_rate <= 1.0
                and 0.0 <= self.field_match <= 1.0):
            raise ConfigError("mix, drift, and field_match are probabilities")
        if self.noise < 0:
            raise ConfigError("noise temperature must be >= 0 (inf allowed)")

    @property
    def num_fields(self) -> int:
        return len(self.field_cards)

    @property
    def field_vocab(self) -> int:
        """Field ids are offset per slot so distinct fields never collide."""
        return int(sum(self.field_cards))

    def field_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.field_cards)[:-1]]).astype(np.int64)

    def stream_spec(self, with_actions: bool = True) -> StreamSpec:
        return StreamSpec(
            num_fields=self.num_fields,
            history_len=self.history_len,
            num_targets=self.num_targets,
            with_actions=with_actions,
        )

    def to_dict(self) -> dict:
        return {
            "users": self.users,
            "field_cards": list(self.field_cards),
            "items": self.items,
            "actions": self.actions,
            "history_len": self.history_len,
            "num_targets": self.num_targets,
            "num_interests": self.num_interests,
            "zipf_exponent": self.zipf_exponent,
            "markov_mix": self.markov_mix,
            "drift_rate": self.drift_rate,
            "field_match": self.field_match,
            "label_gain": self.label_gain,
            "noise": "inf" if math.isinf(self.noise) else self.noise,
            "label_mode": self.label_mode,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthSpec":
        noise = d.get("noise", 1.0)
        return SynthSpec(
            users=int(d["users"]),
            field_cards=tuple(int(c) for c in d["field_cards"]),
            items=int(d["items"]),
            actions=int(d["actions"]),
            history_len=int(d["history_len"]),
            num_targets=int(d["num_targets"]),
            num_interests=int(d["num_interests"]),
            zipf_exponent=float(d["zipf_exponent"]),
            markov_mix=float(d["markov_mix"]),
            drift_rate=float(d["drift_rate"]),
            field_match=float(d["field_match"]),
            label_gain=float(d["label_gain"]),
            noise=math.inf if noise == "inf" else float(noise),
            label_mode=str(d["label_mode"]),
            seed=int(d["seed"]),
        )


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    """p_i proportional to (i + 1)^-exponent over n ranks."""
    w = (np.arange(n, dtype=np.float64) + 1.0) ** (-exponent)
    return w / w.sum()


def item_cluster(item: int | np.ndarray, items: int, num_interests: int):
    """Contiguous-block cluster id of an item."""
    return (np.asarray(item) * num_interests) // items


class _ItemSampler:
    def __init__(self, spec: SynthSpec) -> None:
        self.global_probs = zipf_probs(spec.items, spec.zipf_exponent)
        self.blocks = []
        bounds = [(c * spec.items) // spec.num_interests for c in range(spec.num_interests + 1)]
        for c in range(spec.num_interests):
            lo, hi = bounds[c], bounds[c + 1]
            self.blocks.append((lo, zipf_probs(hi - lo, spec.zipf_exponent)))

    def draw_in_cluster(self, rng: np.random.Generator, c: int) -> int:
        lo, probs = self.blocks[c]
        return lo + int(rng.choice(probs.size, p=probs))

    def draw_global(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.global_probs.size, p=self.global_probs))


def _label_probs(spec: SynthSpec, preferred: int) -> np.ndarray:
    if math.isinf(spec.noise):
        return np.full(spec.actions, 1.0 / spec.actions)
    logits = np.zeros(spec.actions)
    if spec.noise == 0.0:
        out = np.zeros(spec.actions)
        out[preferred] = 1.0
        return out
    logits[preferred] = spec.label_gain / spec.noise
    e = np.exp(logits - logits.max())
    return e / e.sum()


def generate_user(spec: SynthSpec, user_index: int, sampler: _ItemSampler | None = None) -> Record:
    """One user's record, deterministic in (spec.seed, user_index)."""
    rng = make_rng(spec.seed, user_index)
    sampler = sampler or _ItemSampler(spec)

    interest = int(rng.integers(spec.num_interests))
    # raw per-slot values; the emitted ids add per-slot offsets so slot j's
    # value v never collides with slot k's value v in the shared field table
    values = []
    if rng.random() < spec.field_match:
        values.append(interest % spec.field_cards[0])
    else:
        values.append(int(rng.integers(spec.field_cards[0])))
    for card in spec.field_cards[1:]:
        values.append(int(rng.choice(card, p=zipf_probs(card, spec.zipf_exponent))))
    offsets = spec.field_offsets()
    fields = [int(offsets[j] + v) for j, v in enumerate(values)]

    events: list[tuple[int, int]] = []
    current = interest
    prev_cluster = -1
    for _ in range(spec.history_len + spec.num_targets):
        if rng.random() < spec.drift_rate:
            current = int(rng.integers(spec.num_interests))
        if rng.random() < spec.markov_mix:
            item = sampler.draw_in_cluster(rng, current)
        else:
            item = sampler.draw_global(rng)
        cluster = int(item_cluster(item, spec.items, spec.num_interests))
        if spec.label_mode == "static_only":
            preferred = values[1] % spec.actions if spec.num_fields > 1 else values[0] % spec.actions
        else:
            match = 1 if cluster == prev_cluster else 0
            preferred = (values[0] + match) % spec.actions
        action = int(rng.choice(spec.actions, p=_label_probs(spec, preferred)))
        events.append((item, action))
        prev_cluster = cluster

    return Record(
        fields=fields,
        history=events[: spec.history_len],
        targets=events[spec.history_len:],
    )


def generate(spec: SynthSpec) -> list[Record]:
    """The full corpus: one record per user, independent per-user streams."""
    sampler = _ItemSampler(spec)
    return [generate_user(spec, u, sampler) for u in range(spec.users)]


def split(
    records: list[Record], fractions: tuple[float, float, float], seed: int
) -> tuple[list[Record], list[Record], list[Record]]:
    """User-level split; fractions must sum to 1."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"fractions must be 3 non-negative numbers summing to 1: {fractions}")
    n = len(records)
    perm = make_rng(seed, _SPLIT_STREAM).permutation(n)
    n_train = int(fractions[0] * n)
    n_valid = int(fractions[1] * n)
    train = [records[i] for i in perm[:n_train]]
    valid = [records[i] for i in perm[n_train:n_train + n_valid]]
    test = [records[i] for i in perm[n_train + n_valid:]]
    return train, valid, test


def records_to_streams(
    records: list[Record],
    spec: StreamSpec,
    supervision: Supervision,
    drop_fields: bool = False,
) -> list[TokenStream]:
    """Tokenize records; drop_fields builds sequence-only streams (M = 0)."""
    out = []
    for r in records:
        fields = [] if drop_fields else r.fields
        out.append(build_stream(spec, fields, r.history, r.targets, supervision))
    return out


def label_marginals(records: list[Record], actions: int) -> np.ndarray:
    """Empirical action frequencies over history plus targets."""
    counts = np.zeros(actions, dtype=np.int64)
    for r in records:
        for _, a in r.history:
            counts[a] += 1
        for _, a in r.targets:
            counts[a] += 1
    total = counts.sum()
    if total == 0:
        raise DataError("no labelled events in records")
    return counts / total
