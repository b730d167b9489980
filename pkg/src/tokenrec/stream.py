"""Unified token stream: layout, type-aware positions, records, embedding.

One stream serializes a user's static fields, the chronological interaction
history (optionally interleaved with action tokens), and target impressions
into a single token sequence:

    [field_1..field_M, sep, item_1(, act_1)..item_T(, act_T), sep, target_1..target_K]

Positions are type-aware: every Field token sits at position 0, Item/Action
tokens carry their 1-based chronological index (a pair shares one index),
separators inherit the position of the preceding token (the first separator
reads 0 when there are no fields), and Target tokens all sit at
stream_length + 1, one step past any history.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .numeric import DataError

NUM_SEPARATORS = 2


class TokenType(IntEnum):
    FIELD = 0
    SEP = 1
    ITEM = 2
    ACTION = 3
    TARGET = 4


class Supervision(IntEnum):
    """Which positions carry loss: every history item, or targets only."""

    USER_CENTRIC = 0
    NEW_IMPRESSION = 1


def stream_length(num_fields: int, history_len: int, num_targets: int, with_actions: bool) -> int:
    """Total token count of one stream."""
    per_event = 2 if with_actions else 1
    return num_fields + per_event * history_len + num_targets + NUM_SEPARATORS


@dataclass(frozen=True)
class StreamSpec:
    """Shape of every stream in a dataset."""

    num_fields: int
    history_len: int
    num_targets: int = 1
    with_actions: bool = True

    def __post_init__(self) -> None:
        if self.num_fields < 0 or self.history_len < 0:
            raise DataError("num_fields and history_len must be non-negative")
        if self.num_targets < 1:
            raise DataError("a stream needs at least one target")

    @property
    def length(self) -> int:
        return stream_length(
            self.num_fields, self.history_len, self.num_targets, self.with_actions
        )

    @property
    def first_sep_index(self) -> int:
        return self.num_fields

    @property
    def second_sep_index(self) -> int:
        per_event = 2 if self.with_actions else 1
        return self.num_fields + 1 + per_event * self.history_len

    def to_dict(self) -> dict:
        return {
            "num_fields": self.num_fields,
            "history_len": self.history_len,
            "num_targets": self.num_targets,
            "with_actions": self.with_actions,
        }

    @staticmethod
    def from_dict(d: dict) -> "StreamSpec":
        return StreamSpec(
            num_fields=int(d["num_fields"]),
            history_len=int(d["history_len"]),
            num_targets=int(d["num_targets"]),
            with_actions=bool(d["with_actions"]),
        )


@dataclass
class TokenStream:
    """One serialized user: ids, token types, positions, and supervision."""

    spec: StreamSpec
    ids: np.ndarray          # int64, index into the token family's table
    types: np.ndarray        # int64, TokenType values
    positions: np.ndarray    # int64, type-aware positions
    loss_mask: np.ndarray    # bool, True where loss is computed
    action_labels: np.ndarray  # int64, label in [0, A) where supervised, else -1

    def __post_init__(self) -> None:
        n = self.spec.length
        for name in ("ids", "types", "positions", "loss_mask", "action_labels"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise DataError(f"{name} has shape {arr.shape}, stream needs ({n},)")
        if np.any(self.loss_mask & (self.action_labels < 0)):
            raise DataError("supervised position without an action label")

    def to_json(self) -> str:
        payload = {
            "spec": self.spec.to_dict(),
            "ids": self.ids.tolist(),
            "types": self.types.tolist(),
            "positions": self.positions.tolist(),
            "loss_mask": self.loss_mask.astype(int).tolist(),
            "action_labels": self.action_labels.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TokenStream":
        d = json.loads(text)
        return TokenStream(
            spec=StreamSpec.from_dict(d["spec"]),
            ids=np.asarray(d["ids"], dtype=np.int64),
            types=np.asarray(d["types"], dtype=np.int64),
            positions=np.asarray(d["positions"], dtype=np.int64),
            loss_mask=np.asarray(d["loss_mask"], dtype=bool),
            action_labels=np.asarray(d["action_labels"], dtype=np.int64),
        )


def build_stream(
    spec: StreamSpec,
    fields: list[int],
    history: list[tuple[int, int]],
    targets: list[tuple[int, int]],
    supervision: Supervision = Supervision.USER_CENTRIC,
) -> TokenStream:
    """Assemble one stream from raw ids.

    history is a list of (item_id, action_id) pairs; targets likewise carry
    (item_id, action_label) so supervised target positions have labels.
    """
    if len(fields) != spec.num_fields:
        raise DataError(f"expected {spec.num_fields} fields, got {len(fields)}")
    if len(history) != spec.history_len:
        raise DataError(f"expected {spec.history_len} history events, got {len(history)}")
    if len(targets) != spec.num_targets:
        raise DataError(f"expected {spec.num_targets} targets, got {len(targets)}")
    if not targets:
        raise DataError("empty targets: a stream must score at least one impression")

    n = spec.length
    ids = np.zeros(n, dtype=np.int64)
    types = np.zeros(n, dtype=np.int64)
    positions = np.zeros(n, dtype=np.int64)
    labels = np.full(n, -1, dtype=np.int64)

    i = 0
    for f in fields:
        ids[i], types[i], positions[i] = f, TokenType.FIELD, 0
        i += 1
    types[i], positions[i] = TokenType.SEP, 0  # inherits a field position, or 0
    i += 1
    for t, (item, action) in enumerate(history, start=1):
        ids[i], types[i], positions[i] = item, TokenType.ITEM, t
        labels[i] = action
        i += 1
        if spec.with_actions:
            ids[i], types[i], positions[i] = action, TokenType.ACTION, t
            i += 1
    types[i], positions[i] = TokenType.SEP, spec.history_len
    i += 1
    for item, label in targets:
        ids[i], types[i], positions[i] = item, TokenType.TARGET, n + 1
        labels[i] = label
        i += 1
    assert i == n

    if np.any(ids < 0) or np.any(labels < -1):
        raise DataError("negative id in stream")

    if supervision == Supervision.USER_CENTRIC:
        loss_mask = (types == TokenType.ITEM) | (types == TokenType.TARGET)
    elif supervision == Supervision.NEW_IMPRESSION:
        loss_mask = types == TokenType.TARGET
    else:
        raise DataError(f"unknown supervision mode: {supervision!r}")

    return TokenStream(spec, ids, types, positions, loss_mask, labels)


def table_offsets(field_vocab: int, item_vocab: int, action_vocab: int) -> dict[str, int]:
    """Row offsets of each family inside the stacked embedding table.

    Stacking order: field rows, item rows, action rows, one separator row.
    """
    return {
        "field": 0,
        "item": field_vocab,
        "action": field_vocab + item_vocab,
        "sep": field_vocab + item_vocab + action_vocab,
    }


def combined_table_indices(
    stream: TokenStream, field_vocab: int, item_vocab: int, action_vocab: int
) -> np.ndarray:
    """Per-token row index into the stacked embedding table.

    Target tokens share the item table. Raises when an id falls outside its
    family's vocabulary.
    """
    off = table_offsets(field_vocab, item_vocab, action_vocab)
    limits = {
        int(TokenType.FIELD): field_vocab,
        int(TokenType.ITEM): item_vocab,
        int(TokenType.TARGET): item_vocab,
        int(TokenType.ACTION): action_vocab,
    }
    base = {
        int(TokenType.FIELD): off["field"],
        int(TokenType.ITEM): off["item"],
        int(TokenType.TARGET): off["item"],
        int(TokenType.ACTION): off["action"],
    }
    out = np.empty(stream.spec.length, dtype=np.int64)
    for i, (tok_id, tok_type) in enumerate(zip(stream.ids, stream.types)):
        t = int(tok_type)
        if t == TokenType.SEP:
            out[i] = off["sep"]
            continue
        if not 0 <= tok_id < limits[t]:
            raise DataError(
                f"token id {tok_id} out of range for {TokenType(t).name.lower()} "
                f"vocabulary of size {limits[t]}"
            )
        out[i] = base[t] + tok_id
    return out


def embed_stream(
    stream: TokenStream,
    field_table: np.ndarray,
    item_table: np.ndarray,
    action_table: np.ndarray,
    sep_row: np.ndarray,
) -> np.ndarray:
    """Dense (length, dim) input matrix for one stream."""
    stacked = np.concatenate(
        [field_table, item_table, action_table, np.atleast_2d(sep_row)], axis=0
    )
    idx = combined_table_indices(
        stream, field_table.shape[0], item_table.shape[0], action_table.shape[0]
    )
    return stacked[idx]


# -- dataset records ----------------------------------------------------------


@dataclass
class Record:
    """One user's raw interaction data before tokenization."""

    fields: list[int] = field(default_factory=list)
    history: list[tuple[int, int]] = field(default_factory=list)
    targets: list[tuple[int, int]] = field(default_factory=list)

    def to_line(self) -> str:
        f = ",".join(str(x) for x in self.fields)
        h = ",".join(f"{i}:{a}" for i, a in self.history)
        t = ",".join(f"{i}:{a}" for i, a in self.targets)
        return f"user_fields: {f} | history: {h} | targets: {t}"

    @staticmethod
    def from_line(line: str) -> "Record":
        parts = [p.strip() for p in line.strip().split("|")]
        if len(parts) != 3:
            raise DataError(f"record needs 3 sections, got {len(parts)}: {line!r}")
        sections = {}
        for part, key in zip(parts, ("user_fields", "history", "targets")):
            prefix = key + ":"
            if not part.startswith(prefix):
                raise DataError(f"expected section {key!r} in record: {line!r}")
            sections[key] = part[len(prefix):].strip()

        def ints(text: str) -> list[int]:
            return [int(x) for x in text.split(",") if x.strip() != ""]

        def pairs(text: str) -> list[tuple[int, int]]:
            out = []
            for chunk in text.split(","):
                chunk = chunk.strip()
                if not chunk:
                    continue
                try:
                    item, action = chunk.split(":")
                except ValueError as exc:
                    raise DataError(f"malformed item:action pair {chunk!r}") from exc
                out.append((int(item), int(action)))
            return out

        try:
            return Record(
                fields=ints(sections["user_fields"]),
                history=pairs(sections["history"]),
                targets=pairs(sections["targets"]),
            )
        except ValueError as exc:
            raise DataError(f"malformed record: {line!r}") from exc

    def to_dict(self) -> dict:
        return {
            "user_fields": list(self.fields),
            "history": [[i, a] for i, a in self.history],
            "targets": [[i, a] for i, a in self.targets],
        }

    @staticmethod
    def from_dict(d: dict) -> "Record":
        return Record(
            fields=[int(x) for x in d["user_fields"]],
            history=[(int(i), int(a)) for i, a in d["history"]],
            targets=[(int(i), int(a)) for i, a in d["targets"]],
        )


def write_records(path, records: list[Record], fmt: str = "lines") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            if fmt == "lines":
                fh.write(r.to_line() + "\n")
            elif fmt == "jsonl":
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            else:
                raise DataError(f"unknown record format {fmt!r}")


def read_records(path, fmt: str = "lines") -> list[Record]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            if fmt == "lines":
                out.append(Record.from_line(line))
            elif fmt == "jsonl":
                out.append(Record.from_dict(json.loads(line)))
            else:
                raise DataError(f"unknown record format {fmt!r}")
    return out


def stream_from_record(
    spec: StreamSpec, record: Record, supervision: Supervision
) -> TokenStream:
    return build_stream(spec, record.fields, record.history, record.targets, supervision)
