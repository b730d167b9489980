"""Stream layout: token order, type-aware positions, supervision, record IO."""

import numpy as np
import pytest

from tokenrec.numeric import DataError, make_rng
from tokenrec.stream import (
    Record,
    StreamSpec,
    Supervision,
    TokenStream,
    TokenType,
    build_stream,
    combined_table_indices,
    embed_stream,
    read_records,
    stream_from_record,
    stream_length,
    table_offsets,
    write_records,
)


def tiny_stream(supervision=Supervision.USER_CENTRIC):
    spec = StreamSpec(num_fields=2, history_len=1, num_targets=1)
    return spec, build_stream(
        spec, fields=[3, 1], history=[(7, 2)], targets=[(5, 0)], supervision=supervision
    )


class TestStreamLength:
    def test_counts_fields_events_targets_separators(self):
        assert stream_length(6, 64, 1, with_actions=True) == 6 + 128 + 1 + 2
        assert stream_length(6, 64, 1, with_actions=False) == 6 + 64 + 1 + 2
        assert stream_length(0, 0, 1, with_actions=True) == 3

    def test_spec_length_property(self):
        spec = StreamSpec(num_fields=2, history_len=3, num_targets=2)
        assert spec.length == 2 + 6 + 2 + 2
        assert spec.first_sep_index == 2
        assert spec.second_sep_index == 2 + 1 + 6

    def test_spec_rejects_zero_targets(self):
        with pytest.raises(DataError, match="at least one target"):
            StreamSpec(num_fields=1, history_len=1, num_targets=0)

    def test_spec_rejects_negative_counts(self):
        with pytest.raises(DataError):
            StreamSpec(num_fields=-1, history_len=1)


class TestBuildStream:
    def test_token_order_and_types(self):
        _, s = tiny_stream()
        want = [
            TokenType.FIELD, TokenType.FIELD, TokenType.SEP,
            TokenType.ITEM, TokenType.ACTION, TokenType.SEP, TokenType.TARGET,
        ]
        assert s.types.tolist() == [int(t) for t in want]
        assert s.ids.tolist() == [3, 1, 0, 7, 2, 0, 5]

    def test_type_aware_positions(self):
        """Fields sit at 0, an item/action pair shares its event index,
        separators inherit the preceding position, targets sit past the end."""
        spec, s = tiny_stream()
        assert s.positions.tolist() == [0, 0, 0, 1, 1, 1, spec.length + 1]

    def test_longer_history_positions(self):
        spec = StreamSpec(num_fields=1, history_len=3, num_targets=2)
        s = build_stream(
            spec, fields=[0], history=[(1, 0), (2, 1), (3, 0)],
            targets=[(4, 1), (5, 1)],
        )
        assert s.positions.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 3,
                                        spec.length + 1, spec.length + 1]

    def test_without_action_tokens(self):
        spec = StreamSpec(num_fields=1, history_len=2, num_targets=1, with_actions=False)
        s = build_stream(spec, fields=[0], history=[(4, 1), (6, 0)], targets=[(2, 1)])
        assert s.types.tolist() == [
            int(TokenType.FIELD), int(TokenType.SEP), int(TokenType.ITEM),
            int(TokenType.ITEM), int(TokenType.SEP), int(TokenType.TARGET),
        ]
        assert s.positions.tolist() == [0, 0, 1, 2, 2, spec.length + 1]
        # item positions still carry their action as the label
        assert s.action_labels.tolist()[2:4] == [1, 0]

    def test_user_centric_supervises_items_and_targets(self):
        _, s = tiny_stream(Supervision.USER_CENTRIC)
        assert s.loss_mask.tolist() == [False, False, False, True, False, False, True]

    def test_new_impression_supervises_targets_only(self):
        _, s = tiny_stream(Supervision.NEW_IMPRESSION)
        assert s.loss_mask.tolist() == [False] * 6 + [True]

    def test_labels_sit_on_items_and_targets(self):
        _, s = tiny_stream()
        assert s.action_labels.tolist() == [-1, -1, -1, 2, -1, -1, 0]

    def test_field_count_mismatch_raises(self):
        spec = StreamSpec(num_fields=2, history_len=1, num_targets=1)
        with pytest.raises(DataError, match="expected 2 fields"):
            build_stream(spec, fields=[1], history=[(0, 0)], targets=[(0, 0)])

    def test_history_count_mismatch_raises(self):
        spec = StreamSpec(num_fields=1, history_len=2, num_targets=1)
        with pytest.raises(DataError, match="expected 2 history events"):
            build_stream(spec, fields=[1], history=[(0, 0)], targets=[(0, 0)])

    def test_negative_action_id_raises(self):
        spec = StreamSpec(num_fields=0, history_len=1, num_targets=1)
        with pytest.raises(DataError, match="negative id"):
            build_stream(spec, fields=[], history=[(3, -1)], targets=[(1, 0)])

    def test_supervised_position_needs_label(self):
        """Without action tokens a missing history action leaves a supervised
        item position labelless, which the stream rejects."""
        spec = StreamSpec(num_fields=0, history_len=1, num_targets=1, with_actions=False)
        with pytest.raises(DataError, match="supervised position without an action label"):
            build_stream(spec, fields=[], history=[(3, -1)], targets=[(1, 0)])


class TestStreamValidation:
    def test_wrong_array_length_raises(self):
        spec = StreamSpec(num_fields=1, history_len=1, num_targets=1)
        n = spec.length
        with pytest.raises(DataError, match="ids has shape"):
            TokenStream(
                spec,
                ids=np.zeros(n + 1, dtype=np.int64),
                types=np.zeros(n, dtype=np.int64),
                positions=np.zeros(n, dtype=np.int64),
                loss_mask=np.zeros(n, dtype=bool),
                action_labels=np.full(n, -1, dtype=np.int64),
            )

    def test_json_round_trip(self):
        _, s = tiny_stream()
        back = TokenStream.from_json(s.to_json())
        assert back.spec == s.spec
        for name in ("ids", "types", "positions", "loss_mask", "action_labels"):
            assert np.array_equal(getattr(back, name), getattr(s, name))


class TestEmbeddingIndices:
    def test_table_offsets_stack_in_family_order(self):
        off = table_offsets(field_vocab=10, item_vocab=20, action_vocab=4)
        assert off == {"field": 0, "item": 10, "action": 30, "sep": 34}

    def test_combined_indices_route_each_family(self):
        _, s = tiny_stream()
        idx = combined_table_indices(s, field_vocab=10, item_vocab=20, action_vocab=4)
        # fields 3,1 -> 3,1; sep -> 34; item 7 -> 17; action 2 -> 32; target 5 -> 15
        assert idx.tolist() == [3, 1, 34, 17, 32, 34, 15]

    def test_targets_share_the_item_table(self):
        spec = StreamSpec(num_fields=0, history_len=1, num_targets=1)
        s = build_stream(spec, fields=[], history=[(2, 0)], targets=[(2, 1)])
        idx = combined_table_indices(s, field_vocab=5, item_vocab=8, action_vocab=3)
        item_pos = int(np.flatnonzero(s.types == TokenType.ITEM)[0])
        target_pos = int(np.flatnonzero(s.types == TokenType.TARGET)[0])
        assert idx[item_pos] == idx[target_pos]

    def test_out_of_vocabulary_id_raises(self):
        _, s = tiny_stream()  # item id 7
        with pytest.raises(DataError, match="out of range for item vocabulary of size 7"):
            combined_table_indices(s, field_vocab=10, item_vocab=7, action_vocab=4)

    def test_embed_stream_gathers_the_right_rows(self):
        _, s = tiny_stream()
        rng = make_rng(5)
        field_t = rng.normal(size=(10, 3))
        item_t = rng.normal(size=(20, 3))
        action_t = rng.normal(size=(4, 3))
        sep = rng.normal(size=3)
        x = embed_stream(s, field_t, item_t, action_t, sep)
        assert x.shape == (s.spec.length, 3)
        assert np.array_equal(x[0], field_t[3])
        assert np.array_equal(x[2], sep)
        assert np.array_equal(x[3], item_t[7])
        assert np.array_equal(x[4], action_t[2])
        assert np.array_equal(x[6], item_t[5])


class TestRecordIO:
    def test_line_round_trip(self):
        r = Record(fields=[1, 2], history=[(3, 0), (4, 1)], targets=[(5, 2)])
        back = Record.from_line(r.to_line())
        assert back.fields == r.fields
        assert back.history == r.history
        assert back.targets == r.targets

    def test_line_format_is_stable(self):
        r = Record(fields=[1, 2], history=[(3, 0)], targets=[(5, 2)])
        assert r.to_line() == "user_fields: 1,2 | history: 3:0 | targets: 5:2"

    def test_missing_section_raises(self):
        with pytest.raises(DataError, match="record needs 3 sections"):
            Record.from_line("user_fields: 1 | history: 2:0")

    def test_malformed_pair_raises(self):
        with pytest.raises(DataError, match="malformed record"):
            Record.from_line("user_fields: 1 | history: 2-0 | targets: 3:1")

    def test_non_numeric_field_raises(self):
        with pytest.raises(DataError, match="malformed record"):
            Record.from_line("user_fields: x | history: 2:0 | targets: 3:1")

    def test_file_round_trip_both_formats(self, tmp_path):
        records = [
            Record(fields=[0, 1], history=[(2, 3), (4, 0)], targets=[(6, 1)]),
            Record(fields=[5, 2], history=[(1, 1), (0, 2)], targets=[(3, 0)]),
        ]
        for fmt in ("lines", "jsonl"):
            path = tmp_path / f"records.{fmt}"
            write_records(path, records, fmt=fmt)
            back = read_records(path, fmt=fmt)
            assert len(back) == 2
            for a, b in zip(records, back):
                assert (a.fields, a.history, a.targets) == (b.fields, b.history, b.targets)

    def test_unknown_format_raises(self, tmp_path):
        rec = Record(fields=[1], history=[(2, 0)], targets=[(3, 1)])
        with pytest.raises(DataError, match="unknown record format"):
            write_records(tmp_path / "x", [rec], fmt="csv")

    def test_stream_from_record_matches_build_stream(self):
        spec = StreamSpec(num_fields=2, history_len=1, num_targets=1)
        r = Record(fields=[3, 1], history=[(7, 2)], targets=[(5, 0)])
        a = stream_from_record(spec, r, Supervision.USER_CENTRIC)
        _, b = tiny_stream()
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.positions, b.positions)
