"""Visibility schedules: causal baseline, shrinking windows, static discard."""

import math

import numpy as np
import pytest

from tokenrec.masks import (
    PRESET_NAMES,
    MaskSchedule,
    build_layer_mask,
    build_masks,
    causal_mask,
    preset,
    receptive_width,
)
from tokenrec.numeric import NEG_INF, ConfigError


def visible(mask: np.ndarray) -> np.ndarray:
    return mask == 0.0


class TestScheduleValidation:
    def test_window_count_must_match_depth(self):
        with pytest.raises(ConfigError, match="needs 2 window widths"):
            MaskSchedule(depth=4, full_layers=2, windows=(8,))

    def test_windows_must_strictly_shrink(self):
        with pytest.raises(ConfigError, match="strictly shrink"):
            MaskSchedule(depth=4, full_layers=2, windows=(8, 8))
        with pytest.raises(ConfigError, match="strictly shrink"):
            MaskSchedule(depth=4, full_layers=2, windows=(8, 16))

    def test_window_width_at_least_one(self):
        with pytest.raises(ConfigError, match=">= 1"):
            MaskSchedule(depth=2, full_layers=1, windows=(0,))

    def test_full_layers_bounds(self):
        with pytest.raises(ConfigError):
            MaskSchedule(depth=2, full_layers=3, windows=())

    def test_override_must_cover_every_layer(self):
        with pytest.raises(ConfigError, match="one width per layer"):
            MaskSchedule(depth=4, full_layers=2, windows=(8, 4),
                         omega_override=(8.0, 4.0, math.inf))

    def test_override_finite_widths_must_equal_windows(self):
        with pytest.raises(ConfigError, match="must equal windows"):
            MaskSchedule(depth=4, full_layers=2, windows=(8, 4),
                         omega_override=(9.0, 4.0, math.inf, math.inf))

    def test_round_trip_through_dict(self):
        for sched in (
            preset("4F"),
            preset("2F2S", windows=(10, 5), static_prefix=3),
            preset("2S2F", windows=(10, 5), static_prefix=3),
            preset("4S", windows=(12, 9, 6, 3), static_prefix=2),
        ):
            assert MaskSchedule.from_dict(sched.to_dict()) == sched


class TestWindowWidths:
    def test_full_layers_have_infinite_width(self):
        sched = preset("2F2S", windows=(8, 4), static_prefix=2)
        assert sched.window_width(0) == math.inf
        assert sched.window_width(1) == math.inf
        assert sched.window_width(2) == 8.0
        assert sched.window_width(3) == 4.0

    def test_override_reorders_layers(self):
        sched = preset("2S2F", windows=(8, 4), static_prefix=2)
        assert sched.window_width(0) == 8.0
        assert sched.window_width(1) == 4.0
        assert sched.window_width(2) == math.inf
        assert sched.window_width(3) == math.inf

    def test_layer_out_of_range(self):
        sched = preset("4F")
        with pytest.raises(ConfigError, match="outside schedule"):
            sched.window_width(4)

    def test_discard_applies_only_on_windowed_layers(self):
        sched = preset("2F2S", windows=(8, 4), static_prefix=2, discard_static=True)
        assert [sched.discards_on(l) for l in range(4)] == [False, False, True, True]
        reversed_sched = preset("2S2F", windows=(8, 4), static_prefix=2)
        assert [reversed_sched.discards_on(l) for l in range(4)] == [True, True, False, False]

    def test_discard_needs_a_prefix(self):
        sched = preset("2F2S", windows=(8, 4), static_prefix=0, discard_static=True)
        assert not any(sched.discards_on(l) for l in range(4))


class TestPresets:
    def test_preset_names(self):
        assert set(PRESET_NAMES) == {"4F", "2F2S", "2S2F", "4S"}
        with pytest.raises(ConfigError, match="unknown schedule preset"):
            preset("3F1S")

    def test_all_full_takes_no_windows(self):
        sched = preset("4F")
        assert sched.depth == 4 and sched.full_layers == 4
        with pytest.raises(ConfigError, match="takes no window widths"):
            preset("4F", windows=(8, 4))

    def test_window_presets_have_defaults(self):
        assert preset("2F2S").windows == (32, 16)
        assert preset("2S2F").windows == (32, 16)
        assert preset("4S").windows == (32, 24, 16, 8)

    def test_wrong_width_counts(self):
        with pytest.raises(ConfigError, match="exactly 2"):
            preset("2F2S", windows=(8,))
        with pytest.raises(ConfigError, match="exactly 4"):
            preset("4S", windows=(8, 4))


class TestLayerMasks:
    def test_full_layer_equals_causal(self):
        sched = preset("4F")
        for layer in range(4):
            assert np.array_equal(build_layer_mask(sched, layer, 9), causal_mask(9))

    def test_mask_values_are_zero_or_neg_inf(self):
        sched = preset("2F2S", windows=(4, 2), static_prefix=2, discard_static=True)
        for layer in range(4):
            m = build_layer_mask(sched, layer, 10)
            assert set(np.unique(m)) <= {0.0, NEG_INF}

    def test_row_visibility_is_min_of_position_and_window(self):
        """Causal row i sees i+1 positions; a window of width w caps that at w."""
        sched = MaskSchedule(depth=1, full_layers=0, windows=(4,))
        m = build_layer_mask(sched, 0, 12)
        for i in range(12):
            assert receptive_width(m, i) == min(i + 1, 4)

    def test_window_keeps_most_recent_positions(self):
        sched = MaskSchedule(depth=1, full_layers=0, windows=(3,))
        m = build_layer_mask(sched, 0, 8)
        assert visible(m)[6].tolist() == [False] * 4 + [True, True, True, False]

    def test_diagonal_always_visible(self):
        sched = preset("2F2S", windows=(4, 2), static_prefix=3, discard_static=True)
        for layer in range(4):
            m = build_layer_mask(sched, layer, 9)
            assert np.all(np.diag(m) == 0.0)

    def test_never_sees_the_future(self):
        for name, windows in (("4F", None), ("2F2S", (5, 2)), ("2S2F", (5, 2)),
                              ("4S", (7, 5, 3, 2))):
            sched = preset(name, windows=windows, static_prefix=2, discard_static=True)
            for layer in range(sched.depth):
                m = build_layer_mask(sched, layer, 11)
                assert np.all(m[np.triu_indices(11, k=1)] == NEG_INF)

    def test_windowed_visibility_nests_as_windows_shrink(self):
        """Deeper windowed layers see a subset of what shallower ones see."""
        sched = preset("4S", windows=(8, 6, 4, 2), static_prefix=2, discard_static=True)
        masks = build_masks(sched, 16)
        for shallow, deep in zip(masks, masks[1:]):
            assert np.all(visible(deep) <= visible(shallow))

    def test_discard_hides_static_prefix_from_later_rows(self):
        sched = preset("2F2S", windows=(6, 3), static_prefix=3, discard_static=True)
        m_full = build_layer_mask(sched, 0, 12)
        m_win = build_layer_mask(sched, 2, 12)
        # full layer: row 5 still sees the three static columns
        assert visible(m_full)[5, :3].tolist() == [True] * 3
        # windowed layer: rows at or past the prefix lose them
        assert visible(m_win)[5, :3].tolist() == [False] * 3
        assert np.all(~visible(m_win)[3:, :3])

    def test_discard_keeps_prefix_rows_self_visible(self):
        """Static rows live before the prefix boundary and keep causal sight."""
        sched = preset("2F2S", windows=(6, 3), static_prefix=3, discard_static=True)
        m = build_layer_mask(sched, 3, 12)
        assert visible(m)[2, :3].tolist() == [True, True, True]
        assert visible(m)[0, 0]

    def test_without_discard_static_columns_stay_visible(self):
        sched = preset("2F2S", windows=(6, 3), static_prefix=3, discard_static=False)
        m = build_layer_mask(sched, 3, 12)
        assert visible(m)[4, 2]  # window covers it, no discard rule

    def test_prefix_larger_than_sequence_is_clamped(self):
        sched = preset("2F2S", windows=(6, 3), static_prefix=100, discard_static=True)
        m = build_layer_mask(sched, 2, 5)
        assert np.all(np.diag(m) == 0.0)

    def test_receptive_width_row_bounds(self):
        m = causal_mask(4)
        with pytest.raises(ConfigError, match="outside mask"):
            receptive_width(m, 4)


class TestScheduleOracle:
    def test_all_full_mask_is_plain_causal_any_length(self):
        sched = MaskSchedule(depth=3, full_layers=3, windows=())
        for seq in (1, 2, 7, 33):
            for layer in range(3):
                assert np.array_equal(build_layer_mask(sched, layer, seq),
                                      causal_mask(seq))

    def test_window_wider_than_sequence_is_causal(self):
        sched = MaskSchedule(depth=1, full_layers=0, windows=(50,))
        assert np.array_equal(build_layer_mask(sched, 0, 10), causal_mask(10))

    def test_brute_force_rule(self):
        """Every (i, j) entry follows the visibility rule verbatim."""
        sched = preset("2F2S", windows=(5, 2), static_prefix=3, discard_static=True)
        seq = 13
        for layer in range(4):
            omega = sched.window_width(layer)
            m = build_layer_mask(sched, layer, seq)
            for i in range(seq):
                for j in range(seq):
                    want = j <= i and (i - j) < omega
                    if sched.discards_on(layer) and i >= 3 and j < 3:
                        want = False
                    assert (m[i, j] == 0.0) == want
