import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from affectrl.affect import (
    LABELS,
    AffectPoint,
    CircumplexTable,
    EmotionLabel,
    circumplex_reward,
    combine_rewards,
    fuse_affect,
    label_reward,
    sam_to_unit,
)

TABLE = CircumplexTable.default()
unit = st.floats(-1.0, 1.0, allow_nan=False)


class TestReward:
    def test_neutral_zero(self):
        assert circumplex_reward(AffectPoint(0.0, 0.0)) == 0.0
        assert label_reward(EmotionLabel.NEUTRAL, TABLE) == 0.0

    def test_joy(self):
        assert label_reward(EmotionLabel.JOY, TABLE) == pytest.approx(0.94340, abs=1e-5)

    def test_sadness(self):
        assert label_reward(EmotionLabel.SADNESS, TABLE) == pytest.approx(-0.80623, abs=1e-5)

    @pytest.mark.parametrize("label", ["Anger", "Fear", "Disgust", "Sadness"])
    def test_negative_labels(self, label):
        assert label_reward(EmotionLabel.parse(label), TABLE) < 0

    @pytest.mark.parametrize("label", ["Joy", "Surprise"])
    def test_positive_labels(self, label):
        assert label_reward(EmotionLabel.parse(label), TABLE) > 0

    @given(unit, unit)
    def test_magnitude_and_sign(self, a, v):
        r = circumplex_reward(AffectPoint(a, v))
        assert abs(abs(r) - math.hypot(a, v)) < 1e-12
        assert abs(r) <= math.sqrt(2) + 1e-12
        if v < 0:
            assert r <= 0
        else:
            assert r >= 0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            AffectPoint(1.5, 0.0)


class TestTable:
    def test_default_coordinates(self):
        assert TABLE[EmotionLabel.JOY] == AffectPoint(0.5, 0.8)
        assert TABLE[EmotionLabel.SADNESS] == AffectPoint(-0.4, -0.7)
        assert len(TABLE) == 7

    def test_dumps_roundtrip(self):
        assert CircumplexTable.parse(TABLE.dumps()) == TABLE

    def test_missing_label(self):
        with pytest.raises(ValueError, match="missing"):
            CircumplexTable.parse("Joy = 0.5, 0.8\n")

    def test_label_parse_case_insensitive(self):
        assert EmotionLabel.parse(" jOy ") is EmotionLabel.JOY
        with pytest.raises(ValueError):
            EmotionLabel.parse("happy")

    def test_label_order(self):
        assert [lab.value for lab in LABELS] == ["Anger", "Disgust", "Sadness", "Joy", "Neutral", "Surprise", "Fear"]


class TestFusion:
    def test_single(self):
        p = AffectPoint(0.3, -0.2)
        assert fuse_affect([(p, 0.7)]) == p

    def test_midpoint(self):
        out = fuse_affect([(AffectPoint(0.0, 1.0), 1.0), (AffectPoint(1.0, 0.0), 1.0)])
        assert out == AffectPoint(0.5, 0.5)

    def test_idempotent(self):
        assert fuse_affect([(AffectPoint(1, 1), 2), (AffectPoint(1, 1), 3)]) == AffectPoint(1.0, 1.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            fuse_affect([])
        with pytest.raises(ValueError):
            fuse_affect([(AffectPoint(0, 0), 0.0)])

    @given(st.lists(st.tuples(unit, unit, st.floats(0.01, 5.0)), min_size=1, max_size=5), st.floats(0.1, 10.0))
    def test_scale_and_permutation_invariant(self, items, k):
        est = [(AffectPoint(a, v), w) for a, v, w in items]
        base = fuse_affect(est)
        scaled = fuse_affect([(p, w * k) for p, w in est])
        rev = fuse_affect(est[::-1])
        for other in (scaled, rev):
            assert abs(other.arousal - base.arousal) < 1e-12
            assert abs(other.valence - base.valence) < 1e-12


class TestSam:
    def test_values(self):
        assert sam_to_unit(5) == 0.0
        assert sam_to_unit(9) == 1.0
        assert sam_to_unit(1) == -1.0
        assert sam_to_unit(7) == 0.5

    @pytest.mark.parametrize("bad", [0, 10, 2.5])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            sam_to_unit(bad)


class TestCombine:
    def test_endpoints(self):
        assert combine_rewards(0.3, -0.9, 1.0) == 0.3
        assert combine_rewards(0.3, -0.9, 0.0) == -0.9

    def test_half(self):
        assert combine_rewards(0.8, 0.2, 0.5) == pytest.approx(0.5)

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            combine_rewards(0.0, 0.0, 1.1)

    @given(unit, unit, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone(self, e, i, lam, d):
        assert combine_rewards(e + d, i, lam) >= combine_rewards(e, i, lam) - 1e-12
        assert combine_rewards(e, i + d, lam) >= combine_rewards(e, i, lam) - 1e-12
