import math
from dataclasses import dataclass

import numpy as np
import pytest

from sriqa.errors import LabelingError
from sriqa.labeling import (
    Anchor,
    DecayCurve,
    SubjectScores,
    fit_decay,
    label_curve,
    label_records,
    normalize_scores,
    screen_outliers,
)


def honest_panel(n, sample_values, jitter=0.0, rng=None):
    """n subjects scoring samples near their true 0..10 values."""
    panel = []
    for i in range(n):
        scores = {}
        for sid, v in sample_values.items():
            noise = rng.normal(0, jitter) if rng is not None and jitter else 0.0
            scores[sid] = float(np.clip(v + noise, 0, 10))
        panel.append(SubjectScores(f"subj{i}", scores))
    return panel


class TestNormalize:
    def test_mean_over_ten(self):
        panel = [SubjectScores(f"s{i}", {"a": v}) for i, v in enumerate([7.0, 8.0, 9.0])]
        assert normalize_scores(panel, "a") == pytest.approx(0.8)

    def test_needs_three_scores(self):
        panel = [SubjectScores("s0", {"a": 5.0}), SubjectScores("s1", {"a": 6.0}),
                 SubjectScores("s2", {"b": 6.0})]
        with pytest.raises(LabelingError, match="needs 3"):
            normalize_scores(panel, "a")

    def test_skips_subjects_without_the_sample(self):
        panel = [SubjectScores(f"s{i}", {"a": 6.0}) for i in range(3)]
        panel.append(SubjectScores("s3", {"b": 0.0}))
        assert normalize_scores(panel, "a") == pytest.approx(0.6)


class TestScreening:
    def test_small_panel_rejected(self):
        panel = honest_panel(4, {"a": 5.0})
        with pytest.raises(LabelingError, match="at least 5"):
            screen_outliers(panel)

    def test_identical_panel_keeps_everyone(self):
        panel = honest_panel(6, {"a": 5.0, "b": 7.0})
        kept, rejected = screen_outliers(panel)
        assert len(kept) == 6 and rejected == []

    def test_planted_outlier_rejected(self, rng):
        values = {f"t{i}": v for i, v in enumerate([2.0, 3.0, 5.0, 7.0, 8.0, 9.0])}
        panel = honest_panel(9, values, jitter=0.3, rng=rng)
        inverted = {sid: 10.0 - v for sid, v in values.items()}
        panel.append(SubjectScores("bad", inverted))
        kept, rejected = screen_outliers(panel)
        assert rejected == ["bad"]
        assert {s.subject_id for s in kept} == {f"subj{i}" for i in range(9)}

    def test_share_threshold_is_strict(self):
        # 1 outlying score out of 5 = 0.2 exactly, which must NOT reject
        values = {f"t{i}": 5.0 for i in range(5)}
        panel = honest_panel(7, values)
        for i, subj in enumerate(panel):
            subj.scores["t0"] = 4.0 + 0.4 * i  # spread so sigma is finite
        edge = SubjectScores("edge", dict(values))
        edge.scores["t0"] = 10.0
        panel.append(edge)
        kept, rejected = screen_outliers(panel)
        outlying_possible = [sid for sid in values]
        assert "edge" in {s.subject_id for s in kept}, (rejected, outlying_possible)

    def test_all_rejected_raises(self):
        # sample j: subject j scores 10, subject j+1 scores 0, rest score 5.
        # Every subject is then extreme on 2 of 9 samples (22% > 20%) while
        # each sample's 2-sigma band (sigma ~ 2.36) still flags both extremes.
        panel = []
        for i in range(9):
            scores = {}
            for j in range(9):
                scores[f"t{j}"] = 10.0 if i == j else (0.0 if i == (j + 1) % 9 else 5.0)
            panel.append(SubjectScores(f"s{i}", scores))
        with pytest.raises(LabelingError, match="every subject"):
            screen_outliers(panel)

    def test_out_of_range_score_rejected(self):
        panel = honest_panel(5, {"a": 5.0})
        panel[0].scores["a"] = 11.0
        with pytest.raises(LabelingError, match="out of range"):
            screen_outliers(panel)

    def test_duplicate_subject_ids_rejected(self):
        panel = honest_panel(5, {"a": 5.0})
        panel[1].subject_id = panel[0].subject_id
        with pytest.raises(LabelingError, match="duplicate"):
            screen_outliers(panel)


class TestDecayFit:
    def test_single_anchor_closed_form(self):
        curve = fit_decay([Anchor(iteration=1, imos=0.7769)])
        assert curve.b == pytest.approx(-math.log(0.7769))
        assert curve.at(2) == pytest.approx(0.6036, abs=1e-3)

    def test_multi_anchor_matches_lstsq(self, rng):
        b_true = 0.31
        anchors = [Anchor(t, math.exp(-b_true * t) + rng.normal(0, 0.01)) for t in (1, 3, 5)]
        curve = fit_decay(anchors)
        k = np.array([a.iteration for a in anchors], dtype=float)
        y = -np.log([a.imos for a in anchors])
        want = np.linalg.lstsq(k[:, None], y, rcond=None)[0][0]
        assert curve.b == pytest.approx(want, rel=1e-12)
        assert curve.b == pytest.approx(b_true, abs=0.02)

    def test_perfect_score_rejected(self):
        with pytest.raises(LabelingError, match=r"\(0, 1\)"):
            fit_decay([Anchor(1, 1.0)])

    def test_zero_and_negative_rejected(self):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(LabelingError):
                fit_decay([Anchor(2, bad)])

    def test_no_anchors(self):
        with pytest.raises(LabelingError):
            fit_decay([])

    def test_bad_iteration(self):
        with pytest.raises(LabelingError):
            fit_decay([Anchor(0, 0.5)])


class TestLabelCurve:
    def test_exponential_values(self):
        curve = DecayCurve(b=0.25)
        labels = label_curve(curve, 4)
        assert labels == pytest.approx([math.exp(-0.25 * t) for t in (1, 2, 3, 4)])
        assert curve.at(0) == 1.0

    def test_monotone_decreasing(self):
        labels = label_curve(DecayCurve(b=0.1), 8)
        assert all(a > b for a, b in zip(labels, labels[1:]))

    def test_bad_t_max(self):
        with pytest.raises(LabelingError):
            label_curve(DecayCurve(b=0.2), 0)


@dataclass
class Rec:
    sample_id: str
    content_id: str
    content_class: str
    sr_method: str
    factor: float
    iteration: int
    imos: float = None


def make_records(contents=("c1", "c2"), t_max=4):
    recs = []
    for cid in contents:
        for t in range(1, t_max + 1):
            recs.append(Rec(f"{cid}__bicubic__f2__t{t}", cid, "scenery", "bicubic", 2.0, t))
    return recs


class TestLabelRecords:
    def test_end_to_end(self, rng):
        recs = make_records()
        truth = {"c1": 0.2, "c2": 0.4}
        anchor_ids = {"c1__bicubic__f2__t2": 10 * math.exp(-0.2 * 2),
                      "c2__bicubic__f2__t2": 10 * math.exp(-0.4 * 2)}
        panel = honest_panel(6, anchor_ids)
        recs, curves, rejected = label_records(recs, panel)
        assert rejected == []
        assert set(curves) == {"c1__bicubic__f2", "c2__bicubic__f2"}
        for rec in recs:
            assert rec.imos == pytest.approx(math.exp(-truth[rec.content_id] * rec.iteration), abs=1e-9)

    def test_missing_group_anchor(self):
        recs = make_records()
        panel = honest_panel(6, {"c1__bicubic__f2__t2": 6.0})
        with pytest.raises(LabelingError, match="c2__bicubic__f2"):
            label_records(recs, panel)

    def test_unknown_scored_sample(self):
        recs = make_records()
        panel = honest_panel(6, {"nope": 6.0, "c1__bicubic__f2__t2": 6.0, "c2__bicubic__f2__t2": 6.0})
        with pytest.raises(LabelingError, match="nope"):
            label_records(recs, panel)
