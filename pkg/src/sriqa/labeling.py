"""Semi-automatic labeling: subjective anchors to full decay curves.

A degradation group (one content, SR method, and factor) gets a single
human-scored anchor iteration. Quality over iterations is modeled as
q(t) = exp(-b*t) with b > 0, so one anchor pins the whole curve and
every iteration of the group can be labeled without further scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LabelingError

# screening thresholds: a score is outlying beyond 2 sigma of its
# sample's panel stats; a subject falls when over 20% of their scores
# are outlying; both from one pass over the raw panel.
SIGMA_FACTOR = 2.0
OUTLIER_SHARE = 0.2
MIN_PANEL = 5
MIN_SCORES_PER_SAMPLE = 3


@dataclass
class SubjectScores:
    """Raw 0..10 scores from one subject, keyed by sample id."""

    subject_id: str
    scores: dict = field(default_factory=dict)


@dataclass
class Anchor:
    iteration: int
    imos: float


@dataclass
class DecayCurve:
    b: float

    def at(self, t) -> float:
        return math.exp(-self.b * t)


def _validate_panel(panel):
    if len({s.subject_id for s in panel}) != len(panel):
        raise LabelingError("duplicate subject ids in panel")
    for subj in panel:
        for sid, score in subj.scores.items():
            if not 0.0 <= score <= 10.0:
                raise LabelingError(f"subject {subj.subject_id} scored {sid} out of range: {score}")


def screen_outliers(panel):
    """Single-pass outlier rejection. Returns (kept, rejected_ids).

    Per-sample mean and population sigma come from the full panel, so a
    rejected subject still influenced the statistics that rejected it.
    """
    _validate_panel(panel)
    if len(panel) < MIN_PANEL:
        raise LabelingError(f"screening needs at least {MIN_PANEL} subjects, got {len(panel)}")
    by_sample: dict[str, list[float]] = {}
    for subj in panel:
        for sid, score in subj.scores.items():
            by_sample.setdefault(sid, []).append(score)
    stats = {sid: (float(np.mean(v)), float(np.std(v))) for sid, v in by_sample.items()}

    kept, rejected = [], []
    for subj in panel:
        outlying = sum(
            1 for sid, score in subj.scores.items()
            if abs(score - stats[sid][0]) > SIGMA_FACTOR * stats[sid][1]
        )
        if subj.scores and outlying / len(subj.scores) > OUTLIER_SHARE:
            rejected.append(subj.subject_id)
        else:
            kept.append(subj)
    if not kept:
        raise LabelingError("screening rejected every subject")
    return kept, sorted(rejected)


def normalize_scores(panel, sample_id: str) -> float:
    """iMOS of one sample: mean of its raw scores divided by 10."""
    scores = [s.scores[sample_id] for s in panel if sample_id in s.scores]
    if len(scores) < MIN_SCORES_PER_SAMPLE:
        raise LabelingError(
            f"sample {sample_id} has {len(scores)} scores, needs {MIN_SCORES_PER_SAMPLE}")
    return float(np.mean(scores)) / 10.0


def fit_decay(anchors) -> DecayCurve:
    """Least-squares fit of b through the origin in log space.

    With y_i = -ln(imos_i), b = sum(k_i*y_i) / sum(k_i^2); a single
    anchor reduces to -ln(imos)/k. Each imos must lie strictly inside
    (0, 1): 1 would force b = 0 and the model requires b > 0.
    """
    if not anchors:
        raise LabelingError("no anchors to fit")
    num = den = 0.0
    for a in anchors:
        if a.iteration < 1:
            raise LabelingError(f"anchor iteration must be >= 1, got {a.iteration}")
        if not 0.0 < a.imos < 1.0:
            raise LabelingError(f"anchor imos must be in (0, 1), got {a.imos}")
        num += a.iteration * (-math.log(a.imos))
        den += a.iteration * a.iteration
    return DecayCurve(b=num / den)


def label_curve(curve: DecayCurve, t_max: int):
    """Labels for iterations 1..t_max."""
    if t_max < 1:
        raise LabelingError(f"t_max must be >= 1, got {t_max}")
    return [curve.at(t) for t in range(1, t_max + 1)]


def group_key(record) -> str:
    return f"{record.content_id}__{record.sr_method}__f{record.factor:g}"


def label_records(records, panel):
    """Screen the panel, fit one curve per group, relabel every record.

    Scored sample ids select the anchor records; every group present in
    `records` must end up with at least one anchor. Records are updated
    in place. Returns (records, curves by group key, rejected subject ids).
    """
    kept, rejected = screen_outliers(panel)
    by_id = {r.sample_id: r for r in records}
    scored_ids = sorted({sid for subj in kept for sid in subj.scores})
    anchors_by_group: dict[str, list[Anchor]] = {}
    for sid in scored_ids:
        rec = by_id.get(sid)
        if rec is None:
            raise LabelingError(f"scored sample {sid} is not in the manifest")
        imos = normalize_scores(kept, sid)
        anchors_by_group.setdefault(group_key(rec), []).append(Anchor(rec.iteration, imos))

    curves = {g: fit_decay(a) for g, a in sorted(anchors_by_group.items())}
    missing = sorted({group_key(r) for r in records} - set(curves))
    if missing:
        raise LabelingError(f"groups without any scored anchor: {', '.join(missing)}")
    for rec in records:
        rec.imos = curves[group_key(rec)].at(rec.iteration)
    return records, curves, rejected
