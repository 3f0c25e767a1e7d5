"""Rank and linear correlation metrics plus grouped evaluation reports.

All three coefficients are computed from first principles: PLCC as the
Pearson correlation, SRCC as Pearson over fractional average ranks, and
KRCC as Kendall tau-b with the pairwise O(n^2) counting rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MetricError


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise MetricError(f"metric inputs must be equal-length vectors, got {x.shape} vs {y.shape}")
    if x.size < 2:
        raise MetricError("metric inputs need at least 2 samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise MetricError("metric inputs must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricError("constant vector has no defined correlation")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc @ yc) / math.sqrt((xc @ xc) * (yc @ yc)))


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(x, y) -> float:
    """Spearman rank correlation: Pearson over fractional ranks."""
    x, y = _pair(x, y)
    return plcc(fractional_ranks(x), fractional_ranks(y))


def krcc(x, y) -> float:
    """Kendall tau-b over all sample pairs."""
    x, y = _pair(x, y)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    prod = dx[iu] * dy[iu]
    concordant = int((prod > 0).sum())
    discordant = int((prod < 0).sum())

    def tie_pairs(v):
        _, counts = np.unique(v, return_counts=True)
        return float((counts * (counts - 1) // 2).sum())

    n0 = x.size * (x.size - 1) / 2.0
    denom = math.sqrt((n0 - tie_pairs(x)) * (n0 - tie_pairs(y)))
    return float((concordant - discordant) / denom)


def plcc_logistic(x, y) -> float:
    """PLCC after a fitted 4-parameter logistic remap of the predictions.

    beta are fitted by plain gradient descent on squared error; this is
    an optional convenience, the default evaluation path uses raw plcc.
    """
    x, y = _pair(x, y)
    b1 = float(y.max() - y.min()) or 1.0
    b2, b3 = 1.0, float(x.mean())
    b4 = float(y.min())
    lr = 0.05
    for _ in range(2000):
        z = b2 * (x - b3)
        s = 1.0 / (1.0 + np.exp(-z))
        f = b1 * s + b4
        r = f - y
        gs = r * b1 * s * (1.0 - s)
        g1 = float(r @ s)
        g2 = float(gs @ (x - b3))
        g3 = float(gs.sum()) * -b2
        g4 = float(r.sum())
        n = x.size
        b1 -= lr * g1 / n
        b2 -= lr * g2 / n
        b3 -= lr * g3 / n
        b4 -= lr * g4 / n
    mapped = b1 / (1.0 + np.exp(-b2 * (x - b3))) + b4
    if np.all(mapped == mapped[0]):
        return plcc(x, y)
    return plcc(mapped, y)


# ---------------------------------------------------------------------------
# grouped evaluation

@dataclass
class GroupResult:
    name: str
    count: int
    plcc: float
    srcc: float
    krcc: float


@dataclass
class EvalReport:
    group_by: str
    groups: list
    excluded: list  # (name, count) pairs too small to correlate
    mean_plcc: float
    mean_srcc: float
    mean_krcc: float

    def to_json(self) -> str:
        return json.dumps({
            "group_by": self.group_by,
            "groups": [vars(g) for g in self.groups],
            "excluded": [{"name": n, "count": c} for n, c in self.excluded],
            "mean_plcc": self.mean_plcc,
            "mean_srcc": self.mean_srcc,
            "mean_krcc": self.mean_krcc,
        }, indent=2)

    def to_table(self) -> str:
        rows = [("group", "n", "plcc", "srcc", "krcc")]
        for g in self.groups:
            rows.append((g.name, str(g.count), f"{g.plcc:.4f}", f"{g.srcc:.4f}", f"{g.krcc:.4f}"))
        rows.append(("mean", "", f"{self.mean_plcc:.4f}", f"{self.mean_srcc:.4f}", f"{self.mean_krcc:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        for name, count in self.excluded:
            lines.append(f"excluded: {name} ({count} sample{'s' if count != 1 else ''})")
        return "\n".join(lines)


def evaluate(records, predictions, group_by="content_class") -> EvalReport:
    """Correlations between predictions and labels, grouped then averaged.

    Each record needs imos plus the grouping attribute. Groups with
    fewer than 2 samples cannot be correlated; they are dropped from
    the averages and listed in the report instead.
    """
    if group_by not in ("content_class", "content_id"):
        raise MetricError(f"group_by must be content_class or content_id, got {group_by!r}")
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(records) != predictions.size:
        raise MetricError(f"{len(records)} records but {predictions.size} predictions")
    buckets: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        buckets.setdefault(getattr(rec, group_by), []).append(i)

    groups, excluded = [], []
    for name in sorted(buckets):
        idx = buckets[name]
        if len(idx) < 2:
            excluded.append((name, len(idx)))
            continue
        labels = np.array([records[i].imos for i in idx])
        preds = predictions[idx]
        groups.append(GroupResult(name, len(idx), plcc(preds, labels),
                                  srcc(preds, labels), krcc(preds, labels)))
    if not groups:
        raise MetricError("no group large enough to evaluate")
    return EvalReport(
        group_by=group_by,
        groups=groups,
        excluded=excluded,
        mean_plcc=float(np.mean([g.plcc for g in groups])),
        mean_srcc=float(np.mean([g.srcc for g in groups])),
        mean_krcc=float(np.mean([g.krcc for g in groups])),
    )


# ---------------------------------------------------------------------------
# feature-space distance between the two streams

@dataclass
class FeatureDistanceRow:
    sample_id: str
    iteration: int
    imos: float
    mse_hl: float
    norm_hl: float
    mse_pristine: float = None  # None when the pristine source is absent


@dataclass
class FeatureDistanceReport:
    rows: list
    norm_imos_srcc: float
    pristine_closer_share: float  # over iteration >= 3 rows, None if none

    def to_json(self) -> str:
        return json.dumps({
            "rows": [vars(r) for r in self.rows],
            "norm_imos_srcc": self.norm_imos_srcc,
            "pristine_closer_share": self.pristine_closer_share,
        }, indent=2)


def feature_distance_report(model, records, base_dir) -> FeatureDistanceReport:
    """Distances between pooled HR-stream and LR-stream features.

    For each labeled record: mse_hl and the Euclidean norm of
    (F_Hpool - F_Lpool), plus, when `<content_id>__source.ppm` exists
    next to the manifest, the MSE between the pristine source's pooled
    HR features and the same F_Lpool. The report carries the SRCC of
    the norms against iMOS and the share of iteration >= 3 samples
    whose pristine distance is smaller than their degraded one.
    """
    from .imaging import extract_patches, load_image
    from .model import HR_PATCH, LR_PATCH, extract_features, pool_forward

    if not model.config.use_lr_reference:
        raise MetricError("feature distances need a model with an LR reference stream")
    if not records:
        raise MetricError("no records to analyze")
    base = Path(base_dir)
    mode = model.config.pooling_mode
    pristine_cache: dict[str, np.ndarray] = {}
    rows = []
    for rec in records:
        if rec.imos is None:
            raise MetricError(f"record {rec.sample_id} has no label")
        hr = extract_patches(load_image(base / rec.hr_path), HR_PATCH)
        lr = extract_patches(load_image(base / rec.lr_path), LR_PATCH)
        fh, _ = pool_forward(extract_features(model, hr, "hr"), mode)
        fl, _ = pool_forward(extract_features(model, lr, "lr"), mode)
        diff = fh - fl
        row = FeatureDistanceRow(
            sample_id=rec.sample_id, iteration=rec.iteration, imos=rec.imos,
            mse_hl=float(np.mean(diff ** 2)),
            norm_hl=float(np.sqrt(np.sum(diff ** 2))),
        )
        src_path = base / f"{rec.content_id}__source.ppm"
        if src_path.exists():
            if rec.content_id not in pristine_cache:
                patches = extract_patches(load_image(src_path), HR_PATCH)
                pooled, _ = pool_forward(extract_features(model, patches, "hr"), mode)
                pristine_cache[rec.content_id] = pooled
            row.mse_pristine = float(np.mean((pristine_cache[rec.content_id] - fl) ** 2))
        rows.append(row)

    try:
        norm_srcc = srcc([r.norm_hl for r in rows], [r.imos for r in rows])
    except MetricError:
        norm_srcc = None
    late = [r for r in rows if r.iteration >= 3 and r.mse_pristine is not None]
    share = (sum(1 for r in late if r.mse_pristine < r.mse_hl) / len(late)
             if late else None)
    return FeatureDistanceReport(rows=rows, norm_imos_srcc=norm_srcc,
                                 pristine_closer_share=share)
