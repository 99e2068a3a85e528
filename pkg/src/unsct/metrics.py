"""Landmark accuracy and agreement metrics, stratified by structured/unstructured.

Predictions are identity-bearing (one channel per landmark), so matching is by
id: a GT-visible landmark that was kept is *matched*, one that was suppressed
is *missed*, and a kept landmark with no visible GT is *spurious*. NME and MRE
average over matched pairs only; SDR counts misses as failures; spurious
predictions are reported as counts.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .landmarks import AnnotatedImage, Side, global_id

SDR_THRESHOLD_MM = 2.0
METRIC_COLUMNS = ("NME", "MRE", "SDR", "PCC", "ICC", "T-Test")


@dataclass
class MatchResult:
    ids: list[int]
    pred: np.ndarray  # (N, 2)
    gt: np.ndarray  # (N, 2)
    missed: list[int]
    spurious: list[int]


def match_predictions(gt: AnnotatedImage, kept: dict[int, tuple[float, float]]) -> MatchResult:
    ids, pred, ref, missed, spurious = [], [], [], [], []
    for gid in range(len(gt.visible)):
        vis = bool(gt.visible[gid])
        if vis and gid in kept:
            ids.append(gid)
            pred.append(kept[gid])
            ref.append(gt.landmarks[gid])
        elif vis:
            missed.append(gid)
        elif gid in kept:
            spurious.append(gid)
    return MatchResult(ids, np.array(pred, dtype=np.float64).reshape(-1, 2),
                       np.array(ref, dtype=np.float64).reshape(-1, 2), missed, spurious)


def norm_distance(gt: AnnotatedImage) -> float:
    """Distance between the two femoral head centres, else the image diagonal."""
    a, b = global_id(6, Side.LEFT), global_id(6, Side.RIGHT)
    if gt.visible[a] and gt.visible[b]:
        return float(np.hypot(*(gt.landmarks[a] - gt.landmarks[b])))
    return float(math.hypot(gt.width, gt.height))


def nme(pred: np.ndarray, gt: np.ndarray, d_norm) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if len(pred) < 1:
        raise ValueError("nme needs at least one matched pair")
    d = np.broadcast_to(np.asarray(d_norm, dtype=np.float64), (len(pred),))
    if np.any(d <= 0):
        raise ValueError("normalising distance must be positive")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1) / d))


def radial_errors(pred: np.ndarray, gt: np.ndarray, spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    diff = (np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) * sp
    return np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)


def mre(pred, gt, spacing) -> float:
    """Mean radial error in mm; ``spacing`` is (x, y) or per-pair (N, 2)."""
    if len(pred) < 1:
        raise ValueError("mre needs at least one matched pair")
    return float(np.mean(radial_errors(pred, gt, spacing)))


def sdr(pred, gt, spacing, threshold_mm: float = SDR_THRESHOLD_MM, n_missed: int = 0) -> float:
    n = len(pred) + n_missed
    if n < 1:
        raise ValueError("sdr needs at least one GT-visible landmark")
    hits = int(np.sum(radial_errors(pred, gt, spacing) <= threshold_mm)) if len(pred) else 0
    return hits / n


def icc21(ratings: np.ndarray) -> float:
    """ICC(2,1): two-way random effects, absolute agreement, single rater.

    ``ratings`` is (n_targets, k_raters).
    """
    y = np.asarray(ratings, dtype=np.float64)
    n, k = y.shape
    grand = y.mean()
    ss_rows = k * np.sum((y.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((y.mean(axis=0) - grand) ** 2)
    ss_err = np.sum((y - grand) ** 2) - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom == 0:
        return 1.0 if msr == 0 else float("nan")
    return float((msr - mse) / denom)


def pooled_coordinates(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    return np.concatenate([pred[:, 0], pred[:, 1]]), np.concatenate([gt[:, 0], gt[:, 1]])


def consistency_stats(pred, gt) -> tuple[float, float, float]:
    """(Pearson r, ICC(2,1), paired two-sided t-test p) over pooled x and y."""
    if len(pred) < 3:
        raise ValueError("consistency statistics need at least 3 matched pairs")
    p, g = pooled_coordinates(pred, gt)
    pcc = float(np.corrcoef(p, g)[0, 1])
    icc = icc21(np.column_stack([p, g]))
    diff = p - g
    tol = 1e-12 * max(1.0, float(np.abs(g).max()))
    if np.all(np.abs(diff) <= tol):
        t_p = 1.0
    elif np.ptp(diff) <= tol:  # constant shift: zero variance, infinite t
        t_p = 0.0
    else:
        t_p = float(stats.ttest_rel(p, g).pvalue)
    return pcc, icc, t_p


@dataclass
class SubsetMetrics:
    n_images: int = 0
    matched: int = 0
    missed: int = 0
    spurious: int = 0
    NME: float = float("nan")
    MRE: float = float("nan")
    SDR: float = float("nan")
    PCC: float = float("nan")
    ICC: float = float("nan")
    t_test_p: float = float("nan")
    empty: bool = True


@dataclass
class MetricsReport:
    subsets: dict[str, SubsetMetrics] = field(default_factory=dict)
    norm: str = "inter-femoral-head distance"

    def __getitem__(self, name: str) -> SubsetMetrics:
        return self.subsets[name]

    def rows(self) -> list[dict]:
        out = []
        for name, m in self.subsets.items():
            row = {"subset": name}
            row.update({c: getattr(m, "t_test_p" if c == "T-Test" else c) for c in METRIC_COLUMNS})
            row.update(n_images=m.n_images, matched=m.matched, missed=m.missed, spurious=m.spurious, empty=m.empty)
            out.append(row)
        return out

    def write_csv(self, path: Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in self.subsets.items()}


def subset_metrics(samples: list[tuple[AnnotatedImage, dict]]) -> SubsetMetrics:
    m = SubsetMetrics(n_images=len(samples))
    preds, gts, spacings, norms = [], [], [], []
    for gt, kept in samples:
        r = match_predictions(gt, kept)
        m.matched += len(r.ids)
        m.missed += len(r.missed)
        m.spurious += len(r.spurious)
        preds.append(r.pred)
        gts.append(r.gt)
        spacings.append(np.tile(gt.spacing, (len(r.ids), 1)))
        norms.append(np.full(len(r.ids), norm_distance(gt)))
    if not samples:
        return m
    pred = np.concatenate(preds) if preds else np.zeros((0, 2))
    ref = np.concatenate(gts) if gts else np.zeros((0, 2))
    m.empty = False
    if m.matched + m.missed:
        m.SDR = sdr(pred, ref, np.concatenate(spacings), n_missed=m.missed)
    if m.matched:
        m.NME = nme(pred, ref, np.concatenate(norms))
        m.MRE = mre(pred, ref, np.concatenate(spacings))
    if m.matched >= 3:
        m.PCC, m.ICC, m.t_test_p = consistency_stats(pred, ref)
    return m


def stratified_report(samples: list[tuple[AnnotatedImage, dict]], out_csv: Path | None = None) -> MetricsReport:
    """Metrics over all / structured / unstructured images.

    ``samples`` pairs each ground-truth annotation with the kept landmark
    positions ``{global_id: (x, y)}`` predicted for it.
    """
    report = MetricsReport()
    report.subsets["all"] = subset_metrics(samples)
    report.subsets["structured"] = subset_metrics([s for s in samples if s[0].structured])
    report.subsets["unstructured"] = subset_metrics([s for s in samples if not s[0].structured])
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
