"""Evaluation: distribution distances, classification metrics, calibration.

Conventions: AUC is the midrank (Mann-Whitney) statistic, its 95% CI comes
from a seeded bootstrap (n = 3000 by default) at the same row granularity
as the inputs; ECE uses 10 equal-width confidence bins where confidence is
the predicted-class probability max(p, 1-p); MMD uses a Gaussian kernel
with the median-heuristic bandwidth; the Frechet distance falls back to a
small diagonal shrinkage when sample covariances are rank-deficient.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .filtering import UncertaintyRow, UncertaintyTable, deployment_filter

PATCHES_PER_PATIENT = 20
_COV_SHRINKAGE = 1e-6


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    auc: float | None
    auc_ci: tuple[float, float] | None
    ece: float
    n_bootstrap: int
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if self.auc is not None and self.auc_ci is not None:
            lo, hi = self.auc_ci
            if not lo <= self.auc <= hi:
                raise ValueError("CI bounds must bracket the AUC point estimate")

    @property
    def n_samples(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "auc": self.auc,
            "auc_ci_low": None if self.auc_ci is None else self.auc_ci[0],
            "auc_ci_high": None if self.auc_ci is None else self.auc_ci[1],
            "ece": self.ece,
            "n_bootstrap": self.n_bootstrap,
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    median_prob: float
    label_pred: int
    mean_uncertainty: float
    label: int

    def __post_init__(self) -> None:
        if self.label_pred != int(self.median_prob > 0.5):
            raise ValueError("label_pred must be median_prob > 0.5")


def aggregate_patient(table: UncertaintyTable, group_size: int = PATCHES_PER_PATIENT) -> list[PatientPrediction]:
    """Median-of-20 patient aggregation with the strict > 0.5 decision rule.

    Every patient must contribute exactly ``group_size`` patch
    probabilities (the rotation augmentation count); the median of an even
    count is the average of the two middle order statistics, so a 0.4/0.6
    split lands exactly on 0.5 and maps to label 0.
    """
    groups: dict[str, list[UncertaintyRow]] = {}
    for row in table:
        groups.setdefault(row.patient_id, []).append(row)
    preds = []
    for pid in sorted(groups):
        rows = groups[pid]
        if len(rows) != group_size:
            raise ValueError(f"patient {pid} has {len(rows)} patches, expected {group_size}")
        labels = {r.label for r in rows}
        if len(labels) != 1:
            raise ValueError(f"patient {pid} carries inconsistent labels")
        median = float(np.median([r.predicted_prob for r in rows]))
        preds.append(
            PatientPrediction(
                patient_id=pid,
                median_prob=median,
                label_pred=int(median > 0.5),
                mean_uncertainty=float(np.mean([r.uncertainty for r in rows])),
                label=labels.pop(),
            )
        )
    return preds


def auc_midrank(y_true, y_score) -> float:
    """Rank-statistic AUC; ties get midranks, so constant scores give 0.5."""
    y_true = np.asarray(y_true)
    y_score = np.asarray(y_score, dtype=np.float64)
    n_pos = int((y_true == 1).sum())
    n_neg = int((y_true == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = stats.rankdata(y_score)
    pos_rank_sum = ranks[y_true == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def expected_calibration_error(y_true, y_score, n_bins: int = 10) -> float:
    """Equal-width binned gap between predicted-class confidence and accuracy."""
    y_true = np.asarray(y_true)
    y_score = np.asarray(y_score, dtype=np.float64)
    if y_score.size == 0:
        raise ValueError("no predictions to calibrate")
    if y_score.min() < 0 or y_score.max() > 1:
        raise ValueError("scores must be probabilities in [0, 1]")
    pred = (y_score > 0.5).astype(int)
    conf = np.maximum(y_score, 1.0 - y_score)
    correct = (pred == y_true).astype(np.float64)
    bins = np.clip((conf * n_bins).astype(int), 0, n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        in_bin = bins == b
        n_b = int(in_bin.sum())
        if n_b == 0:
            continue
        ece += (n_b / y_score.size) * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(ece)


def classification_metrics(
    y_true,
    y_pred,
    y_score,
    n_bootstrap: int = 3000,
    seed: int = 0,
    n_bins: int = 10,
) -> MetricsReport:
    """Confusion-matrix metrics plus midrank AUC with a seeded bootstrap CI.

    Single-class inputs leave AUC (and the one-sided rate with an empty
    denominator) undefined rather than raising; everything else is still
    reported.  Resampling happens at the granularity of the input rows.
    """
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    y_score = np.asarray(y_score, dtype=np.float64)
    if not (y_true.shape == y_pred.shape == y_score.shape) or y_true.ndim != 1 or y_true.size == 0:
        raise ValueError("y_true, y_pred, y_score must be equal-length non-empty vectors")
    tp = int(((y_true == 1) & (y_pred == 1)).sum())
    fn = int(((y_true == 1) & (y_pred == 0)).sum())
    tn = int(((y_true == 0) & (y_pred == 0)).sum())
    fp = int(((y_true == 0) & (y_pred == 1)).sum())
    accuracy = (tp + tn) / y_true.size
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else None
    specificity = tn / (tn + fp) if (tn + fp) > 0 else None
    ece = expected_calibration_error(y_true, y_score, n_bins=n_bins)

    auc = auc_ci = None
    if (tp + fn) > 0 and (tn + fp) > 0:
        auc = auc_midrank(y_true, y_score)
        rng = np.random.default_rng(seed)
        resampled = []
        for _ in range(n_bootstrap):
            idx = rng.integers(0, y_true.size, y_true.size)
            yt = y_true[idx]
            if yt.min() == yt.max():
                continue
            resampled.append(auc_midrank(yt, y_score[idx]))
        if resampled:
            lo, hi = np.percentile(resampled, [2.5, 97.5])
            auc_ci = (min(float(lo), auc), max(float(hi), auc))
        else:
            auc_ci = (auc, auc)

    return MetricsReport(
        accuracy=float(accuracy),
        sensitivity=None if sensitivity is None else float(sensitivity),
        specificity=None if specificity is None else float(specificity),
        auc=auc,
        auc_ci=auc_ci,
        ece=ece,
        n_bootstrap=n_bootstrap,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


# --------------------------------------------------------------------------
# distribution distances


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * a @ b.T, 0.0)


def mmd(sample_a, sample_b, biased: bool = False) -> float:
    """Squared maximum mean discrepancy with a Gaussian kernel.

    Bandwidth is the median heuristic over pooled pairwise distances.  The
    default unbiased estimator can dip slightly negative under the null;
    the result is clamped at zero.  ``biased=True`` uses the V-statistic,
    which is exactly zero for identical samples.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("samples must be 2D with equal feature dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per side")
    pooled = np.concatenate([a, b], axis=0)
    d2 = _pairwise_sq_dists(pooled, pooled)
    off_diag = d2[~np.eye(d2.shape[0], dtype=bool)]
    median_sq = float(np.median(off_diag))
    if median_sq <= 0.0:
        median_sq = 1.0  # degenerate pooled sample: any bandwidth gives MMD 0
    gamma = 1.0 / (2.0 * median_sq)
    kaa = np.exp(-gamma * _pairwise_sq_dists(a, a))
    kbb = np.exp(-gamma * _pairwise_sq_dists(b, b))
    kab = np.exp(-gamma * _pairwise_sq_dists(a, b))
    m, n = a.shape[0], b.shape[0]
    if biased:
        est = kaa.mean() + kbb.mean() - 2.0 * kab.mean()
    else:
        est = (
            (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
            + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
            - 2.0 * kab.mean()
        )
    return max(float(est), 0.0)


def _covariance(feats: np.ndarray) -> np.ndarray:
    cov = np.cov(feats, rowvar=False)
    if cov.ndim == 0:
        cov = cov.reshape(1, 1)
    if feats.shape[0] <= feats.shape[1]:
        cov = cov + _COV_SHRINKAGE * np.eye(cov.shape[0])
    return cov


def frechet_distance(feats_a, feats_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("features must be 2D with equal dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two feature vectors per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = _covariance(a), _covariance(b)
    diff = mu_a - mu_b

    def _trace_sqrt(ca: np.ndarray, cb: np.ndarray) -> float:
        sqrt_prod, _ = linalg.sqrtm(ca @ cb, disp=False)
        if not np.isfinite(sqrt_prod).all():
            raise FloatingPointError("sqrtm produced non-finite values")
        return float(np.trace(sqrt_prod.real))

    try:
        tr_sqrt = _trace_sqrt(cov_a, cov_b)
    except FloatingPointError:
        eye = np.eye(cov_a.shape[0])
        tr_sqrt = _trace_sqrt(cov_a + _COV_SHRINKAGE * eye, cov_b + _COV_SHRINKAGE * eye)
    fid_val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(fid_val, 0.0)


def fid(
    slices_a,
    slices_b,
    feature_fn,
    mode: str = "pooled",
    slice_indices_a=None,
    slice_indices_b=None,
) -> float:
    """Frechet distance between embedded slice sets.

    ``mode="pooled"`` embeds everything into two feature clouds.
    ``mode="per_index_avg"`` groups slices by their slice position (the
    index arrays are required), computes one distance per position shared
    by both sides, and averages; this is the per-slice-then-average
    convention and the default for volume-level callers.
    """
    feats_a = np.stack([np.asarray(feature_fn(s), dtype=np.float64) for s in slices_a])
    feats_b = np.stack([np.asarray(feature_fn(s), dtype=np.float64) for s in slices_b])
    if mode == "pooled":
        return frechet_distance(feats_a, feats_b)
    if mode != "per_index_avg":
        raise ValueError(f"unknown fid mode {mode!r}")
    if slice_indices_a is None or slice_indices_b is None:
        raise ValueError("per_index_avg mode needs slice_indices_a and slice_indices_b")
    idx_a = np.asarray(slice_indices_a)
    idx_b = np.asarray(slice_indices_b)
    shared = sorted(set(idx_a.tolist()) & set(idx_b.tolist()))
    if not shared:
        raise ValueError("no slice index is present on both sides")
    vals = [frechet_distance(feats_a[idx_a == i], feats_b[idx_b == i]) for i in shared]
    return float(np.mean(vals))


def fid_volumes(volumes_a, volumes_b, feature_fn, mode: str = "per_index_avg") -> float:
    """FID between two volume collections, per-slice-position by default."""
    slices_a, idx_a, slices_b, idx_b = [], [], [], []
    for vols, slices, idx in ((volumes_a, slices_a, idx_a), (volumes_b, slices_b, idx_b)):
        for v in vols:
            for i in range(v.voxels.shape[2]):
                slices.append(v.voxels[:, :, i])
                idx.append(i)
    return fid(slices_a, slices_b, feature_fn, mode=mode, slice_indices_a=idx_a, slice_indices_b=idx_b)


def random_projection_features(dim: int = 16, seed: int = 0):
    """Deterministic projection embedding: flatten, project with fixed Gaussians.

    A dependency-free stand-in for a pretrained embedding network; the
    projection matrix is lazily created per input size from the seed.
    """
    matrices: dict[int, np.ndarray] = {}

    def embed(slice_2d) -> np.ndarray:
        flat = np.asarray(slice_2d, dtype=np.float64).reshape(-1)
        mat = matrices.get(flat.size)
        if mat is None:
            rng = np.random.default_rng(seed + flat.size)
            mat = rng.standard_normal((flat.size, dim)) / math.sqrt(flat.size)
            matrices[flat.size] = mat
        return flat @ mat

    return embed


# --------------------------------------------------------------------------
# deployment threshold sweep


@dataclass(frozen=True)
class ThresholdSweepEntry:
    tau: float
    n_retained: int
    report: MetricsReport | None


def threshold_sweep(
    table: UncertaintyTable,
    ladder,
    n_bootstrap: int = 3000,
    seed: int = 0,
) -> list[ThresholdSweepEntry]:
    """Patient-level deployment sweep over a descending threshold ladder.

    Patches are first aggregated per patient (median prob, mean
    uncertainty over the full 20), then each threshold keeps patients with
    mean uncertainty < tau and scores the retained set.  An empty retained
    set yields report=None (metrics are undefined, not zero).
    """
    ladder = [float(t) for t in ladder]
    if len(ladder) == 0:
        raise ValueError("ladder must be non-empty")
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("ladder must be strictly descending")
    preds = aggregate_patient(table)
    patient_rows = [
        UncertaintyRow(
            patch_id=p.patient_id,
            patient_id=p.patient_id,
            uncertainty=p.mean_uncertainty,
            predicted_prob=p.median_prob,
            label=p.label,
        )
        for p in preds
    ]
    patient_table = UncertaintyTable(patient_rows)
    by_id = {p.patient_id: p for p in preds}
    entries = []
    for tau in ladder:
        retained, _ = deployment_filter(patient_table, tau)
        kept = [by_id[pid] for pid in sorted(retained)]
        if not kept:
            entries.append(ThresholdSweepEntry(tau=tau, n_retained=0, report=None))
            continue
        report = classification_metrics(
            [p.label for p in kept],
            [p.label_pred for p in kept],
            [p.median_prob for p in kept],
            n_bootstrap=n_bootstrap,
            seed=seed,
        )
        entries.append(ThresholdSweepEntry(tau=tau, n_retained=len(kept), report=report))
    return entries


def sweep_to_csv(entries, path) -> None:
    """Plot-ready CSV: tau, n_retained, acc, sen, spec, auc (blank = undefined)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tau", "n_retained", "accuracy", "sensitivity", "specificity", "auc"])
        for e in entries:
            if e.report is None:
                writer.writerow([e.tau, e.n_retained, "", "", "", ""])
            else:
                r = e.report
                writer.writerow(
                    [
                        e.tau,
                        e.n_retained,
                        r.accuracy,
                        "" if r.sensitivity is None else r.sensitivity,
                        "" if r.specificity is None else r.specificity,
                        "" if r.auc is None else r.auc,
                    ]
                )
