"""Evaluation metrics: forward-prediction distance at the tenth post frame,
normal agreement within an angular threshold, cor absolute error, and
per-cor-bin breakdowns."""

import json
import time
from dataclasses import dataclass, field

import numpy as np

DEFAULT_COR_BINS = (0.0, 0.25, 0.5, 0.75, 1.0)


def forward_distances(pred_centers, true_centers):
    """Per-sample Euclidean distance (meters) between predicted and true
    centers at the evaluation frame (0.1 s past the impact at dt = 0.01)."""
    pred = np.asarray(pred_centers, dtype=np.float64)
    true = np.asarray(true_centers, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"need matching (S, 3) center arrays, got {pred.shape} vs {true.shape}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one sample")
    return np.linalg.norm(pred - true, axis=1)


def eval_forward(pred_centers, true_centers):
    """Median forward-prediction distance in centimeters."""
    return float(np.median(forward_distances(pred_centers, true_centers))) * 100.0


def eval_normals(pred, ref, threshold_deg=30.0):
    """Percentage of predictions within the angular threshold (inclusive)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if pred.shape != ref.shape or pred.shape[1] != 3:
        raise ValueError("need matching (S, 3) normal arrays")
    for name, arr in (("pred", pred), ("ref", ref)):
        norms = np.linalg.norm(arr, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError(f"{name} normals must be unit vectors")
    angles = np.degrees(np.arccos(np.clip(np.sum(pred * ref, axis=1), -1.0, 1.0)))
    return 100.0 * float(np.mean(angles <= threshold_deg + 1e-9))


def eval_cor(pred, ref):
    """Median absolute cor error."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 1:
        raise ValueError("need matching 1-d cor arrays")
    for name, arr in (("pred", pred), ("ref", ref)):
        if np.any(arr < -1e-9) or np.any(arr > 1 + 1e-9):
            raise ValueError(f"{name} cors must lie in [0, 1]")
    return float(np.median(np.abs(pred - ref)))


def eval_by_cor_bin(errors, ref_cors, bins=DEFAULT_COR_BINS):
    """Median error per cor bin; bins must partition [0, 1]; empty bins are
    absent from the result rather than reported as zero."""
    errors = np.asarray(errors, dtype=np.float64)
    ref_cors = np.asarray(ref_cors, dtype=np.float64)
    if errors.shape != ref_cors.shape or errors.ndim != 1:
        raise ValueError("errors and ref_cors must be matching 1-d arrays")
    bins = tuple(float(b) for b in bins)
    if bins[0] != 0.0 or bins[-1] != 1.0 or any(b >= c for b, c in zip(bins, bins[1:])):
        raise ValueError(f"bins must partition [0, 1] increasingly, got {bins}")
    out = {}
    for lo, hi in zip(bins, bins[1:]):
        mask = (ref_cors >= lo) & ((ref_cors < hi) if hi < 1.0 else (ref_cors <= hi))
        if np.any(mask):
            out[(lo, hi)] = float(np.median(errors[mask]))
    return out


def seed_spread(values):
    """Mean and population std of a per-seed metric (reports quote both when
    a run is repeated over independent seeds)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise ValueError("need at least one value")
    return float(np.mean(values)), float(np.std(values))


def aggregate_reports(reports):
    """Mean +- std across per-seed reports for every shared numeric metric
    (the table style quotes medians over >= 3 independent seeds)."""
    reports = list(reports)
    if len(reports) < 1:
        raise ValueError("need at least one report")
    out = {"n_seeds": len(reports)}
    keys = ("median_dist_cm", "pct_normals_within_30deg", "cor_median_abs_error")
    for key in keys:
        values = [getattr(r, key) for r in reports]
        if any(v is None for v in values):
            continue
        mean, std = seed_spread(values)
        out[key] = {"mean": mean, "std": std}
    return out


@dataclass
class MetricsReport:
    """Machine-readable evaluation report with the resolved config echoed."""

    median_dist_cm: float
    n_samples: int
    condition: str = "true-normal+true-cor"
    pct_normals_within_30deg: float = None
    cor_median_abs_error: float = None
    dist_by_cor_bin_cm: dict = None
    runtime_s: float = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "median_dist_cm": self.median_dist_cm,
            "n_samples": self.n_samples,
            "condition": self.condition,
            "runtime_s": self.runtime_s,
            "config": dict(self.config),
        }
        if self.pct_normals_within_30deg is not None:
            out["pct_normals_within_30deg"] = self.pct_normals_within_30deg
        if self.cor_median_abs_error is not None:
            out["cor_median_abs_error"] = self.cor_median_abs_error
        if self.dist_by_cor_bin_cm is not None:
            out["dist_by_cor_bin_cm"] = {f"{lo:g}-{hi:g}": v
                                         for (lo, hi), v in self.dist_by_cor_bin_cm.items()}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def build_report(pred_centers, true_centers, *, pred_normals=None, ref_normals=None,
                 pred_cors=None, ref_cors=None, condition="true-normal+true-cor",
                 bins=DEFAULT_COR_BINS, config=None, started=None):
    dists = forward_distances(pred_centers, true_centers)
    report = MetricsReport(
        median_dist_cm=float(np.median(dists)) * 100.0,
        n_samples=dists.size,
        condition=condition,
        config=config or {},
        runtime_s=None if started is None else time.time() - started,
    )
    if pred_normals is not None and ref_normals is not None:
        report.pct_normals_within_30deg = eval_normals(pred_normals, ref_normals)
    if pred_cors is not None and ref_cors is not None:
        report.cor_median_abs_error = eval_cor(pred_cors, ref_cors)
        report.dist_by_cor_bin_cm = {
            k: v * 100.0
            for k, v in eval_by_cor_bin(dists, np.asarray(ref_cors), bins).items()}
    return report
