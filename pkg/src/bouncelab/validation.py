"""Input validation helpers shared by the estimator facades and the CLI."""

import numpy as np


def check_samples(samples, n_frames=None):
    """Validate a list of bounce samples and return it; all trajectories
    must share the same frame count."""
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one bounce sample")
    frames = n_frames
    for k, s in enumerate(samples):
        for side, traj in (("pre", s.pre), ("post", s.post)):
            if frames is None:
                frames = traj.n_frames
            if traj.n_frames != frames:
                raise ValueError(
                    f"sample {k} {side} trajectory has {traj.n_frames} frames, expected {frames}")
            if not np.all(np.isfinite(traj.points)):
                raise ValueError(f"sample {k} {side} trajectory has non-finite points")
        if s.impact_time is None or s.impact_point is None:
            raise ValueError(f"sample {k} lacks an impact annotation")
    return samples


def check_located_samples(samples, shape):
    """Additionally require every sample to carry an impact cell within the
    given grid shape."""
    samples = check_samples(samples)
    h, w = shape
    for k, s in enumerate(samples):
        if s.cell is None:
            raise ValueError(f"sample {k} carries no impact cell annotation")
        ix, iy = s.cell
        if not (0 <= ix < h and 0 <= iy < w):
            raise ValueError(f"sample {k} cell {s.cell} outside the {h} x {w} grid")
    return samples


def check_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first")
