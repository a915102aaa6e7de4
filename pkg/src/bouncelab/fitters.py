"""Hand-crafted trajectory estimators and non-learned prediction baselines.

The chain ransac centers -> quadratic fit -> impact solve -> restitution law
is the rigid-body oracle: on noiseless data it inverts the simulator exactly,
which the tests rely on for tight tolerances.
"""

from dataclasses import dataclass

import numpy as np

from .core import cor_from_velocities, restitution_law, rng_stream
from .sim import CenterPath, SimulationError, _post_impact_path

DEFAULT_BALL_RADIUS = 0.07


@dataclass(frozen=True)
class ParabolaFit:
    """Per-axis quadratic p(t) = a t^2 + b t + c in the times the fit saw."""

    coeffs: np.ndarray   # (3, 3): rows are axes, columns (a, b, c)
    residual: float      # RMS Euclidean residual, meters

    def position(self, t):
        a, b, c = self.coeffs.T
        return a * t * t + b * t + c

    def velocity(self, t):
        a, b, _ = self.coeffs.T
        return 2.0 * a * t + b


def center_mean(points):
    """Arithmetic mean of a frame's points.

    Biased toward the camera by half the ball radius on hemisphere renders;
    kept as the cheap center baseline.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
        raise ValueError(f"need a non-empty (N, 3) frame, got shape {points.shape}")
    return points.mean(axis=0)


def _batched_local_normals(frames, idx, k=16):
    """Surface normals at one sampled point per frame from local PCA."""
    f, n, _ = frames.shape
    rows = np.arange(f)
    picked = frames[rows, idx]                       # (F, 3)
    d2 = np.sum((frames - picked[:, None, :]) ** 2, axis=2)
    k = min(k, n)
    nearest = np.argpartition(d2, k - 1, axis=1)[:, :k]
    neighbors = np.take_along_axis(frames, nearest[:, :, None], axis=1)
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("fki,fkj->fij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return picked, vecs[:, :, 0]                     # smallest-eigenvalue axis


def _gauss_newton_centers(frames, centers, radius, weights, iterations=50,
                          tol=1e-13):
    """Least-squares known-radius sphere centers, one per frame, refined by
    Gauss-Newton on the weighted inliers; quadratic convergence makes exact
    recovery on noiseless clouds cheap."""
    centers = centers.copy()
    eye = np.eye(3) * 1e-12
    for _ in range(iterations):
        diff = frames - centers[:, None, :]
        dist = np.maximum(np.linalg.norm(diff, axis=2), 1e-12)
        units = diff / dist[:, :, None]
        resid = (dist - radius) * weights
        a = np.einsum("fni,fnj,fn->fij", units, units, weights) + eye
        b = np.einsum("fni,fn->fi", units, resid)
        step = np.linalg.solve(a, b[:, :, None])[:, :, 0]
        centers += step
        if np.max(np.abs(step)) < tol:
            break
    return centers


def ransac_sphere_frames(frames, radius=DEFAULT_BALL_RADIUS, iterations=32,
                         inlier_tol=0.01, rng=None, min_inlier_frac=0.25):
    """Known-radius sphere centers for a stack of frames, (F, N, 3) -> (F, 3).

    Each hypothesis springs from one sampled point per frame: its locally
    estimated surface normal gives two candidate centers at distance
    ``radius``; the candidate with the most inliers wins and is refined by
    Gauss-Newton least squares on its inliers. Deterministic given ``rng``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise ValueError(f"frames must have shape (F, N, 3), got {frames.shape}")
    f, n, _ = frames.shape
    if n < 4:
        raise ValueError(f"need at least 4 points to fit a sphere, got {n}")
    if rng is None:
        rng = rng_stream(0, "ransac")
    min_inliers = max(4, int(min_inlier_frac * n))

    best_counts = np.full(f, -1)
    best_centers = np.zeros((f, 3))
    for idx in rng.integers(0, n, size=(iterations, f)):
        picked, normals = _batched_local_normals(frames, idx)
        for sign in (1.0, -1.0):
            centers = picked - sign * radius * normals
            dist = np.linalg.norm(frames - centers[:, None, :], axis=2)
            counts = np.sum(np.abs(dist - radius) <= inlier_tol, axis=1)
            better = counts > best_counts
            best_counts[better] = counts[better]
            best_centers[better] = centers[better]
    if np.any(best_counts < min_inliers):
        worst = int(np.argmin(best_counts))
        raise ValueError(
            f"degenerate sample set: frame {worst} reaches only "
            f"{int(best_counts[worst])} inliers (minimum {min_inliers})")

    centers = best_centers
    previous = None
    for _ in range(2):
        dist = np.linalg.norm(frames - centers[:, None, :], axis=2)
        weights = (np.abs(dist - radius) <= inlier_tol).astype(np.float64)
        if previous is not None and np.array_equal(weights, previous):
            break  # inlier set stable; a second pass would repeat the first
        centers = _gauss_newton_centers(frames, centers, radius, weights)
        previous = weights
    return centers


def ransac_sphere(points, radius=DEFAULT_BALL_RADIUS, iterations=32,
                  inlier_tol=0.01, rng=None, min_inlier_frac=0.25):
    """Center of a known-radius sphere fit robustly to one point cloud."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {points.shape}")
    return ransac_sphere_frames(points[None], radius, iterations, inlier_tol,
                                rng, min_inlier_frac)[0]


def fit_parabola(times, values):
    """Least-squares per-axis quadratic through (time, position) samples."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.ndim != 1 or times.size < 3:
        raise ValueError("need at least 3 samples to fit a parabola")
    if values.shape != (times.size, 3):
        raise ValueError(f"values must have shape ({times.size}, 3), got {values.shape}")
    design = np.stack([times**2, times, np.ones_like(times)], axis=1)
    if np.linalg.matrix_rank(design) < 3:
        raise ValueError("rank-deficient time matrix (need 3 distinct times)")
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    resid = design @ coef - values
    residual = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return ParabolaFit(coeffs=coef.T.copy(), residual=residual)


def velocity_at(fit, t):
    """Velocity of the fitted parabola at time t (in the fit's time frame)."""
    return fit.velocity(float(t))


def ransac_centers(traj, radius=DEFAULT_BALL_RADIUS, rng=None, **kw):
    """RANSAC sphere center for every frame of a trajectory."""
    if rng is None:
        rng = rng_stream(0, "ransac-centers")
    return ransac_sphere_frames(np.asarray(traj.points, dtype=np.float64),
                                radius, rng=rng, **kw)


def _window_indices(traj, t_star, window, side):
    if side == "pre":
        mask = (traj.times >= t_star - window - 1e-9) & (traj.times <= t_star + 1e-12)
    else:
        mask = (traj.times > t_star - 1e-12) & (traj.times <= t_star + window + 1e-9)
    idx = np.nonzero(mask)[0]
    if idx.size < 3:
        raise ValueError(
            f"insufficient frames in the {window:.2f} s {side}-impact window "
            f"({idx.size} < 3)")
    return idx


def sensor_velocities(sample, window=0.05, radius=DEFAULT_BALL_RADIUS,
                      rng=None, **ransac_kw):
    """Impact velocities (v-, v+) estimated from the point clouds alone.

    Quadratic fits of sphere centers over the frames within ``window``
    seconds of the impact on each side, evaluated at the impact time. The
    quadratic absorbs gravity, so the estimates are gravity-corrected by
    construction.
    """
    if rng is None:
        rng = rng_stream(0, "sensor")
    pre_idx = _window_indices(sample.pre, sample.impact_time, window, "pre")
    post_idx = _window_indices(sample.post, sample.impact_time, window, "post")
    frames = np.concatenate([
        np.asarray(sample.pre.points[pre_idx], dtype=np.float64),
        np.asarray(sample.post.points[post_idx], dtype=np.float64)])
    centers = ransac_sphere_frames(frames, radius, rng=rng, **ransac_kw)
    pre_fit = fit_parabola(sample.pre.times[pre_idx] - sample.impact_time,
                           centers[: pre_idx.size])
    post_fit = fit_parabola(sample.post.times[post_idx] - sample.impact_time,
                            centers[pre_idx.size:])
    return pre_fit.velocity(0.0), post_fit.velocity(0.0)


def sensor_cor(sample, normal, window=0.05, radius=DEFAULT_BALL_RADIUS,
               rng=None, **ransac_kw):
    """Sensor-style cor estimate around the impact, clamped to [0, 1]."""
    v_minus, v_plus = sensor_velocities(sample, window, radius, rng, **ransac_kw)
    cor = cor_from_velocities(v_minus, v_plus, normal)
    return min(max(cor, 0.0), 1.0)


def sensor_normal(sample, window=0.05, radius=DEFAULT_BALL_RADIUS,
                  rng=None, **ransac_kw):
    """Collision normal estimated as the impulse direction (v+ - v-)."""
    v_minus, v_plus = sensor_velocities(sample, window, radius, rng, **ransac_kw)
    impulse = v_plus - v_minus
    norm = np.linalg.norm(impulse)
    if norm < 1e-9:
        raise ValueError("no measurable impulse; cannot estimate the normal")
    return impulse / norm


def _fit_pre_trajectory(pre, radius, rng, ransac_kw):
    if pre.n_frames < 3:
        raise ValueError("need at least 3 pre-impact frames")
    if rng is None:
        rng = rng_stream(0, "newton")
    centers = ransac_sphere_frames(np.asarray(pre.points, dtype=np.float64),
                                   radius, rng=rng, **ransac_kw)
    # fit in time relative to the last frame for conditioning
    return fit_parabola(pre.times - pre.times[-1], centers)


def _post_grid_times(pre, n_frames):
    dt = float(pre.times[1] - pre.times[0])
    return pre.times[-1] + dt * np.arange(1, n_frames + 1)


def ballistic_extrapolate(pre, n_frames, radius=DEFAULT_BALL_RADIUS,
                          rng=None, **ransac_kw):
    """No-bounce baseline: continue the fitted pre parabola through the
    surface onto the post frame grid."""
    fit = _fit_pre_trajectory(pre, radius, rng, ransac_kw)
    times = _post_grid_times(pre, n_frames)
    centers = np.stack([fit.position(t - pre.times[-1]) for t in times])
    return CenterPath(times, centers)


def _solve_impact_time(fit, plane, radius, dt):
    """First approaching patch contact of the fitted parabola, in the fit's
    local time; None when the path misses the patch."""
    n = plane.normal
    a, b, c = fit.coeffs.T
    # signed clearance of the fitted center path, quadratic in local time
    qa = float(n @ a)
    qb = float(n @ b)
    qc = float(n @ (c - plane.point)) - radius

    roots = []
    if abs(qa) < 1e-15:
        if abs(qb) > 1e-15:
            roots = [-qc / qb]
    else:
        disc = qb * qb - 4 * qa * qc
        if disc >= 0:
            sq = np.sqrt(disc)
            roots = [(-qb - sq) / (2 * qa), (-qb + sq) / (2 * qa)]
    for tau in sorted(roots):
        if tau < -2 * dt:
            continue
        if 2 * qa * tau + qb >= 0:
            continue  # receding crossing
        contact = fit.position(tau) - radius * n
        if plane.contains(contact):
            return tau
        break
    return None


def estimate_impact(pre, plane, radius=DEFAULT_BALL_RADIUS, rng=None, **ransac_kw):
    """Impact time and contact point estimated from the pre trajectory alone.

    Returns (impact_time, contact_point, pre fit); the fit's local time is
    relative to the last pre frame.
    """
    fit = _fit_pre_trajectory(pre, radius, rng, ransac_kw)
    dt = float(pre.times[1] - pre.times[0])
    tau_star = _solve_impact_time(fit, plane, radius, dt)
    if tau_star is None:
        raise SimulationError("no predicted impact")
    contact = fit.position(tau_star) - radius * plane.normal
    return float(pre.times[-1] + tau_star), contact, fit


def newtonian_predict(pre, params, plane, n_frames, radius=DEFAULT_BALL_RADIUS,
                      rng=None, **ransac_kw):
    """Rigid-body prediction of the post-bounce center path.

    RANSAC centers -> parabola fit -> analytic impact with the patch ->
    restitution law -> exact gravity rollout on the post frame grid shared
    with the simulator.
    """
    fit = _fit_pre_trajectory(pre, radius, rng, ransac_kw)
    dt = float(pre.times[1] - pre.times[0])
    tau_star = _solve_impact_time(fit, plane, radius, dt)
    if tau_star is None:
        raise SimulationError("no predicted impact")
    n = plane.normal
    v_minus = fit.velocity(tau_star)
    if float(n @ v_minus) >= 0:
        raise SimulationError("no predicted impact")
    v_plus = restitution_law(v_minus, params)
    center_star = fit.position(tau_star)

    times = _post_grid_times(pre, n_frames)
    local = times - pre.times[-1]
    centers = np.empty((times.size, 3))
    before = local < tau_star
    for i in np.nonzero(before)[0]:
        centers[i] = fit.position(local[i])
    after = ~before
    if np.any(after):
        taus = local[after] - tau_star
        centers[after], _ = _post_impact_path(center_star, v_plus, n, taus)
    return CenterPath(times, centers)
