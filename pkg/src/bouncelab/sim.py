"""Deterministic sphere-to-plane bounce simulator and synthetic dataset generator.

Flight is closed-form projectile motion, impacts are resolved at the exact
sub-step time by solving the quadratic signed-distance equation, so the
center paths carry no integration error. Point clouds mimic a depth sensor:
points drawn uniformly on the camera-facing hemisphere of the ball plus
isotropic Gaussian noise.

Time convention: frames live on the global dt grid anchored at the initial
state's time. The pre trajectory holds the last T grid times at or before the
impact, the post trajectory the first T grid times after it.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    GRAVITY_VEC,
    SurfaceParams,
    as_vec3,
    check_unit,
    restitution_law,
    rng_stream,
    unit,
)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BallState:
    center: np.ndarray
    velocity: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center, "center"))
        object.__setattr__(self, "velocity", as_vec3(self.velocity, "velocity"))


@dataclass(frozen=True)
class PlanePatch:
    """Square surface patch: anchor point, outward unit normal, half-width."""

    point: np.ndarray
    normal: np.ndarray
    extent: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "point", as_vec3(self.point, "point"))
        object.__setattr__(self, "normal", check_unit(self.normal, "normal"))
        if not self.extent > 0:
            raise ValueError("extent must be positive")

    def in_plane_axes(self):
        """Deterministic orthonormal in-plane basis (x/y axes for n = +z)."""
        n = self.normal
        ref = np.array([1.0, 0.0, 0.0])
        if abs(n @ ref) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        u = unit(np.cross(ref, n))
        w = np.cross(n, u)
        return u, w

    def contains(self, point):
        """Chebyshev containment of a point's in-plane offset."""
        u, w = self.in_plane_axes()
        d = as_vec3(point) - self.point
        return max(abs(float(d @ u)), abs(float(d @ w))) <= self.extent + 1e-12

    def signed_distance(self, point):
        return float(self.normal @ (as_vec3(point) - self.point))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    ball_radius: float = 0.07
    n_frames: int = 10        # frames per side of the bounce
    n_points: int = 500       # points per frame
    noise_sigma: float = 0.005
    speed_min: float = 1.0    # impact speed range, m/s
    speed_max: float = 5.0
    position_extent: float = 2.0    # impact points sampled in the +-extent box
    camera: np.ndarray = field(default_factory=lambda: np.array([0.0, -7.0, 2.0]))
    patch_extent: float = 0.5
    min_approach_cos: float = 0.1   # floor on |cos| between impact velocity and normal
    horizon: float = 5.0
    max_tries: int = 200

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.n_points < 4:
            raise ValueError("n_points must be at least 4")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        object.__setattr__(self, "camera", as_vec3(self.camera, "camera"))


@dataclass
class Trajectory:
    """Uniformly spaced point-cloud frames plus optional ground-truth centers."""

    times: np.ndarray                 # (T,)
    points: np.ndarray                # (T, N, 3)
    true_centers: Optional[np.ndarray] = None  # (T, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.points = np.asarray(self.points)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must have shape (T, N, 3), got {self.points.shape}")
        if self.points.shape[0] != self.times.shape[0]:
            raise ValueError("frame count mismatch between times and points")
        if self.times.shape[0] >= 2:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-9:
                raise ValueError("frame times must increase uniformly")
        if self.true_centers is not None:
            self.true_centers = np.asarray(self.true_centers, dtype=np.float64)
            if self.true_centers.shape != (self.times.shape[0], 3):
                raise ValueError("true_centers shape mismatch")

    @property
    def n_frames(self):
        return self.times.shape[0]

    @property
    def n_points(self):
        return self.points.shape[1]

    def translated(self, offset, time_offset=0.0):
        return Trajectory(
            times=self.times + time_offset,
            points=self.points + np.asarray(offset, dtype=self.points.dtype),
            true_centers=None if self.true_centers is None else self.true_centers + offset,
        )


@dataclass(frozen=True)
class ImpactRecord:
    time: float
    point: np.ndarray            # contact point on the surface
    v_minus: np.ndarray
    v_plus: np.ndarray
    sliding: bool = False        # post-impact motion is frictionless sliding
    recontact: bool = False      # ballistic rebound re-enters the patch within the window


@dataclass
class BounceSample:
    pre: Trajectory
    post: Trajectory
    params: SurfaceParams
    impact_time: float
    impact_point: np.ndarray
    scene_id: Optional[int] = None
    cell: Optional[tuple] = None

    def __post_init__(self):
        self.impact_point = as_vec3(self.impact_point, "impact_point")
        if self.pre.times[-1] > self.impact_time + 1e-9:
            raise ValueError("pre trajectory must end at or before the impact")
        if self.post.times[0] <= self.impact_time - 1e-12:
            raise ValueError("post trajectory must begin after the impact")


@dataclass(frozen=True)
class CenterPath:
    times: np.ndarray
    centers: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.float64))
        if self.centers.shape != (self.times.shape[0], 3):
            raise ValueError("centers must have shape (len(times), 3)")
        if self.times.size >= 2 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


def step_ballistic(state, dt):
    """Closed-form projectile step under gravity; exact for any dt >= 0."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return BallState(
        center=state.center + state.velocity * dt + 0.5 * GRAVITY_VEC * dt * dt,
        velocity=state.velocity + GRAVITY_VEC * dt,
        time=state.time + dt,
    )


def ballistic_centers(center, velocity, taus):
    taus = np.asarray(taus, dtype=np.float64)
    return center + velocity * taus[:, None] + 0.5 * GRAVITY_VEC * (taus ** 2)[:, None]


def _impact_in_window(state, plane, radius, window):
    """First approaching surface contact within (0, window], or None.

    Solves n.(c(t) - p0) = radius for the parabola c(t); only crossings with
    the ball moving into the surface (d/dt of the signed distance < 0) and the
    contact point inside the patch count. Hits on the patch's back face are
    ignored.
    """
    n = plane.normal
    s0 = plane.signed_distance(state.center) - radius
    if s0 < -1e-9:
        raise SimulationError("ball starts interpenetrating the surface")
    a = 0.5 * float(GRAVITY_VEC @ n)
    b = float(state.velocity @ n)
    roots = []
    if abs(a) < 1e-15:
        if abs(b) > 1e-15:
            roots = [-s0 / b]
    else:
        disc = b * b - 4 * a * s0
        if disc >= 0:
            sq = np.sqrt(disc)
            roots = [(-b - sq) / (2 * a), (-b + sq) / (2 * a)]
    for t in sorted(roots):
        if t < -1e-12 or t > window:
            continue
        t = max(t, 0.0)
        approach = b + 2 * a * t   # d/dt signed distance
        if approach >= -1e-9:
            continue
        center_t = state.center + state.velocity * t + 0.5 * GRAVITY_VEC * t * t
        contact = center_t - radius * n
        if plane.contains(contact):
            return float(t)
        return None  # passes the plane beside the patch; no later front-face hit
    return None


def detect_impact(state, plane, dt, radius):
    """Impact time within [0, dt] if the ball contacts the patch, else None."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return _impact_in_window(state, plane, radius, dt)


def _post_impact_path(contact_center, v_plus, normal, taus):
    """Center path after the bounce at offsets taus >= 0 from the impact.

    Ballistic flight normally; when the rebound has no normal velocity and
    gravity presses the ball into the surface the contact persists and the
    ball slides without friction (single quadratic either way).
    """
    vn = float(v_plus @ normal)
    gn = float(GRAVITY_VEC @ normal)
    sliding = abs(vn) < 1e-12 and gn < 0.0
    if sliding:
        accel = GRAVITY_VEC - gn * normal
        taus = np.asarray(taus, dtype=np.float64)
        centers = contact_center + v_plus * taus[:, None] + 0.5 * accel * (taus ** 2)[:, None]
    else:
        centers = ballistic_centers(contact_center, v_plus, taus)
    return centers, sliding


def simulate_bounce(init, plane, params, cfg):
    """Simulate one bounce; returns (pre CenterPath, post CenterPath, ImpactRecord).

    Only the first impact is resolved; if the ballistic rebound re-enters the
    patch within the post window the record's ``recontact`` flag is set and
    the returned path continues ballistically (single-bounce semantics, the
    caller decides whether to keep the sample).
    """
    t_star = _impact_in_window(init, plane, cfg.ball_radius, cfg.horizon)
    if t_star is None:
        raise SimulationError("no impact within horizon")

    t_frames = cfg.n_frames
    k_end = int(np.floor(t_star / cfg.dt + 1e-12))
    if k_end < t_frames - 1:
        raise SimulationError("not enough pre-impact flight for the frame window")
    pre_taus = cfg.dt * np.arange(k_end - t_frames + 1, k_end + 1)
    pre_centers = ballistic_centers(init.center, init.velocity, pre_taus)

    center_star = ballistic_centers(init.center, init.velocity, np.array([t_star]))[0]
    v_minus = init.velocity + GRAVITY_VEC * t_star
    v_plus = restitution_law(v_minus, params)
    contact = center_star - cfg.ball_radius * plane.normal

    post_taus = cfg.dt * np.arange(k_end + 1, k_end + 1 + t_frames) - t_star
    post_centers, sliding = _post_impact_path(center_star, v_plus, plane.normal, post_taus)

    recontact = False
    if not sliding:
        vn = float(v_plus @ plane.normal)
        gn = float(GRAVITY_VEC @ plane.normal)
        if gn < -1e-15:
            tau_re = -2.0 * vn / gn if vn > 0 else 0.0
            if 0 <= tau_re <= post_taus[-1]:
                re_center = ballistic_centers(center_star, v_plus, np.array([tau_re]))[0]
                if plane.contains(re_center - cfg.ball_radius * plane.normal):
                    recontact = True

    record = ImpactRecord(
        time=init.time + t_star,
        point=contact,
        v_minus=v_minus,
        v_plus=v_plus,
        sliding=sliding,
        recontact=recontact,
    )
    pre = CenterPath(init.time + pre_taus, pre_centers)
    post = CenterPath(init.time + t_star + post_taus, post_centers)
    return pre, post, record


def render_point_cloud(center, radius, camera, n_points, noise_sigma, rng):
    """Sensor-like cloud: n points uniform on the camera-facing hemisphere,
    then isotropic Gaussian noise per coordinate."""
    center = as_vec3(center, "center")
    camera = as_vec3(camera, "camera")
    view = camera - center
    view_norm = np.linalg.norm(view)
    if view_norm < 1e-9:
        raise ValueError("camera coincides with the ball center")
    view = view / view_norm
    dirs = rng.standard_normal((n_points, 3))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    while np.any(norms < 1e-12):  # essentially never; keeps normalization safe
        bad = norms[:, 0] < 1e-12
        dirs[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs /= norms
    dots = dirs @ view
    flip = dots < 0
    dirs[flip] -= 2.0 * dots[flip, None] * view  # mirror onto the visible hemisphere
    points = center + radius * dirs
    if noise_sigma > 0:
        points = points + rng.normal(0.0, noise_sigma, size=(n_points, 3))
    return points


def render_trajectory(path, cfg, rng, noise_sigma=None):
    """Render every frame of a center path; one rng draw pair per frame."""
    sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    frames = np.empty((path.times.size, cfg.n_points, 3))
    for i, center in enumerate(path.centers):
        frames[i] = render_point_cloud(center, cfg.ball_radius, cfg.camera,
                                       cfg.n_points, sigma, rng)
    return Trajectory(times=path.times.copy(), points=frames,
                      true_centers=path.centers.copy())


def _random_unit(rng):
    while True:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm


def sample_bounce_config(rng, cfg, cor=None):
    """Draw (initial state, surface patch, surface params) for one bounce.

    Built backwards from the impact: the contact point, surface orientation,
    and impact velocity are sampled directly, then the state is integrated
    back a random pre-flight so the forward simulation reaches exactly the
    designed impact. ``cor`` overrides the uniform draw (used to keep a
    sample's cor fixed while its geometry is resampled).
    """
    cor_value = float(rng.uniform(0.0, 1.0)) if cor is None else float(cor)
    t_frames_span = (cfg.n_frames - 1) * cfg.dt
    for _ in range(cfg.max_tries):
        normal = _random_unit(rng)
        contact = rng.uniform(-cfg.position_extent, cfg.position_extent, 3)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        direction = _random_unit(rng)
        dn = float(direction @ normal)
        if dn > 0:
            direction = direction - 2.0 * dn * normal
            dn = -dn
        if abs(dn) < cfg.min_approach_cos:
            continue
        v_minus = speed * direction
        t_pre = rng.uniform(t_frames_span + 3 * cfg.dt, t_frames_span + 16 * cfg.dt)

        center_star = contact + cfg.ball_radius * normal
        v0 = v_minus - GRAVITY_VEC * t_pre
        c0 = center_star - v0 * t_pre - 0.5 * GRAVITY_VEC * t_pre * t_pre
        init = BallState(center=c0, velocity=v0, time=0.0)
        plane = PlanePatch(point=contact, normal=normal, extent=cfg.patch_extent)

        if plane.signed_distance(c0) < cfg.ball_radius + 1e-6:
            continue
        t_hit = _impact_in_window(init, plane, cfg.ball_radius, cfg.horizon)
        if t_hit is None or abs(t_hit - t_pre) > 1e-9:
            continue  # backward path clipped the plane earlier; redraw geometry
        return init, plane, SurfaceParams(cor=cor_value, normal=normal)
    raise SimulationError(f"could not sample a valid bounce in {cfg.max_tries} tries")


def generate_sample(rng, cfg, cor=None, reject_recontact=True):
    """One BounceSample with rendered point clouds; geometry is resampled
    (keeping the cor draw) whenever the rebound would re-contact the patch."""
    init, plane, params = sample_bounce_config(rng, cfg, cor=cor)
    for _ in range(cfg.max_tries):
        pre_path, post_path, record = simulate_bounce(init, plane, params, cfg)
        if record.recontact and reject_recontact:
            init, plane, params = sample_bounce_config(rng, cfg, cor=params.cor)
            continue
        pre = render_trajectory(pre_path, cfg, rng)
        post = render_trajectory(post_path, cfg, rng)
        return BounceSample(
            pre=pre, post=post, params=params,
            impact_time=record.time, impact_point=record.point,
        )
    raise SimulationError("could not generate a recontact-free sample")


def generate_dataset(count, cfg, seed):
    """Independent bounce samples; sample i draws everything from the
    (seed, i) stream so serial and parallel generation agree exactly."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return [generate_sample(rng_stream(seed, i), cfg) for i in range(count)]
