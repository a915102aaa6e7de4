"""Learnable surface parameter field over synthetic probe scenes.

A scene is an H x W grid of flat floor cells, each hiding effective surface
parameters (cor and effective collision normal, which need not match the
geometric up axis). The field is a raw H x W x 4 array trained so that the
frozen-or-finetuned bounce model explains observed bounces at each probed
cell; readout clamps the cor and renormalizes the normal block.
"""

from dataclasses import dataclass, replace

import numpy as np

from .core import SurfaceParams, rng_stream
from .nnet import Adam, zero_grads
from .pim import canonicalize, encode_batch, prepare_points
from .sim import (
    BallState,
    BounceSample,
    PlanePatch,
    SimulationError,
    render_trajectory,
    simulate_bounce,
)
from .core import GRAVITY_VEC


@dataclass
class SceneSpec:
    """Synthetic scene: per-cell hidden ground-truth surface parameters over
    a flat grid in the z = 0 plane spanning [0, H*cell] x [0, W*cell]."""

    cors: np.ndarray               # (H, W)
    normals: np.ndarray            # (H, W, 3), unit rows
    cell_size: float = 0.25
    scene_id: int = 0

    def __post_init__(self):
        self.cors = np.asarray(self.cors, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.cors.ndim != 2 or min(self.cors.shape) < 2:
            raise ValueError("scene grid must be at least 2 x 2")
        if self.normals.shape != self.cors.shape + (3,):
            raise ValueError("normals shape must match the cor grid")
        if np.any(self.cors < 0) or np.any(self.cors > 1):
            raise ValueError("cell cors must lie in [0, 1]")
        norms = np.linalg.norm(self.normals, axis=2)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("cell normals must be unit vectors")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def shape(self):
        return self.cors.shape

    def cell_center(self, ix, iy):
        self._check_cell(ix, iy)
        cs = self.cell_size
        return np.array([(ix + 0.5) * cs, (iy + 0.5) * cs, 0.0])

    def cell_patch(self, ix, iy):
        """Geometric detection patch of a cell (flat, facing +z)."""
        return PlanePatch(point=self.cell_center(ix, iy),
                          normal=np.array([0.0, 0.0, 1.0]),
                          extent=self.cell_size / 2)

    def cell_params(self, ix, iy):
        self._check_cell(ix, iy)
        return SurfaceParams(cor=float(self.cors[ix, iy]), normal=self.normals[ix, iy])

    def _check_cell(self, ix, iy):
        h, w = self.shape
        if not (0 <= ix < h and 0 <= iy < w):
            raise IndexError(f"cell ({ix}, {iy}) outside the {h} x {w} grid")


def make_scene(h, w, seed=0, cor_low=0.1, cor_high=0.9, max_tilt_deg=12.0,
               cell_size=0.25, scene_id=0):
    """Random scene with per-cell cors and mildly tilted effective normals."""
    rng = rng_stream(seed, "scene-spec")
    cors = rng.uniform(cor_low, cor_high, size=(h, w))
    normals = _tilted_normals(rng, h, w, max_tilt_deg)
    return SceneSpec(cors=cors, normals=normals, cell_size=cell_size, scene_id=scene_id)


def two_region_scene(h, w, cor_left=0.2, cor_right=0.8, max_tilt_deg=12.0,
                     seed=0, cell_size=0.25, scene_id=0):
    """Scene split into two cor regions along the y axis (left/right halves)."""
    rng = rng_stream(seed, "scene-spec")
    cors = np.full((h, w), cor_left)
    cors[:, w // 2:] = cor_right
    normals = _tilted_normals(rng, h, w, max_tilt_deg)
    return SceneSpec(cors=cors, normals=normals, cell_size=cell_size, scene_id=scene_id)


def _tilted_normals(rng, h, w, max_tilt_deg):
    tilt = np.radians(max_tilt_deg)
    theta = np.arccos(rng.uniform(np.cos(tilt), 1.0, size=(h, w)))
    phi = rng.uniform(0, 2 * np.pi, size=(h, w))
    sin_t = np.sin(theta)
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), np.cos(theta)], axis=2)


@dataclass
class SurfaceField:
    """Raw learnable H x W x 4 parameter grid (cor followed by the normal block)."""

    raw: np.ndarray

    @classmethod
    def create(cls, shape):
        h, w = shape
        raw = np.tile(np.array([0.5, 0.0, 0.0, 1.0]), (h, w, 1))
        return cls(raw=raw)

    @property
    def shape(self):
        return self.raw.shape[:2]

    def readout(self, ix, iy):
        """Served parameters: cor clamped to [0, 1], normal renormalized."""
        vec = field_lookup(self, ix, iy)
        return SurfaceParams.from_vector(vec, clamp=True)

    def readout_cors(self):
        return np.clip(self.raw[:, :, 0], 0.0, 1.0)

    def readout_normals(self):
        n = self.raw[:, :, 1:]
        return n / np.linalg.norm(n, axis=2, keepdims=True)

    def copy(self):
        return SurfaceField(raw=self.raw.copy())


def field_lookup(field, ix, iy):
    """Raw 4-vector of one cell; training routes gradients only there."""
    h, w = field.shape
    if not (0 <= ix < h and 0 <= iy < w):
        raise IndexError(f"cell ({ix}, {iy}) outside the {h} x {w} grid")
    return field.raw[ix, iy]


def smoothness_penalty(raw):
    """Sum over cells and offsets (i, j) in {0,1}^2 of the squared parameter
    difference to the (right, down, diagonal) neighbor; out-of-grid neighbors
    are skipped and the (0, 0) term is identically zero. Returns (value,
    gradient w.r.t. the raw field)."""
    value = 0.0
    grad = np.zeros_like(raw)
    for di, dj in ((0, 1), (1, 0), (1, 1)):
        a = raw[: raw.shape[0] - di, : raw.shape[1] - dj]
        b = raw[di:, dj:]
        d = a - b
        value += float(np.sum(d * d))
        grad[: raw.shape[0] - di, : raw.shape[1] - dj] += 2.0 * d
        grad[di:, dj:] -= 2.0 * d
    return value, grad


def _bounce_encodings(model, samples):
    pre = [canonicalize(s.pre, s.impact_point, s.impact_time) for s in samples]
    post = [canonicalize(s.post, s.impact_point, s.impact_time) for s in samples]
    t_i = encode_batch(model.enc_i, pre)
    t_o = encode_batch(model.enc_o, post)
    rho_hat = model.recon.forward(t_i, t_o)
    return t_i, t_o, rho_hat


def _cells(samples):
    cells = []
    for s in samples:
        if s.cell is None:
            raise ValueError("bounce sample carries no impact cell annotation")
        cells.append(tuple(s.cell))
    xs = np.array([c[0] for c in cells])
    ys = np.array([c[1] for c in cells])
    return xs, ys


def _data_terms(field, model, xs, ys, t_i, t_o, rho_hat):
    """Mean bounce-explanation loss and its gradients.

    Per bounce: cosine distance between the observed post encoding and the
    engine prediction from the looked-up cell parameters, plus the squared
    distance between those parameters and the reconstruction estimate.
    Returns (loss, grad on the looked-up rows, d_t_p for the engine backward,
    d_rho_hat).
    """
    b = len(xs)
    rho_cells = field.raw[xs, ys]
    t_p = model.core.forward(t_i, rho_cells)
    cos_terms = 1.0 - np.sum(t_p * t_o, axis=1)
    diff = rho_cells - rho_hat
    loss = float(np.mean(cos_terms) + np.sum(diff * diff) / b)
    d_tp = -t_o / b
    d_rho_cells = 2.0 * diff / b
    d_rho_hat = -2.0 * diff / b
    return loss, d_rho_cells, d_tp, d_rho_hat, t_p


def joint_loss_and_field_grad(field, model, samples, smoothness=0.1):
    """Full-batch joint objective and its exact gradient w.r.t. the raw field."""
    xs, ys = _cells(samples)
    t_i, t_o, rho_hat = _bounce_encodings(model, samples)
    loss, d_rho_cells, d_tp, _, _ = _data_terms(field, model, xs, ys, t_i, t_o, rho_hat)
    zero_grads(model.core)
    _, d_rho_core = model.core.backward(d_tp)
    grad = np.zeros_like(field.raw)
    np.add.at(grad, (xs, ys), d_rho_cells + d_rho_core)
    if smoothness:
        s_val, s_grad = smoothness_penalty(field.raw)
        loss += smoothness * s_val
        grad += smoothness * s_grad
    return loss, grad


def joint_loss(field, model, sample, smoothness=0.1):
    """Training objective for one located bounce (data terms plus weighted
    full-field smoothness; at zero weight this is exactly the online
    objective)."""
    return joint_loss_and_field_grad(field, model, [sample], smoothness)[0]


@dataclass
class JointTrainConfig:
    """Joint field+model training; defaults mirror the documented schedule,
    desk runs shrink iterations."""

    iterations: int = 24000
    batch_size: int = 32
    lr: float = 0.001
    lr_drop_every: int = 8000
    lr_drop_factor: float = 0.1
    weight_decay: float = 5e-4
    smoothness: float = 0.1
    regime: str = "core-only"    # "frozen" | "all" | "core-only"
    seed: int = 0

    def __post_init__(self):
        if self.regime not in ("frozen", "all", "core-only"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.smoothness < 0:
            raise ValueError("smoothness weight must be non-negative")


def train_joint(field, model, samples, config=None):
    """Optimize the field (and, per regime, parts of the model) on located
    bounces. The reconstruction head's parameters are never updated; the
    field itself is excluded from weight decay (it is the estimand, not a
    network weight). Returns the per-iteration loss curve."""
    config = config or JointTrainConfig()
    if not samples:
        raise ValueError("no bounce samples")
    xs, ys = _cells(samples)
    h, w = field.shape
    if np.any(xs >= h) or np.any(ys >= w):
        raise ValueError("bounce cell outside the field grid")

    live_encoders = config.regime == "all"
    if not live_encoders:
        t_i_all, t_o_all, rho_hat_all = _bounce_encodings(model, samples)
        xi_all = xo_all = None
    else:
        pre = [canonicalize(s.pre, s.impact_point, s.impact_time) for s in samples]
        post = [canonicalize(s.post, s.impact_point, s.impact_time) for s in samples]
        xi_all = np.stack([prepare_points(t, model.cfg) for t in pre]).astype(np.float32)
        xo_all = np.stack([prepare_points(t, model.cfg) for t in post]).astype(np.float32)

    net_params = []
    net_grad_sources = []
    if config.regime in ("core-only", "all"):
        net_params += model.core.parameters()
        net_grad_sources.append(model.core)
    if live_encoders:
        net_params += model.enc_i.parameters() + model.enc_o.parameters()
        net_grad_sources += [model.enc_i, model.enc_o]

    field_opt = Adam([field.raw], lr=config.lr, weight_decay=0.0)
    net_opt = Adam(net_params, lr=config.lr, weight_decay=config.weight_decay) \
        if net_params else None

    order_rng = rng_stream(config.seed, "joint-order")
    count = len(samples)
    batch = min(config.batch_size, count)
    losses = []
    perm = order_rng.permutation(count)
    cursor = 0
    for it in range(config.iterations):
        if it > 0 and config.lr_drop_every > 0 and it % config.lr_drop_every == 0:
            field_opt.lr *= config.lr_drop_factor
            if net_opt:
                net_opt.lr *= config.lr_drop_factor
        if cursor + batch > count:
            perm = order_rng.permutation(count)
            cursor = 0
        idx = perm[cursor:cursor + batch]
        cursor += batch

        if live_encoders:
            t_i = model.enc_i.forward_batch(xi_all[idx])
            t_o = model.enc_o.forward_batch(xo_all[idx])
            rho_hat = model.recon.forward(t_i, t_o)
        else:
            t_i, t_o, rho_hat = t_i_all[idx], t_o_all[idx], rho_hat_all[idx]

        bx, by = xs[idx], ys[idx]
        loss, d_rho_cells, d_tp, d_rho_hat, t_p = _data_terms(
            field, model, bx, by, t_i, t_o, rho_hat)

        zero_grads(model.core, model.enc_i, model.enc_o, model.recon)
        d_ti_core, d_rho_core = model.core.backward(d_tp)
        d_rho_cells = d_rho_cells + d_rho_core

        field_grad = np.zeros_like(field.raw)
        np.add.at(field_grad, (bx, by), d_rho_cells)
        if config.smoothness:
            s_val, s_grad = smoothness_penalty(field.raw)
            loss += config.smoothness * s_val
            field_grad += config.smoothness * s_grad
        losses.append(loss)

        if live_encoders:
            # gradients through the frozen reconstruction head reach the
            # encoders; its own parameters stay untouched
            d_ti_rec, d_to_rec = model.recon.backward(d_rho_hat)
            model.enc_o.backward_batch(-t_p / len(idx) + d_to_rec)
            model.enc_i.backward_batch(d_ti_core + d_ti_rec)

        field_opt.step([field_grad])
        if net_opt:
            net_grads = [g for src in net_grad_sources for g in src.gradients()]
            net_opt.step(net_grads)
    return losses


def optimize_field(field, model, xs, ys, t_i, t_o, rho_hat, lr=0.001,
                   tol=1e-6, window=50, max_steps=2000):
    """Full-batch field optimization of the smoothness-free objective with
    the bounce model fixed, until the loss change over ``window`` steps drops
    below ``tol`` or the step cap. Returns the loss history."""
    opt = Adam([field.raw], lr=lr, weight_decay=0.0)
    history = []
    for step in range(max_steps):
        loss, d_rho_cells, d_tp, _, _ = _data_terms(field, model, xs, ys,
                                                    t_i, t_o, rho_hat)
        zero_grads(model.core)
        _, d_rho_core = model.core.backward(d_tp)
        grad = np.zeros_like(field.raw)
        np.add.at(grad, (xs, ys), d_rho_cells + d_rho_core)
        opt.step([grad])
        history.append(loss)
        if step >= window and abs(history[-1] - history[-1 - window]) < tol:
            break
    return history


def online_update(field, model, stream, lr=0.001, tol=1e-6, window=50,
                  max_steps=2000):
    """Incremental field estimation: after each arriving bounce, optimize the
    smoothness-free objective over every bounce observed so far until
    convergence; the bounce model stays fixed. Returns one field snapshot
    per arrival."""
    snapshots = []
    observed = []
    enc_cache = []
    for sample in stream:
        observed.append(sample)
        enc_cache.append(_bounce_encodings(model, [sample]))
        t_i = np.concatenate([e[0] for e in enc_cache])
        t_o = np.concatenate([e[1] for e in enc_cache])
        rho_hat = np.concatenate([e[2] for e in enc_cache])
        xs, ys = _cells(observed)
        optimize_field(field, model, xs, ys, t_i, t_o, rho_hat,
                       lr=lr, tol=tol, window=window, max_steps=max_steps)
        snapshots.append(field.copy())
    return snapshots


def locate_impact_cell(points, scene):
    """Cell under the mean of the given ball points, projected to the scene
    plane; exact boundary hits resolve to the lowest cell index."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] != 3:
        raise ValueError("need a non-empty (N, 3) frame")
    mean = points.mean(axis=0)
    h, w = scene.shape
    cs = scene.cell_size
    u, v = mean[0] / cs, mean[1] / cs
    if u < 0 or u > h or v < 0 or v > w:
        raise ValueError(f"projection ({mean[0]:.3f}, {mean[1]:.3f}) falls outside the scene")

    def to_index(val, limit):
        idx = int(np.floor(val))
        if val == idx and idx > 0:   # boundary tie: lowest index wins
            idx -= 1
        return min(idx, limit - 1)

    return to_index(u, h), to_index(v, w)


def generate_scene_bounces(scene, count, cfg, seed, speed_range=(3.5, 5.0),
                           max_approach_deg=20.0, camera=None):
    """Probe bounces aimed at scene cells.

    Each bounce targets a uniformly chosen cell near its center with a steep
    downward approach (shallow approaches on low-cor cells rarely clear the
    surface within the post window); the response uses the cell's hidden
    effective parameters while detection uses the flat cell patch. The
    camera defaults to an overhead view of the scene.
    """
    h, w = scene.shape
    if camera is None:
        camera = np.array([h * scene.cell_size / 2, w * scene.cell_size / 2, 4.0])
    cfg = replace(cfg, camera=camera)
    cone = np.radians(max_approach_deg)
    samples = []
    for i in range(count):
        rng = rng_stream(seed, "scene", i)
        ix = int(rng.integers(0, h))
        iy = int(rng.integers(0, w))
        patch = scene.cell_patch(ix, iy)
        params = scene.cell_params(ix, iy)
        sample = None
        for _ in range(cfg.max_tries):
            jitter = rng.uniform(-0.3, 0.3, 2) * scene.cell_size
            contact = patch.point + np.array([jitter[0], jitter[1], 0.0])
            theta = np.arccos(rng.uniform(np.cos(cone), 1.0))
            phi = rng.uniform(0, 2 * np.pi)
            direction = -np.array([np.sin(theta) * np.cos(phi),
                                   np.sin(theta) * np.sin(phi),
                                   np.cos(theta)])
            if float(direction @ params.normal) >= -0.1:
                continue
            speed = rng.uniform(*speed_range)
            v_minus = speed * direction
            t_pre = rng.uniform((cfg.n_frames + 2) * cfg.dt, (cfg.n_frames + 12) * cfg.dt)
            center_star = contact + cfg.ball_radius * patch.normal
            v0 = v_minus - GRAVITY_VEC * t_pre
            c0 = center_star - v0 * t_pre - 0.5 * GRAVITY_VEC * t_pre * t_pre
            init = BallState(center=c0, velocity=v0, time=0.0)
            try:
                pre_path, post_path, record = simulate_bounce(init, patch, params, cfg)
            except (SimulationError, ValueError):
                continue
            if record.recontact or abs(record.time - t_pre) > 1e-9:
                continue
            pre = render_trajectory(pre_path, cfg, rng)
            post = render_trajectory(post_path, cfg, rng)
            sample = BounceSample(pre=pre, post=post, params=params,
                                  impact_time=record.time, impact_point=record.point,
                                  scene_id=scene.scene_id, cell=(ix, iy))
            break
        if sample is None:
            raise SimulationError(f"could not place a bounce on cell ({ix}, {iy})")
        samples.append(sample)
    return samples
