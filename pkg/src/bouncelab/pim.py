"""Learned bounce model: trajectory encoders, core engine, inversion.

Two point-cloud encoders embed the pre- and post-bounce trajectories as unit
vectors; a small core network maps (pre encoding, surface parameters) to the
predicted post encoding; a reconstruction head recovers the parameters from
the two encodings during pretraining. Decoding back to a trajectory is
non-parametric: nearest neighbor in a database of simulated post-bounce
trajectories stored in the canonical impact frame (impact point at the
origin, impact time zero).
"""

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import fitters
from .core import SurfaceParams, rng_stream, unit
from .nnet import (
    Adam,
    Dense,
    L2Normalize,
    Relu,
    Sequential,
    batch_triplet_cosine_loss,
    zero_grads,
)
from .sim import SimConfig, Trajectory, generate_sample

_RESAMPLE_SEED = 271828


@dataclass(frozen=True)
class PimConfig:
    n_frames: int = 10
    n_points: int = 500       # points per frame fed to the encoder
    enc_dim: int = 64
    point_hidden: int = 32
    point_feat: int = 64
    frame_feat: int = 128
    trunk_hidden: int = 256
    rho_hidden: int = 16
    rho_feat: int = 32
    core_hidden: int = 64
    recon_hidden: int = 64
    variant: str = "pooled"   # "pooled" (permutation invariant) or "sorted"
    sorted_chunks: int = 10

    def __post_init__(self):
        if self.variant not in ("pooled", "sorted"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.variant == "sorted" and self.n_points % self.sorted_chunks:
            raise ValueError("n_points must be divisible by sorted_chunks")


@dataclass
class PretrainConfig:
    """Paper-scale defaults; desk runs override iterations and schedule."""

    iterations: int = 96000
    batch_size: int = 32
    lr: float = 0.01
    lr_drop_every: int = 32000
    lr_drop_factor: float = 0.1
    weight_decay: float = 5e-4
    margin: float = 0.5
    decoupled_weight_decay: bool = False
    seed: int = 0


def canonicalize(traj, impact_point, impact_time):
    """Shift a trajectory into the canonical impact frame (translation and
    time shift only; orientation is left alone because the collision normal
    must stay expressible)."""
    return traj.translated(-np.asarray(impact_point, dtype=np.float64),
                           time_offset=-float(impact_time))


def lexsort_points(points):
    """Sort rows by x, then y, then z."""
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return points[order]


def prepare_points(traj, cfg, rng=None):
    """Encoder input array (T, n_points, 3), float64.

    Frames with a different point count are resampled with the frame's rng
    stream (without replacement when shrinking). The sorted variant orders
    each frame lexicographically.
    """
    if traj.n_frames != cfg.n_frames:
        raise ValueError(
            f"trajectory has {traj.n_frames} frames, model expects {cfg.n_frames}")
    out = np.empty((cfg.n_frames, cfg.n_points, 3))
    for i in range(cfg.n_frames):
        pts = np.asarray(traj.points[i], dtype=np.float64)
        n = pts.shape[0]
        if n != cfg.n_points:
            frame_rng = rng if rng is not None else rng_stream(_RESAMPLE_SEED, i)
            idx = frame_rng.choice(n, size=cfg.n_points, replace=n < cfg.n_points)
            pts = pts[idx]
        if cfg.variant == "sorted":
            pts = lexsort_points(pts)
        out[i] = pts
    return out


class _Scratch(threading.local):
    """Per-thread reusable buffers; fresh multi-MB allocations per call cost
    more in page faults than the math on small machines. Copies and pickles
    start empty (the buffers are disposable caches)."""

    def __init__(self):
        self.buffers = {}

    def __deepcopy__(self, memo):
        return _Scratch()

    def __reduce__(self):
        return (_Scratch, ())

    def get(self, key, shape, dtype=np.float64):
        buf = self.buffers.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype)
            self.buffers[key] = buf
        return buf


class TrajectoryEncoder:
    """Shared per-point network, per-frame set pooling, dense trunk over the
    concatenated frame features, L2-normalized output.

    The point stage (the hot path: batch * frames * points rows) runs fused
    with scratch buffers; its math is identical to Dense/Relu/MaxPoolSet.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.point1 = Dense(3, cfg.point_hidden, rng)
        self.point2 = Dense(cfg.point_hidden, cfg.point_feat, rng)
        pooled_width = cfg.point_feat
        if cfg.variant == "sorted":
            pooled_width = cfg.point_feat * cfg.sorted_chunks
        self.frame_net = Sequential(Dense(pooled_width, cfg.frame_feat, rng), Relu())
        self.trunk = Sequential(
            Dense(cfg.frame_feat * cfg.n_frames, cfg.trunk_hidden, rng), Relu(),
            Dense(cfg.trunk_hidden, cfg.enc_dim, rng), L2Normalize(),
        )
        self._scratch = _Scratch()
        self._cache = None

    def _pool_groups(self, b, t, n):
        cfg = self.cfg
        if cfg.variant == "sorted":
            return b * t * cfg.sorted_chunks, n // cfg.sorted_chunks
        return b * t, n

    def forward_batch(self, x):
        b, t, n, _ = x.shape
        cfg = self.cfg
        if t != cfg.n_frames or n != cfg.n_points:
            raise ValueError(f"expected (B, {cfg.n_frames}, {cfg.n_points}, 3), got {x.shape}")
        s = self._scratch
        rows = b * t * n
        if x.dtype == np.float64 and x.flags.c_contiguous:
            flat = x.reshape(rows, 3)
        else:
            flat = s.get("flat", (rows, 3))
            np.copyto(flat, x.reshape(rows, 3))

        h1 = s.get("h1", (rows, cfg.point_hidden))
        np.matmul(flat, self.point1.weight.T, out=h1)
        h1 += self.point1.bias
        np.maximum(h1, 0.0, out=h1)            # h1 now holds the activation

        h2 = s.get("h2", (rows, cfg.point_feat))
        np.matmul(h1, self.point2.weight.T, out=h2)
        h2 += self.point2.bias
        np.maximum(h2, 0.0, out=h2)

        groups, set_size = self._pool_groups(b, t, n)
        grouped = h2.reshape(groups, set_size, cfg.point_feat)
        argmax = np.argmax(grouped, axis=1)
        pooled = np.take_along_axis(grouped, argmax[:, None, :], axis=1)[:, 0, :]
        pooled = pooled.reshape(b * t, -1)

        fh = self.frame_net.forward(pooled)
        z = self.trunk.forward(fh.reshape(b, t * cfg.frame_feat))
        self._cache = {"flat": flat, "h1": h1, "h2": h2, "argmax": argmax,
                       "shape": (b, t, n)}
        return z

    def backward_batch(self, dz, need_input_grad=False):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache = self._cache
        b, t, n = cache["shape"]
        cfg = self.cfg
        s = self._scratch
        rows = b * t * n

        dfh = self.trunk.backward(dz).reshape(b * t, cfg.frame_feat)
        dpooled = self.frame_net.backward(dfh)

        groups, set_size = self._pool_groups(b, t, n)
        g2 = s.get("g2", (rows, cfg.point_feat))
        g2[...] = 0.0
        np.put_along_axis(g2.reshape(groups, set_size, cfg.point_feat),
                          cache["argmax"][:, None, :],
                          dpooled.reshape(groups, 1, cfg.point_feat), axis=1)

        mask2 = s.get("mask2", (rows, cfg.point_feat), dtype=bool)
        np.greater(cache["h2"], 0.0, out=mask2)
        g2 *= mask2
        self.point2.grad_weight += g2.T @ cache["h1"]
        self.point2.grad_bias += g2.sum(axis=0)

        g1 = s.get("g1", (rows, cfg.point_hidden))
        np.matmul(g2, self.point2.weight, out=g1)
        mask1 = s.get("mask1", (rows, cfg.point_hidden), dtype=bool)
        np.greater(cache["h1"], 0.0, out=mask1)
        g1 *= mask1
        self.point1.grad_weight += g1.T @ cache["flat"]
        self.point1.grad_bias += g1.sum(axis=0)
        if need_input_grad:
            return (g1 @ self.point1.weight).reshape(b, t, n, 3)
        return None

    def parameters(self):
        return (self.point1.parameters() + self.point2.parameters()
                + self.frame_net.parameters() + self.trunk.parameters())

    def gradients(self):
        return (self.point1.gradients() + self.point2.gradients()
                + self.frame_net.gradients() + self.trunk.gradients())


class CoreEngine:
    """Physics core: embeds the 4-vector of surface parameters, concatenates
    with the pre encoding, and predicts the unit-norm post encoding."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.embed = Sequential(
            Dense(4, cfg.rho_hidden, rng), Relu(),
            Dense(cfg.rho_hidden, cfg.rho_feat, rng), Relu(),
        )
        self.predict = Sequential(
            Dense(cfg.enc_dim + cfg.rho_feat, cfg.core_hidden, rng), Relu(),
            Dense(cfg.core_hidden, cfg.enc_dim, rng), L2Normalize(),
        )

    def forward(self, t_i, rho):
        t_i = np.atleast_2d(np.asarray(t_i, dtype=np.float64))
        rho = np.atleast_2d(np.asarray(rho, dtype=np.float64))
        v = self.embed.forward(rho)
        return self.predict.forward(np.concatenate([t_i, v], axis=1))

    def backward(self, d_tp):
        du = self.predict.backward(d_tp)
        d_ti = du[:, : self.cfg.enc_dim]
        d_rho = self.embed.backward(du[:, self.cfg.enc_dim:])
        return d_ti, d_rho

    def parameters(self):
        return self.embed.parameters() + self.predict.parameters()

    def gradients(self):
        return self.embed.gradients() + self.predict.gradients()


class ReconNet:
    """Recovers the raw parameter 4-vector from the two trajectory encodings."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.net = Sequential(
            Dense(2 * cfg.enc_dim, cfg.recon_hidden, rng), Relu(),
            Dense(cfg.recon_hidden, 4, rng),
        )

    def forward(self, t_i, t_o):
        t_i = np.atleast_2d(np.asarray(t_i, dtype=np.float64))
        t_o = np.atleast_2d(np.asarray(t_o, dtype=np.float64))
        return self.net.forward(np.concatenate([t_i, t_o], axis=1))

    def backward(self, d_out):
        du = self.net.backward(d_out)
        e = self.cfg.enc_dim
        return du[:, :e], du[:, e:]

    def parameters(self):
        return self.net.parameters()

    def gradients(self):
        return self.net.gradients()


@dataclass
class PimModel:
    cfg: PimConfig
    enc_i: TrajectoryEncoder
    enc_o: TrajectoryEncoder
    core: CoreEngine
    recon: ReconNet

    @classmethod
    def create(cls, cfg=None, seed=0):
        cfg = cfg or PimConfig()
        return cls(
            cfg=cfg,
            enc_i=TrajectoryEncoder(cfg, rng_stream(seed, "enc_i")),
            enc_o=TrajectoryEncoder(cfg, rng_stream(seed, "enc_o")),
            core=CoreEngine(cfg, rng_stream(seed, "core")),
            recon=ReconNet(cfg, rng_stream(seed, "recon")),
        )

    def sections(self):
        return {"enc_i": self.enc_i, "enc_o": self.enc_o,
                "core": self.core, "recon": self.recon}

    def parameters(self):
        return [p for s in self.sections().values() for p in s.parameters()]

    def gradients(self):
        return [g for s in self.sections().values() for g in s.gradients()]


def params_digest(module):
    """Content hash of a module's parameters (used to pin a decoder database
    to the encoder that built it)."""
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def encode(encoder, traj, rng=None):
    """Unit-norm encoding of a single trajectory."""
    x = prepare_points(traj, encoder.cfg, rng=rng)
    return encoder.forward_batch(x[None])[0]


def engine_forward(core, t_i, params):
    """Predicted post encoding for one pre encoding and surface parameters."""
    rho = params.as_vector() if isinstance(params, SurfaceParams) else np.asarray(params)
    return core.forward(np.asarray(t_i)[None], rho[None])[0]


def recon_params(recon, t_i, t_o, clamp=True):
    """Parameter estimate from the reconstruction head.

    Training uses the raw 4-vector; at inference the cor is clamped to [0, 1]
    and the normal block renormalized.
    """
    raw = recon.forward(np.asarray(t_i)[None], np.asarray(t_o)[None])[0]
    if not clamp:
        return raw
    return SurfaceParams.from_vector(raw, clamp=True)


def _prepare_training_arrays(cfg, samples):
    count = len(samples)
    xi = np.empty((count, cfg.n_frames, cfg.n_points, 3), dtype=np.float32)
    xo = np.empty_like(xi)
    rho = np.empty((count, 4))
    for s, sample in enumerate(samples):
        pre = canonicalize(sample.pre, sample.impact_point, sample.impact_time)
        post = canonicalize(sample.post, sample.impact_point, sample.impact_time)
        xi[s] = prepare_points(pre, cfg)
        xo[s] = prepare_points(post, cfg)
        rho[s] = sample.params.as_vector()
    return xi, xo, rho


def pretrain_pim(model, samples, config=None):
    """Joint pretraining of encoders, core, and reconstruction head.

    Per batch: in-batch triplet loss pulling the predicted post encoding
    toward its own post encoding and away from the other samples', plus the
    squared-L2 parameter reconstruction loss. Returns the per-iteration loss
    curve; the model trains in place and the run is deterministic per seed.
    """
    config = config or PretrainConfig()
    if len(samples) == 0:
        raise ValueError("empty training dataset")
    if config.batch_size < 2:
        raise ValueError("batch size must be at least 2 (in-batch negatives)")
    if len(samples) < config.batch_size:
        raise ValueError("dataset smaller than one batch")

    xi, xo, rho = _prepare_training_arrays(model.cfg, samples)
    count = xi.shape[0]
    order_rng = rng_stream(config.seed, "batch-order")
    opt = Adam(model.parameters(), lr=config.lr,
               weight_decay=config.weight_decay,
               decoupled=config.decoupled_weight_decay)

    losses = []
    perm = order_rng.permutation(count)
    cursor = 0
    for it in range(config.iterations):
        if it > 0 and config.lr_drop_every > 0 and it % config.lr_drop_every == 0:
            opt.lr *= config.lr_drop_factor
        if cursor + config.batch_size > count:
            perm = order_rng.permutation(count)
            cursor = 0
        idx = perm[cursor:cursor + config.batch_size]
        cursor += config.batch_size

        xi_b = xi[idx]
        xo_b = xo[idx]
        rho_b = rho[idx]

        t_i = model.enc_i.forward_batch(xi_b)
        t_o = model.enc_o.forward_batch(xo_b)
        t_p = model.core.forward(t_i, rho_b)
        rho_hat = model.recon.forward(t_i, t_o)

        l_trip, g_tp, g_to = batch_triplet_cosine_loss(t_p, t_o, config.margin)
        diff = rho_hat - rho_b
        l_rec = float(np.sum(diff * diff)) / len(idx)
        g_rho_hat = 2.0 * diff / len(idx)
        losses.append(l_trip + l_rec)

        zero_grads(model.enc_i, model.enc_o, model.core, model.recon)
        d_ti_rec, d_to_rec = model.recon.backward(g_rho_hat)
        d_ti_core, _ = model.core.backward(g_tp)
        model.enc_o.backward_batch(g_to + d_to_rec)
        model.enc_i.backward_batch(d_ti_core + d_ti_rec)
        opt.step(model.gradients())
    return losses


@dataclass
class DecoderDB:
    """Canonical post-bounce trajectories with their encodings under a fixed
    post encoder."""

    encodings: np.ndarray            # (M, E)
    trajectories: list
    rhos: np.ndarray                 # (M, 4)
    encoder_digest: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.encodings.shape[0]


@dataclass(frozen=True)
class DecodeResult:
    index: int
    distance: float
    trajectory: Trajectory


def encode_batch(encoder, trajectories, batch_size=256):
    """Encodings for a list of (already canonical) trajectories."""
    cfg = encoder.cfg
    out = np.empty((len(trajectories), cfg.enc_dim))
    for start in range(0, len(trajectories), batch_size):
        chunk = trajectories[start:start + batch_size]
        x = np.stack([prepare_points(t, cfg) for t in chunk])
        out[start:start + len(chunk)] = encoder.forward_batch(x)
    return out


def build_decoder_db(enc_o, sim_cfg=None, count=10000, seed=0):
    """Simulate ``count`` fresh bounces and index their canonical post
    trajectories by encoding. Must be rebuilt whenever the encoder changes
    (the digest pins the pairing)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    sim_cfg = sim_cfg or SimConfig()
    trajectories = []
    rhos = np.empty((count, 4))
    for i in range(count):
        sample = generate_sample(rng_stream(seed, "db", i), sim_cfg)
        trajectories.append(canonicalize(sample.post, sample.impact_point,
                                         sample.impact_time))
        rhos[i] = sample.params.as_vector()
    encodings = encode_batch(enc_o, trajectories)
    meta = {"count": count, "seed": seed, "dt": sim_cfg.dt,
            "n_frames": sim_cfg.n_frames, "n_points": sim_cfg.n_points,
            "noise_sigma": sim_cfg.noise_sigma}
    return DecoderDB(encodings=encodings, trajectories=trajectories, rhos=rhos,
                     encoder_digest=params_digest(enc_o), meta=meta)


def decode(t_p, db):
    """Nearest database entry by cosine distance; ties break to the lowest
    index (plain linear scan at this scale)."""
    if len(db) == 0:
        raise ValueError("empty decoder database")
    dists = 1.0 - db.encodings @ np.asarray(t_p, dtype=np.float64)
    idx = int(np.argmin(dists))
    return DecodeResult(index=idx, distance=float(dists[idx]),
                        trajectory=db.trajectories[idx])


@dataclass(frozen=True)
class Prediction:
    trajectory: Trajectory      # world frame
    impact_time: float
    impact_point: np.ndarray
    db_index: int
    db_distance: float


def predict_post(model, db, pre, params, impact_time=None, impact_point=None,
                 plane=None, radius=fitters.DEFAULT_BALL_RADIUS):
    """World-frame post-bounce trajectory prediction.

    Canonicalize the pre trajectory around the impact (given, or estimated by
    the rigid-body impact solve against ``plane``), encode, run the core
    engine, decode by nearest neighbor, and shift the decoded trajectory back
    to world coordinates.
    """
    if params_digest(model.enc_o) != db.encoder_digest:
        raise ValueError("decoder database was built with a different post encoder; rebuild it")
    if impact_time is None or impact_point is None:
        if plane is None:
            raise ValueError("need a surface patch to estimate the impact")
        impact_time, impact_point, _ = fitters.estimate_impact(pre, plane, radius)
    impact_point = np.asarray(impact_point, dtype=np.float64)
    canon = canonicalize(pre, impact_point, impact_time)
    t_i = encode(model.enc_i, canon)
    t_p = engine_forward(model.core, t_i, params)
    res = decode(t_p, db)
    world = res.trajectory.translated(impact_point, time_offset=float(impact_time))
    return Prediction(trajectory=world, impact_time=float(impact_time),
                      impact_point=impact_point, db_index=res.index,
                      db_distance=res.distance)


def fibonacci_hemisphere(n, axis=(0.0, 0.0, 1.0)):
    """n roughly equal-area unit directions on the hemisphere around axis."""
    i = np.arange(n)
    z = (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    points = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    axis = unit(np.asarray(axis, dtype=np.float64), "axis")
    zhat = np.array([0.0, 0.0, 1.0])
    if np.allclose(axis, zhat, atol=1e-12):
        return points
    if np.allclose(axis, -zhat, atol=1e-12):
        return points * np.array([1.0, 1.0, -1.0])
    # Rodrigues rotation taking +z to axis
    k = unit(np.cross(zhat, axis))
    angle = np.arccos(np.clip(zhat @ axis, -1.0, 1.0))
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
    return points @ rot.T


@dataclass(frozen=True)
class GridSpec:
    """Search grid for parameter inversion.

    ``axis`` orients the normal hemisphere; callers that know the approach
    direction should point it against the incoming velocity so the oriented
    collision normal is reachable.
    """

    cor_steps: int = 21          # {0, 0.05, ..., 1}
    n_normals: int = 500
    axis: tuple = (0.0, 0.0, 1.0)
    refine: bool = True
    refine_rounds: int = 2


def _grid_distances(core, t_i, rhos, t_o):
    preds = core.forward(np.tile(np.asarray(t_i), (rhos.shape[0], 1)), rhos)
    return 1.0 - preds @ np.asarray(t_o)


def _ring_candidates(normal, angle, count=8):
    n = unit(normal)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(n @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = unit(np.cross(n, ref))
    w = np.cross(n, u)
    phis = 2 * np.pi * np.arange(count) / count
    ring = (np.cos(angle) * n[None, :]
            + np.sin(angle) * (np.cos(phis)[:, None] * u + np.sin(phis)[:, None] * w))
    return np.concatenate([n[None, :], ring])


def invert_params(model, t_i, t_o, grid=None):
    """Grid-search the surface parameters minimizing the cosine distance
    between the engine prediction and the observed post encoding, optionally
    refined by two halved-step coordinate passes."""
    grid = grid or GridSpec()
    cors = np.linspace(0.0, 1.0, grid.cor_steps)
    normals = fibonacci_hemisphere(grid.n_normals, grid.axis)
    rhos = np.empty((grid.cor_steps * grid.n_normals, 4))
    rhos[:, 0] = np.repeat(cors, grid.n_normals)
    rhos[:, 1:] = np.tile(normals, (grid.cor_steps, 1))
    dists = _grid_distances(model.core, t_i, rhos, t_o)
    best = int(np.argmin(dists))
    best_cor = float(rhos[best, 0])
    best_normal = rhos[best, 1:].copy()
    best_dist = float(dists[best])

    if grid.refine:
        cor_step = 1.0 / (grid.cor_steps - 1) if grid.cor_steps > 1 else 0.0
        angle = np.sqrt(2 * np.pi / grid.n_normals)
        for round_idx in range(1, grid.refine_rounds + 1):
            c_step = cor_step / (2 ** round_idx)
            a_step = angle / (2 ** round_idx)
            cor_cands = np.clip([best_cor - c_step, best_cor, best_cor + c_step], 0.0, 1.0)
            normal_cands = _ring_candidates(best_normal, a_step)
            cand = np.empty((cor_cands.size * normal_cands.shape[0], 4))
            cand[:, 0] = np.repeat(cor_cands, normal_cands.shape[0])
            cand[:, 1:] = np.tile(normal_cands, (cor_cands.size, 1))
            cdists = _grid_distances(model.core, t_i, cand, t_o)
            cbest = int(np.argmin(cdists))
            if cdists[cbest] < best_dist:
                best_dist = float(cdists[cbest])
                best_cor = float(cand[cbest, 0])
                best_normal = cand[cbest, 1:].copy()
    return SurfaceParams(cor=best_cor, normal=unit(best_normal)), best_dist
