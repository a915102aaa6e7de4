"""Shared geometric and physical primitives.

Everything here is pure and side-effect free: 3-vectors are plain numpy
arrays of shape (3,), all arithmetic is float64, and randomness only enters
through explicitly passed generators created by :func:`rng_stream`.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81  # m/s^2, acting along -z
GRAVITY_VEC = np.array([0.0, 0.0, -GRAVITY])

UNIT_NORM_TOL = 1e-9


def as_vec3(v, name="vector"):
    """Coerce to a finite float64 array of shape (3,)."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite components: {arr}")
    return arr


def unit(v, name="vector"):
    """Normalize to unit length, rejecting near-zero input."""
    arr = as_vec3(v, name)
    norm = float(np.linalg.norm(arr))
    if norm < 1e-12:
        raise ValueError(f"cannot normalize near-zero {name} (norm={norm:g})")
    return arr / norm


def check_unit(v, name="vector", tol=UNIT_NORM_TOL):
    arr = as_vec3(v, name)
    norm = float(np.linalg.norm(arr))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{name} must be unit length (norm={norm!r})")
    return arr


@dataclass(frozen=True)
class SurfaceParams:
    """Effective physical parameters of a bounce surface.

    ``cor`` is the coefficient of restitution in [0, 1]; ``normal`` is the
    effective collision normal, a unit vector pointing away from the surface
    into the half space the ball approaches from.
    """

    cor: float
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if not np.isfinite(self.cor) or not (0.0 <= self.cor <= 1.0):
            raise ValueError(f"cor must lie in [0, 1], got {self.cor!r}")
        object.__setattr__(self, "cor", float(self.cor))
        object.__setattr__(self, "normal", check_unit(self.normal, "normal"))

    def as_vector(self):
        """Serialize as the 4-vector (cor, nx, ny, nz)."""
        return np.concatenate(([self.cor], self.normal))

    @classmethod
    def from_vector(cls, vec, clamp=False):
        """Build from a raw 4-vector; with ``clamp`` the cor is clipped to
        [0, 1] and the normal block renormalized (inference readout)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (4,):
            raise ValueError(f"parameter vector must have shape (4,), got {vec.shape}")
        cor, normal = float(vec[0]), vec[1:]
        if clamp:
            cor = min(max(cor, 0.0), 1.0)
            normal = unit(normal, "normal block")
        return cls(cor=cor, normal=normal)


def restitution_law(v_minus, params):
    """Post-impact velocity of a frictionless restitution collision.

    The normal velocity component reverses scaled by the cor, the tangential
    component is unchanged:  v+ = v- - (1 + cor) (n . v-) n.
    Rejects grazing or receding impacts (n . v- >= 0).
    """
    v_minus = as_vec3(v_minus, "v_minus")
    n = params.normal
    vn = float(n @ v_minus)
    if vn >= 0.0:
        raise ValueError(f"ball not moving into surface (normal . v_minus = {vn:g} >= 0)")
    return v_minus - (1.0 + params.cor) * vn * n


def cor_from_velocities(v_minus, v_plus, normal):
    """Coefficient of restitution from pre/post impact velocities.

    Returns -(n . v+)/(n . v-) under the convention that ``normal`` points
    away from the surface; exact inverse of :func:`restitution_law`.
    """
    v_minus = as_vec3(v_minus, "v_minus")
    v_plus = as_vec3(v_plus, "v_plus")
    n = check_unit(normal, "normal")
    denom = float(n @ v_minus)
    if abs(denom) < 1e-12:
        raise ZeroDivisionError(f"normal velocity too small to define cor (|n . v-| = {abs(denom):g})")
    return -float(n @ v_plus) / denom


def cosine_distance(a, b):
    """1 - dot(a, b) for unit vectors; in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return 1.0 - float(a @ b)


def _to_entropy(part):
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("rng stream parts must be non-negative integers or strings")
        return int(part)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng stream part must be int or str, got {type(part)!r}")


def rng_stream(seed, *stream):
    """Deterministic, platform-stable generator for (seed, stream id).

    Identical arguments always yield the identical sample sequence; distinct
    stream ids give statistically independent streams. String parts are
    hashed so callers can label streams by purpose.
    """
    entropy = [_to_entropy(seed)] + [_to_entropy(p) for p in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
