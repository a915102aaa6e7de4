"""Sphere-bounce simulation, restitution learning, and surface field estimation."""

from .core import (
    GRAVITY,
    SurfaceParams,
    cor_from_velocities,
    cosine_distance,
    restitution_law,
    rng_stream,
)
from .estimators import PostBouncePredictor, SurfaceFieldEstimator
from .field import (
    JointTrainConfig,
    SceneSpec,
    SurfaceField,
    generate_scene_bounces,
    joint_loss,
    locate_impact_cell,
    make_scene,
    online_update,
    train_joint,
    two_region_scene,
)
from .pim import (
    DecoderDB,
    GridSpec,
    PimConfig,
    PimModel,
    PretrainConfig,
    build_decoder_db,
    canonicalize,
    decode,
    encode,
    engine_forward,
    invert_params,
    predict_post,
    pretrain_pim,
)
from .sim import (
    BallState,
    BounceSample,
    PlanePatch,
    SimConfig,
    Trajectory,
    generate_dataset,
    generate_sample,
    render_point_cloud,
    sample_bounce_config,
    simulate_bounce,
    step_ballistic,
)

__version__ = "0.1.0"

__all__ = [
    "GRAVITY", "SurfaceParams", "cor_from_velocities", "cosine_distance",
    "restitution_law", "rng_stream",
    "PostBouncePredictor", "SurfaceFieldEstimator",
    "JointTrainConfig", "SceneSpec", "SurfaceField", "generate_scene_bounces",
    "joint_loss", "locate_impact_cell", "make_scene", "online_update",
    "train_joint", "two_region_scene",
    "DecoderDB", "GridSpec", "PimConfig", "PimModel", "PretrainConfig",
    "build_decoder_db", "canonicalize", "decode", "encode", "engine_forward",
    "invert_params", "predict_post", "pretrain_pim",
    "BallState", "BounceSample", "PlanePatch", "SimConfig", "Trajectory",
    "generate_dataset", "generate_sample", "render_point_cloud",
    "sample_bounce_config", "simulate_bounce", "step_ballistic",
]
