"""Scikit-learn style facades over the learnable pieces.

``PostBouncePredictor`` wraps pretraining plus the decoder database behind
fit/predict; ``SurfaceFieldEstimator`` wraps batch field training behind fit
and the online protocol behind partial_fit. Both inherit get_params /
set_params from sklearn's BaseEstimator so they compose with that ecosystem.
"""

import copy

import numpy as np
from sklearn.base import BaseEstimator

from . import field as fld
from . import fitters, pim
from .field import JointTrainConfig, SurfaceField
from .pim import GridSpec, PimConfig, PimModel, PretrainConfig
from .sim import SimConfig
from .validation import check_fitted, check_located_samples, check_samples


class PostBouncePredictor(BaseEstimator):
    """Learned post-bounce trajectory predictor.

    fit(samples) pretrains the encoders, core engine, and reconstruction
    head, then builds the nearest-neighbor decoder database. predict returns
    world-frame trajectory predictions; inverse recovers surface parameters
    by grid search.
    """

    def __init__(self, enc_points=500, enc_dim=64, variant="pooled",
                 iterations=96000, batch_size=32, lr=0.01, lr_drop_every=32000,
                 weight_decay=5e-4, margin=0.5, db_size=10000, sim_config=None,
                 seed=0):
        self.enc_points = enc_points
        self.enc_dim = enc_dim
        self.variant = variant
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.lr_drop_every = lr_drop_every
        self.weight_decay = weight_decay
        self.margin = margin
        self.db_size = db_size
        self.sim_config = sim_config
        self.seed = seed

    def fit(self, X, y=None):
        samples = check_samples(X)
        cfg = PimConfig(n_frames=samples[0].pre.n_frames, n_points=self.enc_points,
                        enc_dim=self.enc_dim, variant=self.variant)
        train_cfg = PretrainConfig(
            iterations=self.iterations, batch_size=self.batch_size, lr=self.lr,
            lr_drop_every=self.lr_drop_every, weight_decay=self.weight_decay,
            margin=self.margin, seed=self.seed)
        self.model_ = PimModel.create(cfg, seed=self.seed)
        self.loss_curve_ = pim.pretrain_pim(self.model_, samples, train_cfg)
        sim_cfg = self.sim_config or SimConfig(n_frames=cfg.n_frames)
        self.db_ = pim.build_decoder_db(self.model_.enc_o, sim_cfg,
                                        count=self.db_size, seed=self.seed)
        return self

    def predict(self, X, params="true"):
        """World-frame predictions; ``params`` is "true" (use each sample's
        annotated surface parameters) or a list of SurfaceParams."""
        check_fitted(self, "model_")
        samples = check_samples(X)
        if params == "true":
            param_list = [s.params for s in samples]
        else:
            param_list = list(params)
        return [
            pim.predict_post(self.model_, self.db_, s.pre, p,
                             impact_time=s.impact_time, impact_point=s.impact_point)
            for s, p in zip(samples, param_list)
        ]

    def predict_centers(self, X, params="true", radius=fitters.DEFAULT_BALL_RADIUS):
        """Predicted ball centers at the tenth post frame (sphere-fit from the
        decoded clouds)."""
        preds = self.predict(X, params=params)
        return np.stack([
            fitters.ransac_sphere(np.asarray(p.trajectory.points[-1], dtype=np.float64),
                                  radius)
            for p in preds
        ])

    def inverse(self, X):
        """Grid-search surface parameters for each (pre, post) pair."""
        check_fitted(self, "model_")
        samples = check_samples(X)
        out = []
        for s in samples:
            pre = pim.canonicalize(s.pre, s.impact_point, s.impact_time)
            post = pim.canonicalize(s.post, s.impact_point, s.impact_time)
            t_i = pim.encode(self.model_.enc_i, pre)
            t_o = pim.encode(self.model_.enc_o, post)
            centers = np.stack([np.asarray(f, dtype=np.float64).mean(axis=0)
                                for f in pre.points])
            approach = centers[-1] - centers[0]
            axis = tuple(-approach) if np.linalg.norm(approach) > 1e-9 else (0, 0, 1.0)
            params, _ = pim.invert_params(self.model_, t_i, t_o, GridSpec(axis=axis))
            out.append(params)
        return out


class SurfaceFieldEstimator(BaseEstimator):
    """Per-cell surface parameter field learned from located bounces.

    fit(samples) runs batch joint training against a pretrained bounce model
    (copied, so the caller's model is untouched); partial_fit(sample) applies
    the online protocol with the model frozen. predict returns clamped
    SurfaceParams readouts.
    """

    def __init__(self, model=None, shape=(8, 8), regime="core-only",
                 smoothness=0.1, iterations=24000, batch_size=32, lr=0.001,
                 lr_drop_every=8000, weight_decay=5e-4, online_lr=0.001,
                 online_max_steps=2000, seed=0):
        self.model = model
        self.shape = shape
        self.regime = regime
        self.smoothness = smoothness
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.lr_drop_every = lr_drop_every
        self.weight_decay = weight_decay
        self.online_lr = online_lr
        self.online_max_steps = online_max_steps
        self.seed = seed

    def _require_model(self):
        if self.model is None:
            raise ValueError("SurfaceFieldEstimator needs a pretrained model")

    def fit(self, X, y=None):
        self._require_model()
        samples = check_located_samples(X, self.shape)
        cfg = JointTrainConfig(
            iterations=self.iterations, batch_size=self.batch_size, lr=self.lr,
            lr_drop_every=self.lr_drop_every, weight_decay=self.weight_decay,
            smoothness=self.smoothness, regime=self.regime, seed=self.seed)
        self.model_ = copy.deepcopy(self.model)
        self.field_ = SurfaceField.create(self.shape)
        self.loss_curve_ = fld.train_joint(self.field_, self.model_, samples, cfg)
        self.observed_ = list(samples)
        return self

    def partial_fit(self, X, y=None):
        """Online protocol: extend the observed stream and re-optimize the
        field over everything seen so far, model frozen."""
        self._require_model()
        new = check_located_samples([X] if not isinstance(X, list) else X, self.shape)
        if not hasattr(self, "field_"):
            self.model_ = copy.deepcopy(self.model)
            self.field_ = SurfaceField.create(self.shape)
            self.observed_ = []
            self.loss_curve_ = []
        for sample in new:
            self.observed_.append(sample)
            t_i, t_o, rho_hat = fld._bounce_encodings(self.model_, self.observed_)
            xs, ys = fld._cells(self.observed_)
            fld.optimize_field(self.field_, self.model_, xs, ys, t_i, t_o, rho_hat,
                               lr=self.online_lr, max_steps=self.online_max_steps)
        return self

    def predict(self, cells=None):
        """SurfaceParams readouts for the given (ix, iy) pairs, or the whole
        grid (row-major) when cells is None."""
        check_fitted(self, "field_")
        h, w = self.field_.shape
        if cells is None:
            cells = [(ix, iy) for ix in range(h) for iy in range(w)]
        return [self.field_.readout(ix, iy) for ix, iy in cells]
