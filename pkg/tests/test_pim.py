from types import SimpleNamespace

import numpy as np
import pytest

from bouncelab import pim
from bouncelab.core import SurfaceParams, rng_stream
from bouncelab.sim import SimConfig, Trajectory, generate_sample

from conftest import central_diff, rel_error


SMALL_CFG = pim.PimConfig(n_frames=10, n_points=64, enc_dim=16, point_hidden=8,
                          point_feat=16, frame_feat=24, trunk_hidden=32,
                          rho_hidden=8, rho_feat=12, core_hidden=24, recon_hidden=16)
SIM_CFG = SimConfig(n_points=80, noise_sigma=0.0)


def _model(seed=0, cfg=SMALL_CFG):
    return pim.PimModel.create(cfg, seed=seed)


def _sample(i=0, sim_cfg=SIM_CFG, **kw):
    return generate_sample(rng_stream(900, i), sim_cfg, **kw)


def test_canonicalize_identity_and_translation():
    s = _sample(0)
    same = pim.canonicalize(s.pre, np.zeros(3), 0.0)
    assert np.array_equal(same.points, s.pre.points)
    assert np.array_equal(same.times, s.pre.times)

    shift = np.array([1.5, -2.0, 0.75])
    moved = s.pre.translated(shift)
    canon_a = pim.canonicalize(s.pre, s.impact_point, s.impact_time)
    canon_b = pim.canonicalize(moved, s.impact_point + shift, s.impact_time)
    assert np.max(np.abs(canon_a.points - canon_b.points)) < 1e-12


def test_encoder_output_unit_norm():
    model = _model()
    s = _sample(1)
    enc = pim.encode(model.enc_i, pim.canonicalize(s.pre, s.impact_point, s.impact_time))
    assert abs(np.linalg.norm(enc) - 1.0) < 1e-9


def test_encoder_translation_invariance_through_canonicalization():
    model = _model()
    s = _sample(2)
    shift = np.array([3.0, 1.0, -0.5])
    enc_a = pim.encode(model.enc_i, pim.canonicalize(s.pre, s.impact_point, s.impact_time))
    enc_b = pim.encode(model.enc_i,
                       pim.canonicalize(s.pre.translated(shift),
                                        s.impact_point + shift, s.impact_time))
    assert np.max(np.abs(enc_a - enc_b)) < 1e-9


def test_encoder_permutation_invariance():
    # exact invariance needs the encoder to see whole frames (no resampling)
    model = _model()
    s = _sample(3, sim_cfg=SimConfig(n_points=SMALL_CFG.n_points, noise_sigma=0.0))
    canon = pim.canonicalize(s.pre, s.impact_point, s.impact_time)
    rng = rng_stream(4)
    permuted_points = np.stack([canon.points[i][rng.permutation(canon.points.shape[1])]
                                for i in range(canon.n_frames)])
    permuted = Trajectory(times=canon.times, points=permuted_points)
    enc_a = pim.encode(model.enc_i, canon)
    enc_b = pim.encode(model.enc_i, permuted)
    assert np.array_equal(enc_a, enc_b)


def test_sorted_variant_also_runs_and_is_order_canonical():
    cfg = pim.PimConfig(n_frames=10, n_points=60, enc_dim=16, point_hidden=8,
                        point_feat=16, frame_feat=24, trunk_hidden=32,
                        variant="sorted", sorted_chunks=6)
    model = pim.PimModel.create(cfg, seed=1)
    s = _sample(4, sim_cfg=SimConfig(n_points=cfg.n_points, noise_sigma=0.0))
    canon = pim.canonicalize(s.pre, s.impact_point, s.impact_time)
    rng = rng_stream(5)
    permuted = Trajectory(
        times=canon.times,
        points=np.stack([canon.points[i][rng.permutation(canon.points.shape[1])]
                         for i in range(canon.n_frames)]))
    enc_a = pim.encode(model.enc_i, canon)
    enc_b = pim.encode(model.enc_i, permuted)
    # lexicographic sorting restores a canonical order
    assert np.array_equal(enc_a, enc_b)
    assert abs(np.linalg.norm(enc_a) - 1.0) < 1e-9


def test_prepare_points_resamples_to_model_size():
    s = _sample(5)
    canon = pim.canonicalize(s.pre, s.impact_point, s.impact_time)
    x = pim.prepare_points(canon, SMALL_CFG)
    assert x.shape == (10, 64, 3)
    y = pim.prepare_points(canon, SMALL_CFG)
    assert np.array_equal(x, y)  # frame streams are fixed


def test_encode_frame_count_mismatch():
    model = _model()
    s = _sample(6)
    short = Trajectory(times=s.pre.times[:5], points=s.pre.points[:5])
    with pytest.raises(ValueError):
        pim.encode(model.enc_i, short)


def test_engine_forward_unit_norm_and_rho_gradient():
    model = _model()
    rng = rng_stream(7)
    t_i = rng.standard_normal(SMALL_CFG.enc_dim)
    t_i /= np.linalg.norm(t_i)
    params = SurfaceParams(0.4, [0, 0, 1])
    t_p = pim.engine_forward(model.core, t_i, params)
    assert abs(np.linalg.norm(t_p) - 1.0) < 1e-9

    w = rng.standard_normal(SMALL_CFG.enc_dim)
    rho0 = params.as_vector()

    def loss(rho):
        return float(model.core.forward(t_i[None], rho[None])[0] @ w)

    model.core.forward(t_i[None], rho0[None])
    from bouncelab.nnet import zero_grads
    zero_grads(model.core)
    _, d_rho = model.core.backward(w[None])
    numeric = central_diff(loss, rho0.copy())
    assert rel_error(d_rho[0], numeric) < 1e-5


def test_recon_params_clamped_at_inference():
    model = _model()
    rng = rng_stream(8)
    t_i = rng.standard_normal(SMALL_CFG.enc_dim)
    t_o = rng.standard_normal(SMALL_CFG.enc_dim)
    t_i /= np.linalg.norm(t_i)
    t_o /= np.linalg.norm(t_o)
    raw = pim.recon_params(model.recon, t_i, t_o, clamp=False)
    assert raw.shape == (4,)
    est = pim.recon_params(model.recon, t_i, t_o)
    assert 0.0 <= est.cor <= 1.0
    assert abs(np.linalg.norm(est.normal) - 1.0) < 1e-9


def _tiny_dataset(count, seed=901, cor=None):
    cfg = SimConfig(n_points=80, noise_sigma=0.005)
    return [generate_sample(rng_stream(seed, i), cfg, cor=cor) for i in range(count)]


def test_pretrain_decreases_loss_and_is_deterministic():
    samples = _tiny_dataset(48)
    config = pim.PretrainConfig(iterations=60, batch_size=8, lr=0.003,
                                lr_drop_every=0, seed=3)

    model_a = _model(seed=11)
    losses_a = pim.pretrain_pim(model_a, samples, config)
    model_b = _model(seed=11)
    losses_b = pim.pretrain_pim(model_b, samples, config)

    assert losses_a == losses_b
    for pa, pb in zip(model_a.parameters(), model_b.parameters()):
        assert np.array_equal(pa, pb)
    assert np.mean(losses_a[-10:]) < np.mean(losses_a[:10])


def test_pretrain_rejects_bad_batches():
    samples = _tiny_dataset(4)
    with pytest.raises(ValueError):
        pim.pretrain_pim(_model(), [], pim.PretrainConfig(iterations=1))
    with pytest.raises(ValueError):
        pim.pretrain_pim(_model(), samples,
                         pim.PretrainConfig(iterations=1, batch_size=1))
    with pytest.raises(ValueError):
        pim.pretrain_pim(_model(), samples,
                         pim.PretrainConfig(iterations=1, batch_size=32))


def test_decoder_db_identity_retrieval_and_digest():
    model = _model(seed=2)
    db = pim.build_decoder_db(model.enc_o, SIM_CFG, count=30, seed=6)
    assert len(db) == 30
    for idx in [0, 7, 29]:
        res = pim.decode(db.encodings[idx], db)
        assert res.index == idx
        assert abs(res.distance) < 1e-12
    # opposite encoding: farthest from its member, distance reported
    res = pim.decode(-db.encodings[0], db)
    assert res.distance > 0
    assert db.encoder_digest == pim.params_digest(model.enc_o)


def test_decode_empty_db():
    db = pim.DecoderDB(encodings=np.zeros((0, 4)), trajectories=[],
                       rhos=np.zeros((0, 4)), encoder_digest="x")
    with pytest.raises(ValueError):
        pim.decode(np.zeros(4), db)


def test_decode_tie_breaks_to_lowest_index():
    enc = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    db = pim.DecoderDB(encodings=enc, trajectories=["a", "b", "c"],
                       rhos=np.zeros((3, 4)), encoder_digest="x")
    res = pim.decode(np.array([1.0, 0.0]), db)
    assert res.index == 0


def test_decode_matches_brute_force_scan():
    # guards future indexing optimizations: decode must stay an exact argmin
    rng = rng_stream(14)
    enc = rng.standard_normal((50, 8))
    enc /= np.linalg.norm(enc, axis=1, keepdims=True)
    db = pim.DecoderDB(encodings=enc, trajectories=list(range(50)),
                       rhos=np.zeros((50, 4)), encoder_digest="x")
    for _ in range(100):
        q = rng.standard_normal(8)
        q /= np.linalg.norm(q)
        res = pim.decode(q, db)
        brute = min(range(50), key=lambda j: 1.0 - float(enc[j] @ q))
        assert res.index == brute
        assert res.distance == pytest.approx(1.0 - float(enc[brute] @ q), abs=1e-15)


def test_predict_post_world_frame_and_digest_guard():
    model = _model(seed=3)
    db = pim.build_decoder_db(model.enc_o, SIM_CFG, count=25, seed=9)
    s = _sample(10)
    pred = pim.predict_post(model, db, s.pre, s.params,
                            impact_time=s.impact_time, impact_point=s.impact_point)
    got = pred.trajectory
    # de-canonicalized: times restart near the impact time
    assert got.times[0] > pred.impact_time
    assert got.points.shape[1:] == (SIM_CFG.n_points, 3)

    other = _model(seed=4)
    with pytest.raises(ValueError, match="rebuild"):
        pim.predict_post(other, db, s.pre, s.params,
                         impact_time=s.impact_time, impact_point=s.impact_point)


def test_predict_post_estimates_impact_when_missing():
    from bouncelab.sim import sample_bounce_config, simulate_bounce, render_trajectory
    model = _model(seed=5)
    db = pim.build_decoder_db(model.enc_o, SIM_CFG, count=20, seed=10)
    rng = rng_stream(903, 0)
    init, plane, params = sample_bounce_config(rng, SIM_CFG)
    pre_path, post_path, record = simulate_bounce(init, plane, params, SIM_CFG)
    pre = render_trajectory(pre_path, SIM_CFG, rng)
    pred = pim.predict_post(model, db, pre, params, plane=plane)
    assert abs(pred.impact_time - record.time) < 1e-6
    assert np.linalg.norm(pred.impact_point - record.point) < 1e-5


def test_fibonacci_hemisphere_properties():
    axis = np.array([1.0, -1.0, 0.5])
    pts = pim.fibonacci_hemisphere(200, axis)
    norms = np.linalg.norm(pts, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12
    axis = axis / np.linalg.norm(axis)
    assert np.all(pts @ axis > 0)
    # down-axis hemisphere mirrors cleanly
    down = pim.fibonacci_hemisphere(50, [0, 0, -1.0])
    assert np.all(down[:, 2] < 0)


def test_invert_params_tie_break_and_determinism():
    # constant-output core: every grid point ties, lowest index must win
    class ConstCore:
        def forward(self, t_i, rho):
            out = np.zeros((rho.shape[0], 4))
            out[:, 0] = 1.0
            return out

    model = SimpleNamespace(core=ConstCore())
    grid = pim.GridSpec(cor_steps=5, n_normals=16, refine=False)
    t_o = np.array([1.0, 0, 0, 0])
    params, dist = pim.invert_params(model, np.zeros(4), t_o, grid)
    assert params.cor == 0.0  # first grid row
    first_normal = pim.fibonacci_hemisphere(16)[0]
    assert np.allclose(params.normal, first_normal, atol=1e-12)
    assert dist == pytest.approx(0.0, abs=1e-12)

    model2 = _model(seed=6)
    rng = rng_stream(12)
    t_i = rng.standard_normal(SMALL_CFG.enc_dim)
    t_i /= np.linalg.norm(t_i)
    t_o = rng.standard_normal(SMALL_CFG.enc_dim)
    t_o /= np.linalg.norm(t_o)
    grid = pim.GridSpec(cor_steps=6, n_normals=40)
    p1, d1 = pim.invert_params(model2, t_i, t_o, grid)
    p2, d2 = pim.invert_params(model2, t_i, t_o, grid)
    assert p1.cor == p2.cor and np.array_equal(p1.normal, p2.normal) and d1 == d2


def test_build_db_validates_count():
    model = _model()
    with pytest.raises(ValueError):
        pim.build_decoder_db(model.enc_o, SIM_CFG, count=0)
