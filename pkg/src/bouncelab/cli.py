"""Command-line interface.

Subcommands cover the full pipeline: dataset generation (random planes or
scene-targeted), model pretraining, decoder-database construction, field
training (batch and online), forward prediction under parameter-substitution
conditions, parameter inversion, and evaluation. Every run is seeded and
writes a manifest with content hashes of its inputs and outputs.
"""

import argparse
import dataclasses
import json
import sys
import time

import numpy as np

from . import field as fld
from . import fitters, io, metrics, pim
from .config import build_config, echo_config, load_config_file, validate_known_keys
from .core import SurfaceParams, rng_stream
from .field import JointTrainConfig, SurfaceField
from .pim import PimConfig, PretrainConfig
from .sim import PlanePatch, SimConfig, Trajectory, generate_sample


def _load_overrides(path):
    if path is None:
        return {}
    overrides = load_config_file(path)
    validate_known_keys(overrides)
    return overrides


def _sim_config(args, overrides):
    cfg = build_config(SimConfig, overrides, "sim")
    if getattr(args, "noise_sigma", None) is not None:
        cfg = dataclasses.replace(cfg, noise_sigma=args.noise_sigma)
    return cfg


def cmd_gen(args):
    overrides = _load_overrides(args.config)
    cfg = _sim_config(args, overrides)
    if args.scene:
        scene = io.read_scene(args.scene)
        samples = fld.generate_scene_bounces(scene, args.count, cfg, seed=args.seed)
    else:
        samples = [generate_sample(rng_stream(args.seed, i), cfg)
                   for i in range(args.count)]
    io.write_dataset(args.out, samples, fmt=args.format, config=cfg, seed=args.seed)
    config_echo = echo_config(cfg, "sim")
    inputs = [args.scene] if args.scene else []
    io.write_manifest(args.out, args.seed, config_echo, inputs=inputs, outputs=[args.out])
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_make_scene(args):
    if args.two_region:
        scene = fld.two_region_scene(args.rows, args.cols, cor_left=args.cor_low,
                                     cor_right=args.cor_high, seed=args.seed,
                                     cell_size=args.cell_size,
                                     max_tilt_deg=args.max_tilt)
    else:
        scene = fld.make_scene(args.rows, args.cols, seed=args.seed,
                               cor_low=args.cor_low, cor_high=args.cor_high,
                               cell_size=args.cell_size, max_tilt_deg=args.max_tilt)
    io.write_scene(args.out, scene)
    io.write_manifest(args.out, args.seed,
                      {"rows": args.rows, "cols": args.cols,
                       "cor_low": args.cor_low, "cor_high": args.cor_high,
                       "two_region": args.two_region, "cell_size": args.cell_size,
                       "max_tilt": args.max_tilt},
                      outputs=[args.out])
    print(f"wrote scene {scene.shape} to {args.out}")
    return 0


def cmd_pretrain(args):
    overrides = _load_overrides(args.config)
    model_cfg = build_config(PimConfig, overrides, "model")
    train_cfg = build_config(PretrainConfig, overrides, "pretrain")
    if args.seed is not None:
        train_cfg.seed = args.seed
    samples, _ = io.read_dataset(args.data)
    model = pim.PimModel.create(model_cfg, seed=train_cfg.seed)
    losses = pim.pretrain_pim(model, samples, train_cfg)
    io.write_model(args.out, model)
    losses_path = str(args.out) + ".losses.json"
    with open(losses_path, "w", encoding="utf-8") as f:
        json.dump(losses, f)
    config_echo = {**echo_config(model_cfg, "model"), **echo_config(train_cfg, "pretrain")}
    io.write_manifest(args.out, train_cfg.seed, config_echo,
                      inputs=[args.data], outputs=[args.out, losses_path])
    print(f"pretrained on {len(samples)} samples for {len(losses)} iterations; "
          f"loss {losses[0]:.4f} -> {np.mean(losses[-50:]):.4f}; wrote {args.out}")
    return 0


def cmd_build_db(args):
    overrides = _load_overrides(args.config)
    sim_cfg = build_config(SimConfig, overrides, "sim")
    model = io.read_model(args.model)
    db = pim.build_decoder_db(model.enc_o, sim_cfg, count=args.count, seed=args.seed)
    io.write_decoder_db(args.out, db)
    io.write_manifest(args.out, args.seed,
                      {**echo_config(sim_cfg, "sim"), "db.count": args.count},
                      inputs=[args.model], outputs=[args.out])
    print(f"indexed {len(db)} post trajectories into {args.out}")
    return 0


def cmd_train_field(args):
    overrides = _load_overrides(args.config)
    joint_cfg = build_config(JointTrainConfig, overrides, "joint")
    joint_cfg.regime = args.regime
    if args.smoothness is not None:
        joint_cfg.smoothness = args.smoothness
    if args.seed is not None:
        joint_cfg.seed = args.seed
    if args.iterations is not None:
        joint_cfg.iterations = args.iterations
    scene = io.read_scene(args.scene)
    samples, _ = io.read_dataset(args.data)
    model = io.read_model(args.model)
    surface = SurfaceField.create(scene.shape)
    losses = fld.train_joint(surface, model, samples, joint_cfg)
    io.write_field(args.out, surface, meta={"scene_shape": list(scene.shape),
                                            "cell_size": scene.cell_size})
    outputs = [args.out]
    if args.out_model:
        io.write_model(args.out_model, model)
        outputs.append(args.out_model)
    io.write_manifest(args.out, joint_cfg.seed, echo_config(joint_cfg, "joint"),
                      inputs=[args.scene, args.data, args.model], outputs=outputs)
    print(f"trained field on {len(samples)} bounces ({args.regime}); "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; wrote {args.out}")
    return 0


def cmd_online(args):
    scene = io.read_scene(args.scene)
    stream, _ = io.read_dataset(args.stream)
    model = io.read_model(args.model)
    surface = SurfaceField.create(scene.shape)
    snapshots = fld.online_update(surface, model, stream, lr=args.lr,
                                  max_steps=args.max_steps)
    outputs = []
    for k, snap in enumerate(snapshots):
        path = f"{args.out}.{k:04d}"
        io.write_field(path, snap, meta={"after_bounces": k + 1})
        outputs.append(path)
    io.write_field(args.out, snapshots[-1],
                   meta={"after_bounces": len(snapshots), "final": True})
    outputs.append(args.out)
    io.write_manifest(args.out, 0, {"online.lr": args.lr,
                                    "online.max_steps": args.max_steps},
                      inputs=[args.scene, args.stream, args.model], outputs=outputs)
    print(f"online updates over {len(stream)} bounces; wrote {len(outputs)} field files")
    return 0


def _predict_conditions(args):
    if args.params == "field":
        return [("field", "field")]
    if args.params == "estimated":
        return [("estimated", "estimated")]
    return [("true", "true"), ("estimated", "true"),
            ("true", "estimated"), ("estimated", "estimated")]


def _frame10_center(trajectory, radius):
    return fitters.ransac_sphere(np.asarray(trajectory.points[-1], dtype=np.float64),
                                 radius)


def cmd_predict(args):
    overrides = _load_overrides(args.config)
    sim_cfg = build_config(SimConfig, overrides, "sim")
    model = io.read_model(args.model)
    db = io.read_decoder_db(args.db)
    samples, _ = io.read_dataset(args.sample)
    surface = scene = None
    if args.params == "field":
        if not args.field or not args.scene:
            raise SystemExit("--params field needs --field and --scene")
        surface, _ = io.read_field(args.field)
        scene = io.read_scene(args.scene)

    rows = []
    for index, sample in enumerate(samples):
        impact_time, impact_point = sample.impact_time, sample.impact_point
        if args.estimate_impact:
            patch = PlanePatch(point=sample.impact_point, normal=sample.params.normal,
                               extent=sim_cfg.patch_extent)
            impact_time, impact_point, _ = fitters.estimate_impact(
                sample.pre, patch, sim_cfg.ball_radius)
        est_normal = est_cor = None
        if args.params in ("true", "estimated"):
            try:
                est_normal = fitters.sensor_normal(sample, radius=sim_cfg.ball_radius)
                est_cor = fitters.sensor_cor(sample, est_normal, radius=sim_cfg.ball_radius)
            except (ValueError, ZeroDivisionError):
                pass
        for normal_src, cor_src in _predict_conditions(args):
            if normal_src == "field":
                cell = sample.cell
                if cell is None:
                    cell = fld.locate_impact_cell(
                        np.asarray(sample.pre.points[-1], dtype=np.float64), scene)
                params = surface.readout(*cell)
                condition = "field"
            else:
                normal = sample.params.normal if normal_src == "true" else est_normal
                cor = sample.params.cor if cor_src == "true" else est_cor
                if normal is None or cor is None:
                    continue
                params = SurfaceParams(cor=float(np.clip(cor, 0, 1)), normal=normal)
                condition = f"{normal_src}-normal+{cor_src}-cor"
            pred = pim.predict_post(model, db, sample.pre, params,
                                    impact_time=impact_time, impact_point=impact_point)
            center = _frame10_center(pred.trajectory, sim_cfg.ball_radius)
            rows.append({
                "index": index,
                "condition": condition,
                "pred_center": center.tolist(),
                "cor_used": params.cor,
                "normal_used": params.normal.tolist(),
                "est_cor": est_cor,
                "est_normal": None if est_normal is None else est_normal.tolist(),
                "impact_time": float(impact_time),
            })
    with open(args.out, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    io.write_manifest(args.out, 0,
                      {**echo_config(sim_cfg, "sim"), "params": args.params,
                       "estimate_impact": args.estimate_impact},
                      inputs=[p for p in (args.model, args.db, args.sample,
                                          args.field, args.scene) if p],
                      outputs=[args.out])
    print(f"wrote {len(rows)} prediction rows to {args.out}")
    return 0


def _load_trajectory_json(path):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    frames = payload["frames"] if isinstance(payload, dict) else payload
    times = np.array([t for t, _ in frames])
    points = np.array([p for _, p in frames])
    return Trajectory(times=times, points=points)


def cmd_invert(args):
    model = io.read_model(args.model)
    if args.data is not None:
        samples, _ = io.read_dataset(args.data)
        sample = samples[args.index]
        pre = pim.canonicalize(sample.pre, sample.impact_point, sample.impact_time)
        post = pim.canonicalize(sample.post, sample.impact_point, sample.impact_time)
    else:
        if not (args.pre and args.post):
            raise SystemExit("invert needs either --data/--index or --pre and --post")
        pre = _load_trajectory_json(args.pre)
        post = _load_trajectory_json(args.post)
    t_i = pim.encode(model.enc_i, pre)
    t_o = pim.encode(model.enc_o, post)
    # orient the normal search hemisphere against the approach direction
    centers = np.stack([np.asarray(f, dtype=np.float64).mean(axis=0) for f in pre.points])
    approach = centers[-1] - centers[0]
    axis = tuple(-approach) if np.linalg.norm(approach) > 1e-9 else (0.0, 0.0, 1.0)
    params, distance = pim.invert_params(model, t_i, t_o, pim.GridSpec(axis=axis))
    result = {"cor": params.cor, "normal": params.normal.tolist(), "distance": distance}
    print(json.dumps(result, sort_keys=True))
    return 0


def _eval_one_condition(rows, samples, condition, config, started):
    selected = [row for row in rows if row["condition"] == condition]
    if not selected:
        raise SystemExit(f"no prediction rows for condition {condition!r}")
    pred_centers, true_centers = [], []
    pred_normals, true_normals, pred_cors, true_cors = [], [], [], []
    for row in selected:
        sample = samples[row["index"]]
        if sample.post.true_centers is None:
            raise SystemExit("truth dataset carries no ground-truth centers")
        pred_centers.append(row["pred_center"])
        true_centers.append(sample.post.true_centers[-1])
        if row.get("est_normal") is not None:
            pred_normals.append(row["est_normal"])
            true_normals.append(sample.params.normal)
        if row.get("est_cor") is not None:
            pred_cors.append(np.clip(row["est_cor"], 0.0, 1.0))
            true_cors.append(sample.params.cor)
    return metrics.build_report(
        np.array(pred_centers), np.array(true_centers),
        pred_normals=np.array(pred_normals) if pred_normals else None,
        ref_normals=np.array(true_normals) if true_normals else None,
        pred_cors=np.array(pred_cors) if pred_cors else None,
        ref_cors=np.array(true_cors) if true_cors else None,
        condition=condition, config=config, started=started)


def cmd_eval(args):
    started = time.time()
    samples, header = io.read_dataset(args.truth)
    rows = []
    with open(args.pred, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    config = {"pred": args.pred, "truth": args.truth, "truth_header": header,
              "subst_normal": args.subst_normal, "subst_cor": args.subst_cor}
    if args.condition == "all":
        conditions = sorted({row["condition"] for row in rows})
        reports = {c: _eval_one_condition(rows, samples, c, config, started)
                   for c in conditions}
        payload = {"conditions": {c: r.to_dict() for c, r in reports.items()}}
        text = json.dumps(payload, sort_keys=True, indent=1)
    else:
        condition = args.condition or f"{args.subst_normal}-normal+{args.subst_cor}-cor"
        text = _eval_one_condition(rows, samples, condition, config, started).to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        io.write_manifest(args.report, 0, config,
                          inputs=[args.pred, args.truth], outputs=[args.report])
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bouncelab",
        description="Bounce simulation, restitution learning, and surface field estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic bounce dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["jsonl", "bin"], default="jsonl")
    p.add_argument("--config", default=None)
    p.add_argument("--scene", default=None,
                   help="target bounces at this scene's cells instead of random planes")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("make-scene", help="write a synthetic scene specification")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--two-region", action="store_true")
    p.add_argument("--cor-low", type=float, default=0.2)
    p.add_argument("--cor-high", type=float, default=0.8)
    p.add_argument("--cell-size", type=float, default=0.25)
    p.add_argument("--max-tilt", type=float, default=12.0)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("pretrain-pim", help="pretrain the bounce model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("build-db", help="build the nearest-neighbor decoder database")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("train-field", help="train a surface parameter field on located bounces")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--regime", choices=["frozen", "all", "core-only"], default="core-only")
    p.add_argument("--lambda", dest="smoothness", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--out-model", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_field)

    p = sub.add_parser("online", help="update a field online from a bounce stream")
    p.add_argument("--scene", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--max-steps", type=int, default=2000)
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("predict", help="predict post-bounce trajectories")
    p.add_argument("--model", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--sample", required=True, help="dataset file of bounces to predict")
    p.add_argument("--params", choices=["true", "field", "estimated"], default="true")
    p.add_argument("--field", default=None)
    p.add_argument("--scene", default=None)
    p.add_argument("--estimate-impact", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("invert", help="recover surface parameters from a bounce")
    p.add_argument("--model", required=True)
    p.add_argument("--pre", default=None, help="canonical pre trajectory json")
    p.add_argument("--post", default=None, help="canonical post trajectory json")
    p.add_argument("--data", default=None, help="dataset file (with --index)")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--subst-normal", choices=["true", "estimated"], default="true")
    p.add_argument("--subst-cor", choices=["true", "estimated"], default="true")
    p.add_argument("--condition", default=None,
                   help="evaluate a named condition (e.g. field), or 'all' for "
                        "every condition present in the predictions")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
