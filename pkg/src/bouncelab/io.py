"""File formats: datasets (jsonl / BNC1), models (BLM1), decoder databases
(BDB1), field snapshots (BFD1), scenes (json), and run manifests.

All binary formats are little-endian, length-prefixed, and versioned; point
data is stored as f32, every other number as f64, so dataset round trips are
exact up to f32 quantization of the points and models/fields round-trip
bitwise.
"""

import dataclasses
import hashlib
import io as _io
import json
import struct
from dataclasses import asdict

import numpy as np

from .core import SurfaceParams
from .field import SceneSpec, SurfaceField
from .pim import DecoderDB, PimConfig, PimModel
from .sim import BounceSample, Trajectory

FORMAT_VERSION = 1
_MAGIC_DATASET = b"BNC1"
_MAGIC_MODEL = b"BLM1"
_MAGIC_DB = b"BDB1"
_MAGIC_FIELD = b"BFD1"

_DTYPE_CODES = {0: "<f8", 1: "<f4", 2: "<i8"}
_DTYPE_BY_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}


class FileFormatError(RuntimeError):
    pass


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise FileFormatError("truncated file")
    return data


def _write_blob(f, data):
    f.write(struct.pack("<Q", len(data)))
    f.write(data)


def _read_blob(f):
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return _read_exact(f, n)


def _write_json(f, obj):
    _write_blob(f, json.dumps(obj, sort_keys=True).encode("utf-8"))


def _read_json(f):
    return json.loads(_read_blob(f).decode("utf-8"))


def _write_array(f, arr):
    arr = np.asarray(arr)
    code = _DTYPE_BY_KIND.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported array dtype {arr.dtype}")
    f.write(struct.pack("<BB", code, arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(np.ascontiguousarray(arr).tobytes())


def _read_array(f):
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPE_CODES:
        raise FileFormatError(f"unknown dtype code {code}")
    shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim))
    dtype = np.dtype(_DTYPE_CODES[code])
    data = _read_exact(f, dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def _check_header(f, magic):
    got = f.read(4)
    if got != magic:
        raise FileFormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported schema version {version}")


def _write_header(f, magic):
    f.write(magic)
    f.write(struct.pack("<I", FORMAT_VERSION))


# ---------------------------------------------------------------- datasets

def _sample_to_record(sample):
    rec = {
        "scene_id": sample.scene_id,
        "cell": None if sample.cell is None else [int(sample.cell[0]), int(sample.cell[1])],
        "rho": {"cor": sample.params.cor, "normal": sample.params.normal.tolist()},
        "impact": {"t": float(sample.impact_time),
                   "point": np.asarray(sample.impact_point, dtype=np.float64).tolist()},
        "pre": [[float(t), np.asarray(p, dtype=np.float64).tolist()]
                for t, p in zip(sample.pre.times, sample.pre.points)],
        "post": [[float(t), np.asarray(p, dtype=np.float64).tolist()]
                 for t, p in zip(sample.post.times, sample.post.points)],
    }
    centers = {}
    if sample.pre.true_centers is not None:
        centers["pre"] = sample.pre.true_centers.tolist()
    if sample.post.true_centers is not None:
        centers["post"] = sample.post.true_centers.tolist()
    if centers:
        rec["true_centers"] = centers
    return rec


def _record_to_sample(rec):
    def traj(records, centers):
        times = np.array([t for t, _ in records])
        points = np.array([p for _, p in records])
        return Trajectory(times=times, points=points,
                          true_centers=None if centers is None else np.array(centers))

    centers = rec.get("true_centers", {})
    cell = rec.get("cell")
    return BounceSample(
        pre=traj(rec["pre"], centers.get("pre")),
        post=traj(rec["post"], centers.get("post")),
        params=SurfaceParams(cor=rec["rho"]["cor"], normal=np.array(rec["rho"]["normal"])),
        impact_time=rec["impact"]["t"],
        impact_point=np.array(rec["impact"]["point"]),
        scene_id=rec.get("scene_id"),
        cell=None if cell is None else (int(cell[0]), int(cell[1])),
    )


def _dataset_header(samples, config, seed):
    header = {"count": len(samples), "seed": seed}
    if config is not None:
        echo = asdict(config) if dataclasses.is_dataclass(config) else dict(config)
        echo = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in echo.items()}
        header["config"] = echo
    return header


def write_dataset(path, samples, fmt="jsonl", config=None, seed=None):
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"header": _dataset_header(samples, config, seed)},
                               sort_keys=True) + "\n")
            for sample in samples:
                f.write(json.dumps(_sample_to_record(sample), sort_keys=True) + "\n")
    elif fmt == "bin":
        with open(path, "wb") as f:
            _write_header(f, _MAGIC_DATASET)
            _write_json(f, _dataset_header(samples, config, seed))
            for sample in samples:
                buf = _io.BytesIO()
                _write_json(buf, {"scene_id": sample.scene_id,
                                  "cell": None if sample.cell is None else list(sample.cell)})
                _write_array(buf, sample.params.as_vector())
                _write_array(buf, np.array([sample.impact_time]))
                _write_array(buf, np.asarray(sample.impact_point, dtype=np.float64))
                for traj in (sample.pre, sample.post):
                    _write_array(buf, traj.times)
                    has_centers = traj.true_centers is not None
                    buf.write(struct.pack("<B", 1 if has_centers else 0))
                    if has_centers:
                        _write_array(buf, traj.true_centers)
                    _write_array(buf, np.asarray(traj.points, dtype=np.float32))
                _write_blob(f, buf.getvalue())
    else:
        raise ValueError(f"unknown dataset format {fmt!r} (expected jsonl or bin)")


def read_dataset(path):
    """Load a dataset file in either format (sniffed from the first bytes).
    Returns (samples, header)."""
    with open(path, "rb") as probe:
        magic = probe.read(4)
    if magic == _MAGIC_DATASET:
        samples = []
        with open(path, "rb") as f:
            _check_header(f, _MAGIC_DATASET)
            header = _read_json(f)
            for _ in range(header["count"]):
                rec = _io.BytesIO(_read_blob(f))
                meta = _read_json(rec)
                rho = _read_array(rec)
                impact_time = float(_read_array(rec)[0])
                impact_point = _read_array(rec)
                trajs = []
                for _side in range(2):
                    times = _read_array(rec)
                    (has_centers,) = struct.unpack("<B", _read_exact(rec, 1))
                    centers = _read_array(rec) if has_centers else None
                    points = _read_array(rec)
                    trajs.append(Trajectory(times=times, points=points,
                                            true_centers=centers))
                cell = meta.get("cell")
                samples.append(BounceSample(
                    pre=trajs[0], post=trajs[1],
                    params=SurfaceParams.from_vector(rho),
                    impact_time=impact_time, impact_point=impact_point,
                    scene_id=meta.get("scene_id"),
                    cell=None if cell is None else (int(cell[0]), int(cell[1])),
                ))
        return samples, header
    # jsonl
    samples = []
    header = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            first = f.readline()
            if not first:
                raise FileFormatError("empty dataset file")
            head = json.loads(first)
            if "header" in head:
                header = head["header"]
            else:
                samples.append(_record_to_sample(head))
            for line in f:
                if line.strip():
                    samples.append(_record_to_sample(json.loads(line)))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(
            f"bad magic {magic!r}: neither a BNC1 file nor jsonl ({exc})") from exc
    if "count" in header and header["count"] != len(samples):
        raise FileFormatError(
            f"record count mismatch: header says {header['count']}, found {len(samples)}")
    return samples, header


# ------------------------------------------------------------------ models

def write_model(path, model):
    with open(path, "wb") as f:
        _write_header(f, _MAGIC_MODEL)
        _write_json(f, {"config": asdict(model.cfg)})
        sections = model.sections()
        _write_json(f, {"sections": list(sections)})
        for name, module in sections.items():
            params = module.parameters()
            _write_json(f, {"name": name, "params": len(params)})
            for p in params:
                _write_array(f, np.asarray(p, dtype=np.float64))


def read_model(path):
    with open(path, "rb") as f:
        _check_header(f, _MAGIC_MODEL)
        cfg = PimConfig(**_read_json(f)["config"])
        model = PimModel.create(cfg, seed=0)
        names = _read_json(f)["sections"]
        sections = model.sections()
        if names != list(sections):
            raise FileFormatError(f"unexpected section list {names}")
        for name in names:
            meta = _read_json(f)
            params = sections[meta["name"]].parameters()
            if meta["params"] != len(params):
                raise FileFormatError(f"parameter count mismatch in section {name}")
            for p in params:
                arr = _read_array(f)
                if arr.shape != p.shape:
                    raise FileFormatError(f"shape mismatch in section {name}")
                np.copyto(p, arr)
    return model


# --------------------------------------------------------------- databases

def write_decoder_db(path, db):
    with open(path, "wb") as f:
        _write_header(f, _MAGIC_DB)
        _write_json(f, {"count": len(db), "encoder_digest": db.encoder_digest,
                        "meta": db.meta})
        _write_array(f, db.encodings)
        _write_array(f, db.rhos)
        for traj in db.trajectories:
            buf = _io.BytesIO()
            _write_array(buf, traj.times)
            has_centers = traj.true_centers is not None
            buf.write(struct.pack("<B", 1 if has_centers else 0))
            if has_centers:
                _write_array(buf, traj.true_centers)
            _write_array(buf, np.asarray(traj.points, dtype=np.float32))
            _write_blob(f, buf.getvalue())


def read_decoder_db(path):
    with open(path, "rb") as f:
        _check_header(f, _MAGIC_DB)
        header = _read_json(f)
        encodings = _read_array(f)
        rhos = _read_array(f)
        trajectories = []
        for _ in range(header["count"]):
            rec = _io.BytesIO(_read_blob(f))
            times = _read_array(rec)
            (has_centers,) = struct.unpack("<B", _read_exact(rec, 1))
            centers = _read_array(rec) if has_centers else None
            points = _read_array(rec)
            trajectories.append(Trajectory(times=times, points=points,
                                           true_centers=centers))
    return DecoderDB(encodings=encodings, trajectories=trajectories, rhos=rhos,
                     encoder_digest=header["encoder_digest"], meta=header["meta"])


# ------------------------------------------------------------------ fields

def write_field(path, field, meta=None):
    with open(path, "wb") as f:
        _write_header(f, _MAGIC_FIELD)
        _write_json(f, {"meta": meta or {}})
        _write_array(f, field.raw)


def read_field(path):
    with open(path, "rb") as f:
        _check_header(f, _MAGIC_FIELD)
        meta = _read_json(f)["meta"]
        raw = _read_array(f)
    return SurfaceField(raw=raw), meta


# ------------------------------------------------------------------ scenes

def write_scene(path, scene):
    payload = {"cors": scene.cors.tolist(), "normals": scene.normals.tolist(),
               "cell_size": scene.cell_size, "scene_id": scene.scene_id}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def read_scene(path):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return SceneSpec(cors=np.array(payload["cors"]),
                     normals=np.array(payload["normals"]),
                     cell_size=payload["cell_size"],
                     scene_id=payload.get("scene_id", 0))


# --------------------------------------------------------------- manifests

def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, seed, config, inputs=(), outputs=()):
    """Reproducibility sidecar for a CLI run: the seed, the fully resolved
    configuration, and content hashes of every input and output."""
    config = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
              for k, v in dict(config).items()}
    config_text = json.dumps(config, sort_keys=True)
    manifest = {
        "seed": seed,
        "config": config,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return path
