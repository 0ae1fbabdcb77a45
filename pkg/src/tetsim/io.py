"""File formats.

Text clouds are one JSON header line followed by whitespace-separated rows;
every other structured file is JSON. Trajectories are a JSON header line
followed by a raw little-endian float payload (frame-major, then point, then
xyz). Lengths are meters, times seconds, masses kilograms.
"""
import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geom import TetMesh
from .skinning import Pose, Rig, sparse_to_dense_weights
from .transfer import Embedding, GaussianCloud
from .xpbd import SimState

POINT_FIELDS = ["x", "y", "z"]
GAUSSIAN_FIELDS = ["x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "label"]
UNITS = {"length": "m", "time": "s", "mass": "kg"}


class FormatError(InvalidInputError):
    """Malformed file content."""


def _fmt(x):
    return repr(float(x))


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False, allow_nan=True) + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def _split_header(path):
    """(header dict, remaining lines, first data line number) for header+rows
    text, or (document, None, None) when the whole file is one JSON value."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return json.loads(text), None, None
        except json.JSONDecodeError:
            pass
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line 1: header is not valid JSON ({exc.msg})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: line 1: header must be a JSON object")
    return header, lines[1:], 2


def _parse_rows(path, header, lines, first_line):
    fields = header.get("fields")
    if not isinstance(fields, list) or not fields:
        raise FormatError(f"{path}: header lacks a 'fields' list")
    rows = []
    if lines is None:
        raw = header.get("rows")
        if raw is None:
            raise FormatError(f"{path}: JSON cloud lacks 'rows'")
        for k, r in enumerate(raw):
            if len(r) != len(fields):
                raise FormatError(f"{path}: row {k}: expected {len(fields)} values, got {len(r)}")
            rows.append([str(v) for v in r])
    else:
        for k, line in enumerate(lines):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != len(fields):
                raise FormatError(f"{path}: line {first_line + k}: expected {len(fields)} values, got {len(parts)}")
            rows.append(parts)
    if "count" in header and int(header["count"]) != len(rows):
        raise FormatError(f"{path}: header count {header['count']} but {len(rows)} rows")
    return fields, rows


def _column(path, fields, rows, name, numeric=True):
    j = fields.index(name)
    if not numeric:
        return np.array([r[j] for r in rows], dtype=object)
    try:
        return np.array([float(r[j]) for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: column {name!r}: {exc}") from exc


def read_points(path):
    """Positions (n, 3) and labels (n,) or None."""
    header, lines, first = _split_header(path)
    fields, rows = _parse_rows(path, header, lines, first)
    for f in POINT_FIELDS:
        if f not in fields:
            raise FormatError(f"{path}: missing field {f!r}")
    pos = np.stack([_column(path, fields, rows, f) for f in POINT_FIELDS], axis=1) if rows else np.empty((0, 3))
    labels = _column(path, fields, rows, "label", numeric=False).astype(str) if "label" in fields else None
    if not np.all(np.isfinite(pos)):
        raise FormatError(f"{path}: non-finite coordinates")
    return pos, labels


def _write_table(path, kind, fields, columns, json_form):
    n = len(columns[0]) if columns else 0
    header = {"format": kind, "fields": fields, "count": n, "units": UNITS["length"]}
    rows = [[c[i] for c in columns] for i in range(n)]
    if json_form:
        header["rows"] = rows
        dump_json(header, path)
        return
    out = [json.dumps(header)]
    out.extend(" ".join(v if isinstance(v, str) else _fmt(v) for v in r) for r in rows)
    Path(path).write_text("\n".join(out) + "\n")


def write_points(path, positions, labels=None, json_form=False):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    fields = list(POINT_FIELDS)
    cols = [positions[:, 0].tolist(), positions[:, 1].tolist(), positions[:, 2].tolist()]
    if labels is not None:
        fields.append("label")
        cols.append([str(s) for s in labels])
    _write_table(path, "points", fields, cols, json_form)


def read_gaussians(path):
    header, lines, first = _split_header(path)
    fields, rows = _parse_rows(path, header, lines, first)
    missing = [f for f in GAUSSIAN_FIELDS if f not in fields]
    if missing:
        raise FormatError(f"{path}: missing fields {missing}")
    col = lambda f: _column(path, fields, rows, f)  # noqa: E731
    pos = np.stack([col("x"), col("y"), col("z")], 1)
    rot = np.stack([col("qw"), col("qx"), col("qy"), col("qz")], 1)
    scl = np.stack([col("sx"), col("sy"), col("sz")], 1)
    labels = _column(path, fields, rows, "label", numeric=False).astype(str)
    return GaussianCloud(pos, rot, scl, labels)


def write_gaussians(path, cloud, json_form=False):
    cols = [cloud.positions[:, k].tolist() for k in range(3)]
    cols += [cloud.rotations[:, k].tolist() for k in range(4)]
    cols += [cloud.scales[:, k].tolist() for k in range(3)]
    cols.append([str(s) for s in cloud.labels])
    _write_table(path, "gaussians", list(GAUSSIAN_FIELDS), cols, json_form)


def write_tetmesh(path, mesh, sample_indices=None, metadata=None):
    doc = {"format": "tetmesh", "tets": mesh.tets.tolist(), "edges": mesh.edges.tolist()}
    if sample_indices is not None:
        doc["sample_indices"] = np.asarray(sample_indices).tolist()
    if metadata is not None:
        doc["metadata"] = metadata
    dump_json(doc, path)


def read_tetmesh(path):
    """(TetMesh, sample_indices or None)."""
    doc = load_json(path)
    if "tets" not in doc:
        raise FormatError(f"{path}: missing 'tets'")
    tets = np.asarray(doc["tets"], dtype=np.int64).reshape(-1, 4)
    if "edges" in doc:
        mesh = TetMesh(tets, np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2))
    else:
        mesh = TetMesh.from_tets(tets)
    samples = doc.get("sample_indices")
    return mesh, (None if samples is None else np.asarray(samples, dtype=np.int64))


_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def write_trajectory(path, positions, frame_dt, *, dtype="<f4", json_form=False, metadata=None):
    """Write positions of shape (T, n, 3)."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3:
        positions = positions.reshape(0, 0, 3) if positions.size == 0 else positions.reshape(len(positions), -1, 3)
    T, n = positions.shape[:2]
    header = {"format": "trajectory", "n_points": int(n), "n_frames": int(T), "frame_dt": float(frame_dt),
              "units": UNITS, "dtype": dtype}
    if metadata is not None:
        header["metadata"] = metadata
    if json_form:
        header["positions"] = positions.tolist()
        dump_json(header, path)
        return
    if dtype not in _DTYPES:
        raise InvalidInputError(f"unsupported trajectory dtype {dtype!r}")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(positions, dtype=_DTYPES[dtype]).tobytes())


def read_trajectory(path):
    """(positions (T, n, 3), frame_dt, header)."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError:
        header = None
    if header is None or "positions" in header:
        try:
            header = json.loads(data)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        pos = np.asarray(header["positions"], dtype=np.float64)
        T, n = int(header.get("n_frames", len(pos))), int(header.get("n_points", pos.shape[1] if pos.ndim == 3 else 0))
        pos = pos.reshape(T, n, 3)
        return pos, float(header["frame_dt"]), header
    try:
        T, n, dt = int(header["n_frames"]), int(header["n_points"]), float(header["frame_dt"])
    except KeyError as exc:
        raise FormatError(f"{path}: header lacks {exc}") from exc
    dtype = _DTYPES.get(header.get("dtype", "<f4"))
    if dtype is None:
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    payload = data[nl + 1:]
    expected = T * n * 3 * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    pos = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(T, n, 3)
    return pos, dt, header


def write_state(path, state, frame=0, metadata=None):
    doc = {"format": "state", "frame": int(frame), "positions": state.positions.tolist(),
           "velocities": state.velocities.tolist(), "inverse_masses": state.inverse_masses.tolist(),
           "units": UNITS}
    if metadata is not None:
        doc["metadata"] = metadata
    dump_json(doc, path)


def read_state(path):
    doc = load_json(path)
    try:
        st = SimState(doc["positions"], doc["velocities"], doc["inverse_masses"])
    except KeyError as exc:
        raise FormatError(f"{path}: state lacks {exc}") from exc
    return st, int(doc.get("frame", 0))


def read_rig(path):
    doc = load_json(path)
    try:
        parents = doc["parents"]
        verts = np.asarray(doc["vertices"], dtype=np.float64).reshape(-1, 3)
        J = len(parents)
        if "rest_transforms" in doc:
            rest = np.asarray(doc["rest_transforms"], dtype=np.float64)
        else:
            rest = np.tile(np.eye(4), (J, 1, 1))
            rest[:, :3, 3] = np.asarray(doc["joint_positions"], dtype=np.float64).reshape(J, 3)
        weights = doc["weights"]
    except KeyError as exc:
        raise FormatError(f"{path}: rig lacks {exc}") from exc
    W = sparse_to_dense_weights(weights, J) if len(weights) and isinstance(weights[0][0], list) else np.asarray(weights, float)
    basis = doc.get("shape_basis")
    return Rig(parents, rest, verts, W, None if basis is None else np.asarray(basis, float),
               np.asarray(doc.get("markers", []), dtype=np.int64), tuple(doc.get("joints", ())))


def write_rig(path, rig):
    W = rig.skin_weights
    sparse = [[[int(j), float(W[v, j])] for j in np.flatnonzero(W[v])] for v in range(len(W))]
    doc = {"joints": list(rig.joint_names), "parents": rig.parents.tolist(),
           "rest_transforms": rig.rest_transforms.tolist(), "vertices": rig.rest_vertices.tolist(),
           "weights": sparse, "markers": rig.marker_vertices.tolist()}
    if rig.shape_basis is not None:
        doc["shape_basis"] = rig.shape_basis.tolist()
    dump_json(doc, path)


def pose_to_dict(pose):
    return {"rotations": pose.rotations.tolist(), "translation": pose.translation.tolist()}


def read_poses(path):
    """(list of Pose, shape or None)."""
    doc = load_json(path)
    items = doc["poses"] if isinstance(doc, dict) else doc
    poses = [Pose(p["rotations"], p.get("translation")) for p in items]
    shape = doc.get("shape") if isinstance(doc, dict) else None
    return poses, (None if shape is None else np.asarray(shape, float))


def write_poses(path, poses, shape=None, metadata=None, extra=None):
    doc = {"format": "poses", "poses": [pose_to_dict(p) for p in poses]}
    if shape is not None:
        doc["shape"] = np.asarray(shape).tolist()
    if extra:
        doc.update(extra)
    if metadata is not None:
        doc["metadata"] = metadata
    dump_json(doc, path)


def read_cameras(path):
    from .posefit import Camera

    doc = load_json(path)
    items = doc["cameras"] if isinstance(doc, dict) else doc
    return [Camera.from_dict(c) for c in items]


def write_cameras(path, cameras):
    dump_json([c.to_dict() for c in cameras], path)


def read_mask(path):
    from PIL import Image

    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def write_mask(path, mask):
    from PIL import Image

    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def read_keypoints(path):
    """Per-frame keypoint sets: ``{"frames": [{"targets": [...], "valid": [...]}|null, ...]}``."""
    from .posefit import KeypointSet

    doc = load_json(path)
    frames = doc["frames"] if isinstance(doc, dict) else doc
    return [None if f is None else KeypointSet(f["targets"], f.get("valid")) for f in frames]


def write_embedding(path, emb, metadata=None):
    doc = {"format": "embedding", "point_indices": emb.point_indices.tolist(), "kind": emb.kind.tolist(),
           "tet": emb.tet.tolist(), "bary": emb.bary.tolist(), "face": emb.face.tolist(),
           "offset": emb.offset.tolist(), "normal_sign": emb.normal_sign.tolist()}
    if metadata is not None:
        doc["metadata"] = metadata
    dump_json(doc, path)


def read_embedding(path):
    doc = load_json(path)
    try:
        return Embedding(
            np.asarray(doc["point_indices"], np.int64), np.asarray(doc["kind"], np.int64),
            np.asarray(doc["tet"], np.int64), np.asarray(doc["bary"], float).reshape(-1, 4),
            np.asarray(doc["face"], np.int64).reshape(-1, 3), np.asarray(doc["offset"], float),
            np.asarray(doc["normal_sign"], float),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: embedding lacks {exc}") from exc


def write_loss_csv(path, rows, columns):
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_csv_value(v) for v in r))
    Path(path).write_text("\n".join(lines) + "\n")


def _csv_value(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)
