"""Scene files, point-cloud PLY files, images and report persistence.

Scene file (JSON, ``"schema": "electricsight.scene"``, ``"version": 1``)::

    {
      "schema": "electricsight.scene", "version": 1,
      "camera": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
      "extrinsics": {"rotation": [[3x3]], "translation": [3]},      # optional
      "correspondences": [{"pixel": [u, v], "point": [x, y, z], "weight": 1.0}],
      "point_cloud": {"path": "env.ply"}  or  {"points": [[x, y, z], ...],
                                              "intensity": [...]}  (optional),
      "power_lines": [[[x, y, z], ...], ...],
      "detections": [{"id": "h0", "class": "crane", "box": [u0, v0, u1, v1],
                      "parent": null}],
      "image": {"path": "frame.png"},                                # optional
      "ground_truth": "scene.gt.json"                                # optional
    }

Relative paths resolve against the scene file's directory.  Errors name the
offending field path (``SchemaError.field``).

PLY files are ``binary_little_endian 1.0`` with one ``vertex`` element whose
properties are, in this order: ``float x``, ``float y``, ``float z`` (IEEE
float32), optionally ``float intensity``, optionally ``uchar red``,
``uchar green``, ``uchar blue``.  Records are packed without padding.
"""
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .cloud import PointCloud
from .errors import SchemaError
from .geometry import CameraModel, Polyline3, RigidTransform
from .keypoints import BoundingBox

SCENE_SCHEMA = "electricsight.scene"
GT_SCHEMA = "electricsight.ground_truth"
REPORT_SCHEMA = "electricsight.report"
SUMMARY_SCHEMA = "electricsight.eval_summary"
MANIFEST_SCHEMA = "electricsight.manifest"
SCHEMA_VERSION = 1

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


# JSON --------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj):
    """Deterministic JSON: sorted keys, fixed indent, non-finite as null."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})", "") from exc


# PLY ---------------------------------------------------------------------

def write_ply(path, cloud):
    """Write ``cloud`` as binary little-endian PLY (float32 coordinates)."""
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    props = ["float x", "float y", "float z"]
    if cloud.intensity is not None:
        fields.append(("intensity", "<f4"))
        props.append("float intensity")
    if cloud.rgb is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        props += ["uchar red", "uchar green", "uchar blue"]
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.xyz.T
    if cloud.intensity is not None:
        rec["intensity"] = cloud.intensity
    if cloud.rgb is not None:
        rgb = np.asarray(cloud.rgb)
        if rgb.dtype != np.uint8:
            rgb = np.clip(np.round(rgb * 255.0 if rgb.max(initial=0) <= 1.0 else rgb), 0, 255)
        rec["red"], rec["green"], rec["blue"] = rgb.astype(np.uint8).T
    header = ["ply", "format binary_little_endian 1.0", "comment electricsight point cloud",
              f"element vertex {len(cloud)}"] + [f"property {p}" for p in props] + ["end_header"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    return path


def read_ply(path, field="point_cloud.path"):
    """Read a binary little-endian PLY written by :func:`write_ply` (or compatible)."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"point cloud file not found: {path}", field)
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise SchemaError(f"{path}: not a PLY file", field)
        count, fields, fmt, in_vertex = None, [], None, False
        while True:
            line = fh.readline()
            if not line:
                raise SchemaError(f"{path}: truncated header", field)
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    count = int(tok[2])
                elif count is None:
                    raise SchemaError(f"{path}: vertex must be the first element", field)
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                    raise SchemaError(f"{path}: unsupported property {' '.join(tok[1:])}",
                                      field)
                fields.append((tok[2], _PLY_TYPES[tok[1]]))
        if fmt != "binary_little_endian":
            raise SchemaError(f"{path}: only binary_little_endian PLY is supported", field)
        names = [f[0] for f in fields]
        if names[:3] != ["x", "y", "z"]:
            raise SchemaError(f"{path}: first vertex properties must be x, y, z", field)
        dtype = np.dtype(fields)
        data = fh.read(dtype.itemsize * count)
    if len(data) != dtype.itemsize * count:
        raise SchemaError(f"{path}: expected {count} vertices, file is short", field)
    rec = np.frombuffer(data, dtype=dtype, count=count)
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    intensity = rec["intensity"].astype(np.float64) if "intensity" in names else None
    rgb = None
    if all(c in names for c in ("red", "green", "blue")):
        rgb = np.column_stack([rec["red"], rec["green"], rec["blue"]]).astype(np.uint8)
    return PointCloud(xyz, intensity=intensity, rgb=rgb)


# images --------------------------------------------------------------------

def write_image(path, image):
    """Save a ``[0, 1]`` grayscale array as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")
    return path


def read_image(path, field="image.path"):
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"image file not found: {path}", field)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


# scene files ----------------------------------------------------------------

class SceneData:
    """Parsed scene file; large payloads are loaded on first access."""

    def __init__(self, path, raw, camera, extrinsics, correspondences, power_lines,
                 detections, cloud_path=None, cloud=None, image_path=None,
                 ground_truth_path=None):
        self.path = Path(path) if path is not None else None
        self.raw = raw
        self.camera = camera
        self.extrinsics = extrinsics
        self.correspondences = correspondences
        self.power_lines = power_lines
        self.detections = detections
        self.cloud_path = cloud_path
        self._cloud = cloud
        self.image_path = image_path
        self.ground_truth_path = ground_truth_path

    @property
    def cloud(self):
        if self._cloud is None and self.cloud_path is not None:
            self._cloud = read_ply(self.cloud_path)
        return self._cloud

    def image(self):
        return None if self.image_path is None else read_image(self.image_path)

    def ground_truth(self):
        return None if self.ground_truth_path is None else load_ground_truth(
            self.ground_truth_path)


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing required field {where}{key}", f"{where}{key}")
    return obj[key]


def _array(value, shape, field):
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{field}: expected numbers", field) from exc
    if shape is not None and (a.ndim != len(shape) or any(
            s is not None and s != n for s, n in zip(shape, a.shape))):
        raise SchemaError(f"{field}: expected shape {shape}, got {a.shape}", field)
    if not np.all(np.isfinite(a)):
        raise SchemaError(f"{field}: non-finite value", field)
    return a


def _resolve(base, value, field, must_exist=True):
    if not isinstance(value, str):
        raise SchemaError(f"{field}: expected a path string", field)
    p = Path(value)
    if not p.is_absolute() and base is not None:
        p = base / p
    if must_exist and not p.exists():
        raise SchemaError(f"{field}: file not found: {p}", field)
    return p


def parse_camera(d, field="camera"):
    if not isinstance(d, dict):
        raise SchemaError(f"{field}: expected an object", field)
    vals = {}
    for k in ("fx", "fy", "cx", "cy", "width", "height"):
        v = _require(d, k, f"{field}.")
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(f"{field}.{k}: expected a number", f"{field}.{k}")
        vals[k] = v
    try:
        return CameraModel(vals["fx"], vals["fy"], vals["cx"], vals["cy"],
                           int(vals["width"]), int(vals["height"]))
    except ValueError as exc:
        raise SchemaError(f"{field}: {exc}", field) from exc


def parse_extrinsics(d, field="extrinsics"):
    R = _array(_require(d, "rotation", f"{field}."), (3, 3), f"{field}.rotation")
    t = _array(_require(d, "translation", f"{field}."), (3,), f"{field}.translation")
    try:
        return RigidTransform(R, t)
    except ValueError as exc:
        raise SchemaError(f"{field}: {exc}", field) from exc


def parse_correspondences(items, field="correspondences"):
    if not isinstance(items, list):
        raise SchemaError(f"{field}: expected a list", field)
    px, pts, w = [], [], []
    for k, item in enumerate(items):
        f = f"{field}[{k}]"
        px.append(_array(_require(item, "pixel", f"{f}."), (2,), f"{f}.pixel"))
        pts.append(_array(_require(item, "point", f"{f}."), (3,), f"{f}.point"))
        w.append(float(item.get("weight", 1.0)))
    return (np.reshape(px, (-1, 2)), np.reshape(pts, (-1, 3)), np.asarray(w, dtype=float))


def parse_detections(items, field="detections"):
    if not isinstance(items, list):
        raise SchemaError(f"{field}: expected a list", field)
    out = []
    for k, item in enumerate(items):
        f = f"{field}[{k}]"
        cls = _require(item, "class", f"{f}.")
        box = _array(_require(item, "box", f"{f}."), (4,), f"{f}.box")
        try:
            bb = BoundingBox(str(cls), *box)
        except ValueError as exc:
            raise SchemaError(f"{f}.box: {exc}", f"{f}.box") from exc
        out.append({"id": str(item.get("id", f"h{k}")), "class": str(cls), "box": bb.as_list(),
                    "parent": item.get("parent")})
    return out


def parse_power_lines(d):
    if "power_lines" in d:
        lines, field = d["power_lines"], "power_lines"
    elif "power_line" in d:
        lines, field = [d["power_line"]], "power_line"
    else:
        raise SchemaError("missing required field power_lines", "power_lines")
    if not isinstance(lines, list) or not lines:
        raise SchemaError(f"{field}: expected a non-empty list of polylines", field)
    out = []
    for k, line in enumerate(lines):
        f = f"{field}[{k}]"
        out.append(Polyline3(_array(line, (None, 3), f)))
    return out


def load_scene(path, require_cloud=True):
    """Parse and validate a scene file."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"scene file not found: {path}", "")
    d = read_json(path)
    if not isinstance(d, dict):
        raise SchemaError("scene file must hold a JSON object", "")
    if d.get("schema", SCENE_SCHEMA) != SCENE_SCHEMA:
        raise SchemaError(f"unexpected schema {d.get('schema')!r}", "schema")
    version = _require(d, "version", "")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported scene version {version!r}", "version")
    base = path.parent
    camera = parse_camera(_require(d, "camera", ""))
    extrinsics = parse_extrinsics(d["extrinsics"]) if d.get("extrinsics") is not None else None
    corr = parse_correspondences(d["correspondences"]) \
        if d.get("correspondences") is not None else None
    lines = parse_power_lines(d)
    detections = parse_detections(d.get("detections", []))
    cloud_path = cloud = None
    pc = d.get("point_cloud")
    if pc is None:
        if require_cloud:
            raise SchemaError("missing required field point_cloud", "point_cloud")
    elif isinstance(pc, dict) and "path" in pc:
        cloud_path = _resolve(base, pc["path"], "point_cloud.path")
    elif isinstance(pc, dict) and "points" in pc:
        xyz = _array(pc["points"], (None, 3), "point_cloud.points")
        inten = _array(pc["intensity"], (len(xyz),), "point_cloud.intensity") \
            if pc.get("intensity") is not None else None
        cloud = PointCloud(xyz, intensity=inten)
    else:
        raise SchemaError("point_cloud needs a path or points", "point_cloud")
    image_path = None
    if d.get("image") is not None:
        image_path = _resolve(base, _require(d["image"], "path", "image."), "image.path")
    gt_path = None
    if d.get("ground_truth") is not None:
        gt_path = _resolve(base, d["ground_truth"], "ground_truth")
    return SceneData(path, d, camera, extrinsics, corr, lines, detections, cloud_path, cloud,
                     image_path, gt_path)


def scene_dict(camera, extrinsics, power_lines, detections, cloud_ref, image_ref=None,
               ground_truth_ref=None, correspondences=None, meta=None):
    """Assemble a version-1 scene dictionary."""
    d = {"schema": SCENE_SCHEMA, "version": SCHEMA_VERSION, "camera": camera.to_dict(),
         "power_lines": [np.asarray(ln.vertices if isinstance(ln, Polyline3) else ln).tolist()
                         for ln in power_lines],
         "detections": [det if isinstance(det, dict) else det.to_dict() for det in detections],
         "point_cloud": cloud_ref}
    if extrinsics is not None:
        d["extrinsics"] = extrinsics.to_dict()
    if correspondences is not None:
        px, pts, w = correspondences
        d["correspondences"] = [{"pixel": list(map(float, p)), "point": list(map(float, q)),
                                 "weight": float(wi)} for p, q, wi in zip(px, pts, w)]
    if image_ref is not None:
        d["image"] = {"path": str(image_ref)}
    if ground_truth_ref is not None:
        d["ground_truth"] = str(ground_truth_ref)
    if meta:
        d["meta"] = meta
    return d


def load_ground_truth(path):
    d = read_json(path)
    if d.get("schema") != GT_SCHEMA:
        raise SchemaError(f"{path}: not a ground-truth sidecar", "schema")
    return d


def relpath(path, start):
    return os.path.relpath(path, start).replace(os.sep, "/")
