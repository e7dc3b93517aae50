"""Readers and writers for clouds, images, cameras, volumes and fit configs.

All binary formats are little-endian. JSON documents carry ``"format_version": 1``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geom import CameraModel, PointCloud, Pose

FORMAT_VERSION = 1
DEFAULT_SIGMA = 0.02
DEFAULT_COLOR = (1.0, 1.0, 1.0)


class FormatError(ValueError):
    """Malformed input file; the message names the line or field at fault."""


# --------------------------------------------------------------------------
# PLY (ASCII)
# --------------------------------------------------------------------------

_PLY_TYPES = {
    "float": np.float32, "float32": np.float32,
    "double": np.float64, "float64": np.float64,
    "uchar": np.uint8, "uint8": np.uint8,
    "char": np.int8, "int8": np.int8,
    "short": np.int16, "int16": np.int16, "ushort": np.uint16, "uint16": np.uint16,
    "int": np.int32, "int32": np.int32, "uint": np.uint32, "uint32": np.uint32,
}
_COV_PROPS = ("sx", "sy", "sz", "qw", "qx", "qy", "qz")


def _fmt_f32(values) -> list[str]:
    return [np.format_float_positional(v, unique=True, trim="-") for v in np.asarray(values, dtype=np.float32)]


def quantize_unit(values) -> np.ndarray:
    """``floor(255 * clamp(v, 0, 1) + 0.5)`` as uint8 (round half up)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with float32 ``x y z``, optional ``red green blue`` and the size properties.

    Isotropic clouds store ``sigma``; full-covariance clouds store per-axis
    deviations ``sx sy sz`` and orientation ``qw qx qy qz``.
    """
    n = len(cloud)
    props = ["float x", "float y", "float z"]
    cols = [_fmt_f32(cloud.positions[:, i]) for i in range(3)]
    if cloud.colors is not None:
        if cloud.colors.shape[1] != 3:
            raise ValueError("PLY colors must have 3 channels")
        rgb = quantize_unit(cloud.colors)
        for i, name in enumerate(("red", "green", "blue")):
            props.append(f"uchar {name}")
            cols.append([str(v) for v in rgb[:, i]])
    if cloud.full_covariance:
        for i, name in enumerate(_COV_PROPS[:3]):
            props.append(f"float {name}")
            cols.append(_fmt_f32(cloud.cov_diag[:, i]))
        for i, name in enumerate(_COV_PROPS[3:]):
            props.append(f"float {name}")
            cols.append(_fmt_f32(cloud.cov_rotation[:, i]))
    else:
        props.append("float sigma")
        cols.append(_fmt_f32(cloud.sigmas))
    props.append("float scale")
    cols.append(_fmt_f32(cloud.scales))
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property {p}" for p in props]
    lines.append("end_header")
    lines += [" ".join(row) for row in zip(*cols)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path, default_sigma: float = DEFAULT_SIGMA, default_color=DEFAULT_COLOR) -> PointCloud:
    """Read an ASCII PLY written by :func:`write_ply` or any tool using the same properties.

    Missing ``sigma`` falls back to ``default_sigma``, missing ``scale`` to 1
    and missing colors to ``default_color``.
    """
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not an ASCII PLY file") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic line")
    n_vertex = None
    props: list[tuple[str, type]] = []
    element = None
    other_elements = []
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] != "ascii":
                raise FormatError(f"{path}:{lineno}: only 'format ascii 1.0' is supported")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(f"{path}:{lineno}: malformed element line")
            element = tok[1]
            if element == "vertex":
                n_vertex = int(tok[2])
            else:
                other_elements.append((element, int(tok[2])))
        elif tok[0] == "property":
            if element is None:
                raise FormatError(f"{path}:{lineno}: property before any element")
            if element != "vertex":
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}:{lineno}: unsupported property declaration {raw.strip()!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise FormatError(f"{path}:{lineno}: unexpected header keyword {tok[0]!r}")
    if header_end is None:
        raise FormatError(f"{path}: missing end_header")
    if n_vertex is None:
        raise FormatError(f"{path}: no vertex element declared")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise FormatError(f"{path}: vertex property {axis!r} missing")

    body = lines[header_end:]
    if len(body) < n_vertex:
        raise FormatError(f"{path}:{header_end + len(body) + 1}: expected {n_vertex} vertices, found {len(body)}")
    data = {name: np.empty(n_vertex, dtype=dtype) for name, dtype in props}
    for i in range(n_vertex):
        lineno = header_end + i + 1
        tok = body[i].split()
        if len(tok) != len(props):
            raise FormatError(f"{path}:{lineno}: expected {len(props)} values, found {len(tok)}")
        for (name, dtype), value in zip(props, tok):
            try:
                data[name][i] = dtype(float(value)) if dtype in (np.float32, np.float64) else dtype(int(value))
            except (ValueError, OverflowError) as exc:
                raise FormatError(f"{path}:{lineno}: bad value {value!r} for property {name!r}") from exc
    trailing = [ln for ln in body[n_vertex:] if ln.strip()]
    if trailing and not other_elements:
        raise FormatError(f"{path}:{header_end + n_vertex + 1}: more vertex lines than declared ({n_vertex})")

    pos = np.stack([data[a].astype(np.float64) for a in "xyz"], axis=1)
    scales = data["scale"].astype(np.float64) if "scale" in data else np.ones(n_vertex)
    if all(c in data for c in ("red", "green", "blue")):
        colors = np.stack([data[c].astype(np.float64) / 255.0 for c in ("red", "green", "blue")], axis=1)
    else:
        colors = np.tile(np.asarray(default_color, dtype=np.float64), (n_vertex, 1))
    if all(c in data for c in _COV_PROPS):
        diag = np.stack([data[c].astype(np.float64) for c in _COV_PROPS[:3]], axis=1)
        rot = np.stack([data[c].astype(np.float64) for c in _COV_PROPS[3:]], axis=1)
        return PointCloud(pos, scales, cov_diag=diag, cov_rotation=rot, colors=colors)
    sigmas = data["sigma"].astype(np.float64) if "sigma" in data else np.full(n_vertex, default_sigma)
    return PointCloud(pos, scales, sigmas=sigmas, colors=colors)


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def write_png(path, image) -> None:
    """8-bit gray ``(H, W)`` or RGB ``(H, W, 3)`` PNG, quantized round-half-up."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"cannot store image of shape {img.shape} as PNG")
    Image.fromarray(quantize_unit(img), mode="L" if img.ndim == 2 else "RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Image values in ``[0, 1]``; gray files give ``(H, W)``, color files ``(H, W, 3)``."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def write_pfm(path, image) -> None:
    """Little-endian float32 PFM; rows stored bottom-up."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"cannot store image of shape {img.shape} as PFM")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise FormatError(f"{path}:1: not a PFM file")
        dims = fh.readline().split()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(fh.readline())
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        c = 3 if magic == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} floats, found {data.size}")
    img = data.reshape((h, w, c) if c == 3 else (h, w))[::-1]
    return img.astype(np.float32)


def write_image(path, image) -> None:
    """PNG or PFM by file suffix."""
    if Path(path).suffix.lower() == ".pfm":
        write_pfm(path, image)
    else:
        write_png(path, image)


def read_image(path) -> np.ndarray:
    if Path(path).suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    return read_png(path)


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------


def _require(doc: dict, key: str, where: str):
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: expected an object")
    if key not in doc:
        raise FormatError(f"{where}.{key}: missing field" if where else f"{key}: missing field")
    return doc[key]


def _numbers(value, n: int, field_name: str) -> list[float]:
    if not isinstance(value, list) or len(value) != n or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise FormatError(f"{field_name}: expected a list of {n} numbers")
    return [float(v) for v in value]


def _check_version(doc: dict, where: str = "") -> None:
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        prefix = f"{where}." if where else ""
        raise FormatError(f"{prefix}format_version: unsupported version {version!r}")


def camera_to_dict(pose: Pose, cam: CameraModel, extra: dict | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "rotation": [float(v) for v in pose.rotation],
        "translation": [float(v) for v in pose.translation],
        "camera": {
            "kind": cam.kind,
            "focal": cam.focal,
            "near": cam.near,
            "far": cam.far,
            "half_width": cam.half_width,
        },
    }
    if extra:
        doc.update(extra)
    return doc


def camera_from_dict(doc: dict) -> tuple[Pose, CameraModel]:
    if not isinstance(doc, dict):
        raise FormatError("camera document: expected an object")
    _check_version(doc)
    rot = _numbers(_require(doc, "rotation", ""), 4, "rotation")
    trans = _numbers(_require(doc, "translation", ""), 3, "translation")
    cam_doc = _require(doc, "camera", "")
    kind = _require(cam_doc, "kind", "camera")
    if kind not in ("ortho", "persp", "orthographic", "perspective"):
        raise FormatError(f"camera.kind: expected 'ortho' or 'persp', got {kind!r}")
    kwargs = {"kind": kind}
    for key in ("focal", "near", "far", "half_width"):
        if key in cam_doc:
            v = cam_doc[key]
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise FormatError(f"camera.{key}: expected a finite number")
            kwargs[key] = float(v)
    if not any(rot):
        raise FormatError("rotation: zero quaternion")
    try:
        cam = CameraModel(**kwargs)
    except ValueError as exc:
        raise FormatError(f"camera: {exc}") from exc
    return Pose(rot, trans), cam


def write_camera(path, pose: Pose, cam: CameraModel, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(camera_to_dict(pose, cam, extra), indent=2) + "\n")


def read_camera(path) -> tuple[Pose, CameraModel]:
    return camera_from_dict(_load_json(path))


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def write_volume(path, volume) -> Path:
    """Raw little-endian float32 stream (first axis slowest) plus a JSON sidecar.

    Returns the sidecar path, ``<path>.json``.
    """
    vol = np.asarray(volume, dtype="<f4")
    if vol.ndim != 3:
        raise ValueError("volume must be 3-D")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(vol).tobytes())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"format_version": FORMAT_VERSION, "dims": list(vol.shape),
                                   "layout": "k1-slowest", "dtype": "float32-le"}) + "\n")
    return sidecar


def read_volume(path) -> np.ndarray:
    path = Path(path)
    meta = _load_json(path.with_name(path.name + ".json"))
    _check_version(meta)
    dims = _require(meta, "dims", "")
    if not isinstance(dims, list) or len(dims) != 3 or not all(isinstance(d, int) and d > 0 for d in dims):
        raise FormatError("dims: expected three positive integers")
    if _require(meta, "layout", "") != "k1-slowest":
        raise FormatError(f"layout: unsupported layout {meta['layout']!r}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != dims[0] * dims[1] * dims[2]:
        raise FormatError(f"{path}: expected {dims[0] * dims[1] * dims[2]} floats, found {data.size}")
    return data.reshape(dims).astype(np.float32)


# --------------------------------------------------------------------------
# fit config and loss trace
# --------------------------------------------------------------------------

_CONFIG_TYPES = {
    "n_points": int, "K": int, "steps": int, "seed": int, "threads": int,
    "lr": float, "beta1": float, "beta2": float, "eps": float, "init_scale": float, "init_radius": float,
    "pose_lr_scale": float, "student_lr_scale": float, "pose_jitter_deg": float,
    "distill_weight": float, "truncation": float,
    "path": str,
    "supervised": bool, "learn_scale": bool, "learn_sigma": bool, "full_covariance": bool,
    "learn_translation": bool, "canonicalize_teacher_sign": bool,
}
_SCHEDULE_KEYS = ("dropout_start", "dropout_end", "sigma_start", "sigma_end")


def fit_config_from_dict(doc: dict):
    from .fit import FitConfig

    if not isinstance(doc, dict):
        raise FormatError("fit config: expected an object")
    _check_version(doc)
    known = {f.name for f in fields(FitConfig)}
    for key, value in doc.items():
        if key == "format_version":
            continue
        if key not in known:
            raise FormatError(f"{key}: unknown field")
        want = _CONFIG_TYPES.get(key)
        if want is int and (not isinstance(value, int) or isinstance(value, bool)):
            raise FormatError(f"{key}: expected an integer")
        if want is float and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise FormatError(f"{key}: expected a number")
        if want in (str, bool) and not isinstance(value, want):
            raise FormatError(f"{key}: expected a {want.__name__}")
    if doc.get("path", "fast") not in ("fast", "basic"):
        raise FormatError("path: expected 'fast' or 'basic'")
    for key in ("n_points", "K", "steps", "threads"):
        if key in doc and doc[key] < 1 and not (key == "steps" and doc[key] == 0):
            raise FormatError(f"{key}: must be positive")
    for key in ("lr", "eps", "truncation"):
        if key in doc and not doc[key] > 0:
            raise FormatError(f"{key}: must be positive")
    sched = doc.get("schedules", {})
    if not isinstance(sched, dict):
        raise FormatError("schedules: expected an object")
    for key, value in sched.items():
        if key not in _SCHEDULE_KEYS:
            raise FormatError(f"schedules.{key}: unknown field")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise FormatError(f"schedules.{key}: expected a number")
    for key in ("candidate_azimuths", "background"):
        if doc.get(key) is not None:
            value = doc[key]
            if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
                raise FormatError(f"{key}: expected a list of numbers")
    vps = doc.get("views_per_step")
    if vps is not None and (not isinstance(vps, int) or isinstance(vps, bool) or vps < 1):
        raise FormatError("views_per_step: expected a positive integer or null")
    return FitConfig.from_dict({k: v for k, v in doc.items() if k != "format_version"})


def read_fit_config(path):
    return fit_config_from_dict(_load_json(path))


def write_fit_config(path, config) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


LOSS_COLUMNS = ("step", "hindsight_loss", "selected_candidate", "student_loss", "dropout", "sigma")


def write_loss_trace(path, trace) -> None:
    """CSV of the per-step records; ``selected_candidate`` lists ``view:index`` pairs."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(LOSS_COLUMNS)
        for rec in trace:
            selected = ";".join(f"{j}:{k}" for j, k in zip(rec.views, rec.selected))
            out.writerow([rec.step, repr(float(rec.hindsight_loss)), selected, repr(float(rec.student_loss)),
                          repr(float(rec.dropout)), repr(float(rec.sigma))])


def read_loss_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["step"] = int(row["step"])
        for key in ("hindsight_loss", "student_loss", "dropout", "sigma"):
            row[key] = float(row[key])
    return rows
