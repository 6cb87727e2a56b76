"""COLMAP text ingestion, image loading, PLY checkpoints, depth/PNG output and
the ``section.key = value`` config format."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .primitives import KINDS, SH_COEFFS, PrimitiveSet, n_distances, quat_to_matrix
from .projection import Camera


class SceneFormatError(ValueError):
    """Malformed or unsupported scene input; message carries file and line."""


# ---------------------------------------------------------------------------
# COLMAP text

CAMERA_MODELS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


@dataclass
class CameraModel:
    id: int
    model: str
    width: int
    height: int
    params: tuple

    @property
    def intrinsics(self):
        if self.model == "PINHOLE":
            fx, fy, cx, cy = self.params
        else:
            f, cx, cy = self.params
            fx = fy = f
        return fx, fy, cx, cy


@dataclass
class View:
    image_id: int
    camera_id: int
    name: str
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray


@dataclass
class SfmScene:
    cameras: dict
    views: list
    points: np.ndarray
    colors: np.ndarray
    root: Path = None

    def camera(self, view: View, divisor=1) -> Camera:
        model = self.cameras[view.camera_id]
        fx, fy, cx, cy = model.intrinsics
        cam = Camera(fx, fy, cx, cy, model.width, model.height, view.rotation, view.translation,
                     name=view.name)
        return cam.scaled(divisor) if divisor != 1 else cam

    def training_cameras(self, divisor=1):
        return [self.camera(v, divisor) for v in self.views]


def _content_lines(path: Path):
    """(line number, text) pairs with comments removed; blank lines kept."""
    with open(path, "r", encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if line.lstrip().startswith("#"):
                continue
            yield no, line.strip()


def _numbers(tokens, conv, path, no, what):
    try:
        return [conv(t) for t in tokens]
    except ValueError as exc:
        raise SceneFormatError(f"{path}:{no}: malformed {what}: {exc}") from None


def read_cameras_text(path: Path):
    cameras = {}
    for no, line in _content_lines(path):
        if not line:
            continue
        tok = line.split()
        if len(tok) < 4:
            raise SceneFormatError(f"{path}:{no}: camera line needs id, model, width, height")
        model = tok[1]
        if model not in CAMERA_MODELS:
            raise SceneFormatError(f"{path}:{no}: unsupported camera model {model!r} "
                                   f"(supported: {', '.join(CAMERA_MODELS)})")
        cid, w, h = _numbers([tok[0], tok[2], tok[3]], int, path, no, "camera header")
        params = _numbers(tok[4:], float, path, no, "camera parameters")
        if len(params) != CAMERA_MODELS[model]:
            raise SceneFormatError(f"{path}:{no}: {model} expects {CAMERA_MODELS[model]} "
                                   f"parameters, got {len(params)}")
        cameras[cid] = CameraModel(cid, model, w, h, tuple(params))
    return cameras


def read_images_text(path: Path):
    views = []
    lines = list(_content_lines(path))
    # drop trailing blank lines; inside the file blank lines are valid
    # (empty 2D-point lists)
    while lines and not lines[-1][1]:
        lines.pop()
    k = 0
    while k < len(lines):
        no, line = lines[k]
        if not line:
            k += 1
            continue
        tok = line.split()
        if len(tok) < 10:
            raise SceneFormatError(f"{path}:{no}: image line needs 10 fields, got {len(tok)}")
        iid, cid = _numbers([tok[0], tok[8]], int, path, no, "image ids")
        q = np.array(_numbers(tok[1:5], float, path, no, "quaternion"))
        t = np.array(_numbers(tok[5:8], float, path, no, "translation"))
        norm = np.linalg.norm(q)
        if norm == 0:
            raise SceneFormatError(f"{path}:{no}: zero quaternion")
        R = quat_to_matrix(q / norm)
        views.append(View(iid, cid, " ".join(tok[9:]), R, t))
        k += 2  # skip the 2D point list
    return views


def read_points_text(path: Path):
    pts = []
    cols = []
    for no, line in _content_lines(path):
        if not line:
            continue
        tok = line.split()
        if len(tok) < 8:
            raise SceneFormatError(f"{path}:{no}: point line needs at least 8 fields")
        xyz = _numbers(tok[1:4], float, path, no, "point position")
        rgb = _numbers(tok[4:7], int, path, no, "point color")
        pts.append(xyz)
        cols.append(rgb)
    return (np.array(pts, dtype=np.float64).reshape(-1, 3),
            np.array(cols, dtype=np.float64).reshape(-1, 3) / 255.0)


def _find_sparse(root: Path):
    for cand in (root, root / "sparse" / "0", root / "sparse"):
        if (cand / "cameras.txt").exists() or (cand / "images.txt").exists():
            return cand
    return root


def load_colmap(root) -> SfmScene:
    """Parse ``cameras.txt``, ``images.txt`` and ``points3D.txt``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory not found: {root}")
    sparse = _find_sparse(root)
    files = {}
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        p = sparse / name
        if not p.exists():
            raise FileNotFoundError(f"missing COLMAP file: {p}")
        files[name] = p
    cameras = read_cameras_text(files["cameras.txt"])
    views = read_images_text(files["images.txt"])
    for v in views:
        if v.camera_id not in cameras:
            raise SceneFormatError(f"{files['images.txt']}: image {v.name!r} references "
                                   f"unknown camera {v.camera_id}")
    points, colors = read_points_text(files["points3D.txt"])
    return SfmScene(cameras, views, points, colors, root)


def image_dir(scene: SfmScene):
    for cand in (scene.root / "images", scene.root):
        if cand.is_dir():
            return cand
    return scene.root


def load_image(path, divisor=1):
    """RGB image as float32 in [0, 1], optionally area-downsampled."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise SceneFormatError(f"cannot decode image {path}: {exc}") from None
    return downsample(arr, divisor)


def downsample(img, divisor):
    """Integer-factor box (area-mean) downsampling; ragged borders are cropped."""
    divisor = int(divisor)
    if divisor < 1:
        raise ValueError("divisor must be >= 1")
    if divisor == 1:
        return img
    h = img.shape[0] // divisor
    w = img.shape[1] // divisor
    crop = img[: h * divisor, : w * divisor]
    return crop.reshape(h, divisor, w, divisor, -1).mean(axis=(1, 3)).astype(img.dtype)


def load_images(scene: SfmScene, divisor=1, directory=None):
    """Images for every view, in view order."""
    base = Path(directory) if directory else image_dir(scene)
    out = []
    for v in scene.views:
        p = base / v.name
        if not p.exists():
            raise FileNotFoundError(f"missing image for view {v.name!r}: {p}")
        out.append(load_image(p, divisor))
    return out


# ---------------------------------------------------------------------------
# PLY checkpoints


@dataclass
class Checkpoint:
    prims: PrimitiveSet
    iteration: int = 0
    config_hash: str = ""

    @property
    def kind(self):
        return self.prims.kind


def _property_names(kind):
    names = ["x", "y", "z"] + [f"rot_{i}" for i in range(4)]
    names += [f"dist_{i}" for i in range(n_distances(kind))]
    names += ["opacity_logit"] + [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (SH_COEFFS - 1))]
    names.append("filter_3d")
    return names


def _to_table(prims: PrimitiveSet):
    n = len(prims)
    # rest coefficients are stored channel-major: all of red, then green, blue
    rest = prims.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (prims.sh.shape[1] - 1))
    return np.concatenate([
        prims.centers, prims.rotations, prims.distances, prims.opacity_logits[:, None],
        prims.sh[:, 0, :], rest, prims.filter_3d[:, None]], axis=1)


def _from_table(kind, table, sh_degree):
    n = len(table)
    nd = n_distances(kind)
    c = 0

    def take(k):
        nonlocal c
        out = table[:, c:c + k]
        c += k
        return out

    centers = take(3)
    rot = take(4)
    dist = take(nd)
    op = take(1)[:, 0]
    dc = take(3)
    rest = take(3 * (SH_COEFFS - 1)).reshape(n, 3, SH_COEFFS - 1).transpose(0, 2, 1)
    filt = take(1)[:, 0]
    sh = np.concatenate([dc[:, None, :], rest], axis=1)
    return PrimitiveSet(kind, *(np.ascontiguousarray(a) for a in (centers, rot, dist, op, sh, filt)),
                        sh_degree=sh_degree)


def _header(kind, n, ptype, fmt, iteration, config_hash, sh_degree):
    lines = ["ply", f"format {fmt} 1.0", f"comment kind {kind}", f"comment iteration {iteration}",
             f"comment config {config_hash or '-'}", f"comment sh_degree {sh_degree}",
             f"element vertex {n}"]
    lines += [f"property {ptype} {name}" for name in _property_names(kind)]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_checkpoint(prims: PrimitiveSet, path, iteration=0, config_hash="", ascii=False):
    """Write a PLY checkpoint; float64 sets are stored as ``double``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    double = prims.dtype == np.float64
    ptype = "double" if double else "float"
    table = _to_table(prims).astype(np.float64 if double else np.float32)
    fmt = "ascii" if ascii else "binary_little_endian"
    with open(path, "wb") as fh:
        fh.write(_header(prims.kind, len(prims), ptype, fmt, iteration, config_hash,
                         prims.sh_degree))
        if ascii:
            for row in table:
                fh.write((" ".join(np.format_float_scientific(v, unique=True) for v in row)
                          + "\n").encode("ascii"))
        else:
            fh.write(table.astype("<f8" if double else "<f4").tobytes())
    return path


def load_checkpoint(path, kind=None) -> Checkpoint:
    """Read a PLY checkpoint; ``kind`` (if given) must match the file's tag."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise SceneFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    meta = {"iteration": "0", "config": "-", "sh_degree": "3"}
    props = []
    fmt = None
    count = None
    for no, line in enumerate(header, start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment" and len(tok) >= 3:
            meta[tok[1]] = tok[2]
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise SceneFormatError(f"{path}:{no}: unexpected element {tok[1]!r}")
            count = int(tok[2])
        elif tok[0] == "property":
            props.append((tok[1], tok[2]))
    file_kind = meta.get("kind")
    if file_kind not in KINDS:
        raise SceneFormatError(f"{path}: missing or unknown primitive kind tag {file_kind!r}")
    if kind is not None and kind != file_kind:
        raise SceneFormatError(f"{path}: checkpoint holds {file_kind} primitives, "
                               f"expected {kind}")
    names = [p[1] for p in props]
    if names != _property_names(file_kind):
        raise SceneFormatError(f"{path}: property list does not match a {file_kind} checkpoint")
    types = {p[0] for p in props}
    if len(types) != 1 or types.pop() not in ("float", "double"):
        raise SceneFormatError(f"{path}: properties must all be float or all double")
    double = props[0][0] == "double"
    ncol = len(names)
    if fmt == "binary_little_endian":
        arr = np.frombuffer(body, dtype="<f8" if double else "<f4")
        if arr.size != count * ncol:
            raise SceneFormatError(f"{path}: expected {count} vertices, payload has {arr.size} values")
        table = arr.reshape(count, ncol)
    elif fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) != count:
            raise SceneFormatError(f"{path}: expected {count} vertices, found {len(rows)} rows")
        table = np.array([[float(v) for v in r.split()] for r in rows],
                         dtype=np.float64).reshape(count, ncol)
    else:
        raise SceneFormatError(f"{path}: unsupported PLY format {fmt!r}")
    table = table.astype(np.float64 if double else np.float32)
    prims = _from_table(file_kind, table, int(meta["sh_degree"]))
    cfg = meta["config"]
    return Checkpoint(prims, int(meta["iteration"]), "" if cfg == "-" else cfg)


# ---------------------------------------------------------------------------
# image and depth output

DEPTH_MAGIC = b"PSDEPTH1"


def save_png(img, path):
    """Clamp to [0, 1] and quantize to 8 bits."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def save_depth(depth, path):
    """Raw float32 depth: magic, width, height (uint32 LE), then row-major values.

    Pixels without a depth are NaN.
    """
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h) + d.tobytes())


def load_depth(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(DEPTH_MAGIC):
        raise SceneFormatError(f"{path}: not a depth file")
    w, h = struct.unpack("<II", data[len(DEPTH_MAGIC):len(DEPTH_MAGIC) + 8])
    arr = np.frombuffer(data[len(DEPTH_MAGIC) + 8:], dtype="<f4")
    if arr.size != w * h:
        raise SceneFormatError(f"{path}: truncated depth payload")
    return arr.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# config files


def _parse_value(text):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        return tuple(_parse_value(t.strip()) for t in text.split(",") if t.strip())
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_config(text, source="<config>"):
    """``section.key = value`` lines into {section: {key: value}}."""
    out = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneFormatError(f"{source}:{no}: expected 'section.key = value'")
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise SceneFormatError(f"{source}:{no}: key {lhs!r} has no section")
        section, key = lhs.split(".", 1)
        out.setdefault(section, {})[key] = _parse_value(rhs)
    return out


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def apply_overrides(obj, values: dict, source="config"):
    """New dataclass instance with ``values`` replacing fields; unknown keys fail."""
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, val in values.items():
        if key not in names:
            raise SceneFormatError(f"{source}: unknown setting {key!r}")
        current = getattr(obj, key)
        if isinstance(current, bool):
            val = bool(val)
        elif isinstance(current, int) and not isinstance(val, bool):
            val = int(val)
        elif isinstance(current, float):
            val = float(val)
        elif isinstance(current, tuple) and not isinstance(val, tuple):
            val = (val,)
        changes[key] = val
    return dataclasses.replace(obj, **changes)
