"""Camera model and projection of primitives into ray space.

Ray space maps a camera-space point ``p`` to
``(fx * px / pz + cx, fy * py / pz + cy, |p|)`` so that every pixel ray is a
vertical line and depth differences along it are Euclidean lengths.

Two projection modes are supported:

``approximate``
    every vertex goes through the affine expansion of the map around the
    primitive center (``phi(c) + J(c) (v - c)``).
``exact``
    every vertex is projected exactly.  The interpolated depth attribute is
    the inverse planar depth ``1 / pz`` so that hit distances computed in the
    rasterizer are true Euclidean distances (perspective-correct).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import appearance
from .primitives import (
    PrimitiveSet,
    density_denominator,
    local_vertices,
    normalize_rotation,
    quat_to_matrix,
    DENSITY_SCALE,
)

APPROXIMATE = "approximate"
EXACT = "exact"
GUARD_BAND = 1.3


class CullError(ValueError):
    """Point lies behind (or too close to) the camera."""


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    znear: float = 0.01
    name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal lengths and image size must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def position(self):
        return -self.rotation.T @ self.translation

    @property
    def shape(self):
        return self.height, self.width

    def world_to_camera(self, points):
        return points @ self.rotation.T + self.translation

    def scaled(self, factor):
        """Same pose with intrinsics and resolution divided by ``factor``."""
        return Camera(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor,
                      self.width // factor, self.height // factor, self.rotation,
                      self.translation, self.znear, self.name)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), fov_deg=50.0, width=128, height=128,
                znear=0.01, name=""):
        """Pinhole camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
        eye = np.asarray(eye, float)
        forward = np.asarray(target, float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, float))
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, R, -R @ eye, znear, name)


def ray_space_map(p_cam, cam: Camera):
    """Map camera-space points (..., 3) into ray space."""
    p = np.asarray(p_cam)
    if np.any(p[..., 2] <= cam.znear):
        raise CullError("point behind or too close to the camera")
    return _phi(p, cam)


def _phi(p, cam):
    out = np.empty_like(p)
    out[..., 0] = cam.fx * p[..., 0] / p[..., 2] + cam.cx
    out[..., 1] = cam.fy * p[..., 1] / p[..., 2] + cam.cy
    out[..., 2] = np.linalg.norm(p, axis=-1)
    return out


def jacobian_at(p_cam, cam: Camera):
    """Analytic d(ray_space_map)/dp, shape (..., 3, 3)."""
    p = np.asarray(p_cam)
    if np.any(p[..., 2] <= cam.znear):
        raise CullError("point behind or too close to the camera")
    return _jacobian(p, cam)


def _jacobian(p, cam):
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (3, 3), dtype=p.dtype)
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * x / (z * z)
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * y / (z * z)
    J[..., 2, :] = p / np.linalg.norm(p, axis=-1, keepdims=True)
    return J


def jacobian_offset_backward(p, offsets, grads, cam):
    """Sum over vertices of d(J(p) o_k)/dp transposed against ``grads``.

    ``p`` (M, 3); ``offsets`` and ``grads`` (M, V, 3).  Returns (M, 3).
    """
    x, y, z = p[:, 0:1], p[:, 1:2], p[:, 2:3]
    ox, oy, oz = offsets[..., 0], offsets[..., 1], offsets[..., 2]
    g0, g1, g2 = grads[..., 0], grads[..., 1], grads[..., 2]
    out = np.zeros_like(p)
    z2 = z * z
    z3 = z2 * z
    out[:, 0] = np.sum(g0 * (-cam.fx * oz / z2), axis=1)
    out[:, 1] = np.sum(g1 * (-cam.fy * oz / z2), axis=1)
    out[:, 2] = np.sum(g0 * cam.fx * (-ox / z2 + 2 * x * oz / z3)
                       + g1 * cam.fy * (-oy / z2 + 2 * y * oz / z3), axis=1)
    norm = np.linalg.norm(p, axis=1, keepdims=True)
    po = np.einsum("mc,mvc->mv", p, offsets)
    # d(p.o/|p|)/dp = o/|p| - (p.o) p/|p|^3
    out += np.einsum("mv,mvc->mc", g2, offsets) / norm
    out -= p * (np.sum(g2 * po, axis=1, keepdims=True) / norm**3)
    return out


def _inverse_depth_map(p, cam):
    out = np.empty_like(p)
    out[..., 0] = cam.fx * p[..., 0] / p[..., 2] + cam.cx
    out[..., 1] = cam.fy * p[..., 1] / p[..., 2] + cam.cy
    out[..., 2] = 1.0 / p[..., 2]
    return out


def _inverse_depth_jacobian(p, cam):
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (3, 3), dtype=p.dtype)
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * x / (z * z)
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * y / (z * z)
    J[..., 2, 2] = -1.0 / (z * z)
    return J


@dataclass
class Projected:
    """Per-view projected primitives (the visible subset), plus backward caches.

    ``verts`` holds the rasterizer inputs: ray-space x/y after the 2D screen
    filter and the interpolated depth attribute (ray-space distance in
    approximate mode, inverse planar depth in exact mode).
    """

    mode: str
    ids: np.ndarray
    verts: np.ndarray
    verts_ray: np.ndarray
    center_ray: np.ndarray
    rgb: np.ndarray
    sigma: np.ndarray
    opacity: np.ndarray
    denominator: np.ndarray
    bbox: np.ndarray = None
    rect: np.ndarray = None
    cache: dict = field(default_factory=dict, repr=False)
    n_frustum: int = 0

    @property
    def depth_key(self):
        return self.center_ray[:, 2]

    def __len__(self):
        return len(self.ids)


def project_primitives(prims: PrimitiveSet, cam: Camera, mode=APPROXIMATE, use_filter_3d=True,
                       denominator=None):
    """Transform, project and shade every primitive; culled ones are dropped.

    ``denominator`` optionally overrides the density normalization per
    primitive (full-length array), used to hold it fixed under perturbation.
    """
    if mode not in (APPROXIMATE, EXACT):
        raise ValueError(f"unknown projection mode {mode!r}")
    dtype = prims.dtype
    Rc = cam.rotation.astype(dtype)
    tc = cam.translation.astype(dtype)
    p_all = prims.centers @ Rc.T + tc
    keep = p_all[:, 2] > cam.znear
    ids = np.nonzero(keep)[0]
    p = p_all[ids]

    q = normalize_rotation(prims.rotations[ids]) if len(ids) else prims.rotations[ids]
    Rq = quat_to_matrix(q)
    d_eff = prims.effective_distances(use_filter_3d)[ids]
    local = local_vertices(prims.kind, d_eff)
    ow = np.einsum("nij,nvj->nvi", Rq, local)
    oc = ow @ Rc.T  # camera-space offsets

    if mode == EXACT:
        v_cam = p[:, None, :] + oc
        ok = np.all(v_cam[..., 2] > cam.znear, axis=1)
        if not np.all(ok):
            sel = np.nonzero(ok)[0]
            ids, p, q, Rq, d_eff, local, ow, oc, v_cam = (
                a[sel] for a in (ids, p, q, Rq, d_eff, local, ow, oc, v_cam))
    center_ray = _phi(p, cam)
    J = _jacobian(p, cam)
    if mode == APPROXIMATE:
        verts_ray = center_ray[:, None, :] + np.einsum("mij,mvj->mvi", J, oc)
        verts = verts_ray.copy()
    else:
        verts_ray = _phi(v_cam, cam)
        verts = _inverse_depth_map(v_cam, cam)

    campos = cam.position.astype(dtype)
    view = prims.centers[ids] - campos
    dirs = view / np.linalg.norm(view, axis=1, keepdims=True)
    rgb, clamped = appearance.eval_sh(prims.sh[ids], dirs, prims.sh_degree)

    opacity = 1.0 / (1.0 + np.exp(-prims.opacity_logits[ids]))
    if denominator is None:
        denom = density_denominator(prims.kind, d_eff) if len(ids) else d_eff[:, 0]
    else:
        denom = np.asarray(denominator, dtype=dtype)[ids]
    sigma = -np.log1p(-DENSITY_SCALE * opacity) / denom

    proj = Projected(mode, ids, verts, verts_ray, center_ray, rgb.astype(dtype),
                     sigma.astype(dtype), opacity.astype(dtype), denom.astype(dtype))
    proj.cache = dict(p_cam=p, J=J, q=q, Rq=Rq, d_eff=d_eff, local=local, ow=ow, oc=oc,
                      view=view, dirs=dirs, clamped=clamped, Rc=Rc)
    if mode == EXACT:
        proj.cache["v_cam"] = v_cam
    return proj


def project_primitive(prims: PrimitiveSet, index: int, cam: Camera, mode=APPROXIMATE,
                      use_filter_3d=True):
    """Project a single primitive; returns None when it is culled."""
    proj = project_primitives(prims.select([index]), cam, mode, use_filter_3d)
    if len(proj) == 0:
        return None
    return proj


def screen_bbox(verts_xy, width, height, tile=16):
    """Pixel and tile rectangles covered by projected vertices.

    Returns ``(bbox, pixel_rect, tile_rect, visible)``; bbox is float
    (xmin, xmax, ymin, ymax), the rectangles are inclusive integer bounds.
    A pixel is covered when its center ``(px + 0.5, py + 0.5)`` lies in the bbox.
    """
    xs = verts_xy[..., 0]
    ys = verts_xy[..., 1]
    bbox = np.stack([xs.min(-1), xs.max(-1), ys.min(-1), ys.max(-1)], axis=-1)
    gx = 0.5 * (GUARD_BAND - 1.0) * width
    gy = 0.5 * (GUARD_BAND - 1.0) * height
    in_guard = ((bbox[:, 1] >= -gx) & (bbox[:, 0] <= width + gx)
                & (bbox[:, 3] >= -gy) & (bbox[:, 2] <= height + gy))
    px0 = np.maximum(np.ceil(bbox[:, 0] - 0.5), 0)
    px1 = np.minimum(np.floor(bbox[:, 1] - 0.5), width - 1)
    py0 = np.maximum(np.ceil(bbox[:, 2] - 0.5), 0)
    py1 = np.minimum(np.floor(bbox[:, 3] - 0.5), height - 1)
    visible = in_guard & (px0 <= px1) & (py0 <= py1)
    pix = np.stack([px0, px1, py0, py1], axis=-1)
    pix = np.where(visible[:, None], pix, 0).astype(np.int64)
    tiles = pix // tile
    return bbox, pix, tiles, visible
