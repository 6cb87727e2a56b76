"""Brute-force reference renderer.

Every pixel casts a world-space ray against every face of every primitive
with the 3D Moller-Trumbore test, sorts the resulting segments by entry
distance and composites them without early termination.  Nothing here
shares code with the tiled rasterizer beyond primitive construction and
shading, so disagreements point at real bugs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import metrics
from .appearance import eval_sh
from .primitives import PrimitiveSet, build_vertices, density, face_topology
from .projection import Camera


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    names: list = field(default_factory=list)

    def add(self, name, rendered, target):
        self.names.append(name)
        self.psnr.append(compute_psnr(rendered, target))
        self.ssim.append(compute_ssim(rendered, target))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")


def compute_psnr(a, b):
    return metrics.psnr(a, b)


def compute_ssim(a, b):
    return metrics.ssim(a, b)


@numba.njit(cache=True, inline="always")
def _mt(ox, oy, oz, dx, dy, dz, V, a, b, c):
    e1x = V[b, 0] - V[a, 0]
    e1y = V[b, 1] - V[a, 1]
    e1z = V[b, 2] - V[a, 2]
    e2x = V[c, 0] - V[a, 0]
    e2y = V[c, 1] - V[a, 1]
    e2z = V[c, 2] - V[a, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-300:
        return False, 0.0
    inv = 1.0 / det
    tx = ox - V[a, 0]
    ty = oy - V[a, 1]
    tz = oz - V[a, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return False, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return False, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return True, t


@numba.njit(cache=True, parallel=True)
def _render_rows(verts, centers, radii, faces, rgb, sigma, origin, dirs, bg, out_color,
                 out_alpha, out_depth):
    H = dirs.shape[0]
    W = dirs.shape[1]
    N = verts.shape[0]
    for py in numba.prange(H):
        entry = np.empty(N)
        op = np.empty(N)
        who = np.empty(N, dtype=np.int64)
        ox = origin[0]
        oy = origin[1]
        oz = origin[2]
        for px in range(W):
            dx = dirs[py, px, 0]
            dy = dirs[py, px, 1]
            dz = dirs[py, px, 2]
            k = 0
            for m in range(N):
                # exact bounding-sphere rejection; cannot change the result
                wx = centers[m, 0] - ox
                wy = centers[m, 1] - oy
                wz = centers[m, 2] - oz
                s = wx * dx + wy * dy + wz * dz
                perp2 = wx * wx + wy * wy + wz * wz - s * s
                if perp2 > radii[m] * radii[m]:
                    continue
                V = verts[m]
                hits = 0
                t1 = np.inf
                t2 = -np.inf
                for f in range(faces.shape[0]):
                    hit, t = _mt(ox, oy, oz, dx, dy, dz, V, faces[f, 0], faces[f, 1], faces[f, 2])
                    if hit:
                        hits += 1
                        t1 = min(t1, t)
                        t2 = max(t2, t)
                if hits >= 2 and t2 > t1 and t1 > 0.0:
                    entry[k] = t1
                    op[k] = 1.0 - math.exp(-sigma[m] * (t2 - t1))
                    who[k] = m
                    k += 1
            order = np.argsort(entry[:k])
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            depth = np.nan
            for j in range(k):
                idx = order[j]
                m = who[idx]
                w = T * op[idx]
                c0 += w * rgb[m, 0]
                c1 += w * rgb[m, 1]
                c2 += w * rgb[m, 2]
                T *= 1.0 - op[idx]
                if np.isnan(depth) and 1.0 - T > 0.5:
                    depth = entry[idx]
            out_color[py, px, 0] = c0 + T * bg[0]
            out_color[py, px, 1] = c1 + T * bg[1]
            out_color[py, px, 2] = c2 + T * bg[2]
            out_alpha[py, px] = 1.0 - T
            out_depth[py, px] = depth


def pixel_rays(cam: Camera):
    """Unit world-space directions through pixel centers, (H, W, 3)."""
    xs = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    X, Y = np.meshgrid(xs, ys)
    d_cam = np.stack([X, Y, np.ones_like(X)], axis=-1)
    d = d_cam @ cam.rotation  # R^T applied to row vectors
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class OracleImage:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


def render_exact(prims: PrimitiveSet, cam: Camera, background=(0.0, 0.0, 0.0), use_filter_3d=True,
                 denominator=None) -> OracleImage:
    """Reference render in float64 (color, alpha, depth)."""
    prims = prims.astype(np.float64)
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    depth = np.full((H, W), np.nan)
    if len(prims):
        verts = build_vertices(prims, use_filter=use_filter_3d)
        d_eff = prims.effective_distances(use_filter_3d)
        radii = np.max(d_eff, axis=1) * (1 + 1e-9) + 1e-12
        view = prims.centers - cam.position
        dirs = view / np.linalg.norm(view, axis=1, keepdims=True)
        rgb, _ = eval_sh(prims.sh, dirs, prims.sh_degree)
        sigma = density(prims.opacities, d_eff, prims.kind, denominator)
    else:
        verts = np.zeros((0, 6, 3))
        radii = np.zeros(0)
        rgb = np.zeros((0, 3))
        sigma = np.zeros(0)
    _render_rows(np.ascontiguousarray(verts), np.ascontiguousarray(prims.centers), radii,
                 face_topology(prims.kind), np.ascontiguousarray(rgb), np.ascontiguousarray(sigma),
                 cam.position, pixel_rays(cam), np.asarray(background, float), color, alpha, depth)
    return OracleImage(color, alpha, depth)
