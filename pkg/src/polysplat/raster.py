"""Tiled forward rasterization.

Pipeline per view: project primitives, shift bbox-extremal vertices outward
(2D screen filter), bin primitives into 16x16 tiles, sort each tile's list by
center depth, then for every pixel walk the list front to back, intersect the
pixel ray with every face of each primitive and composite the chord opacity.

In ray space every pixel ray is the vertical line ``x = rx, y = ry``, so the
ray/triangle test reduces to a 2D barycentric test per face.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .primitives import PrimitiveSet, face_topology
from .projection import APPROXIMATE, EXACT, Camera, Projected, project_primitives, screen_bbox

TILE = 16
STOP_TRANSMITTANCE = 1e-3
DEPTH_OPACITY = 0.5
DET_EPS = 1e-12
FILTER_2D_KERNEL = 0.1
INVALID_DEPTH = np.nan


@dataclass
class RenderSettings:
    projection: str = APPROXIMATE
    filter_2d: float = FILTER_2D_KERNEL
    use_filter_3d: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    stop_transmittance: float = STOP_TRANSMITTANCE
    dtype: str = "float32"

    def effective_filter_2d(self):
        # the exact projection path never uses the screen filter
        return self.filter_2d if self.projection == APPROXIMATE else 0.0


@dataclass
class TileGrid:
    width: int
    height: int
    tile: int = TILE

    @property
    def tiles_x(self):
        return (self.width + self.tile - 1) // self.tile

    @property
    def tiles_y(self):
        return (self.height + self.tile - 1) // self.tile

    @property
    def n_tiles(self):
        return self.tiles_x * self.tiles_y


@dataclass
class Worklist:
    point_list: np.ndarray  # index into the projected arrays, per entry
    keys: np.ndarray
    tile_ranges: np.ndarray  # (n_tiles, 2) start/end into point_list

    def __len__(self):
        return len(self.point_list)


@dataclass
class IntersectionResult:
    i1: float
    i2: float
    faces: tuple
    u: tuple
    v: tuple
    det: tuple
    n_hits: int


@dataclass
class RenderResult:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    final_T: np.ndarray
    n_contrib: np.ndarray
    t_last: np.ndarray
    proj: Projected
    worklist: Worklist
    grid: TileGrid
    camera: Camera
    settings: RenderSettings
    kind: str
    n_total: int
    counters: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, inline="always")
def _intersect_prim(V, faces, rx, ry, exact, nr):
    """Entry/exit of the ray (rx, ry) with one projected primitive.

    Returns (ok, i1, i2, f1, u1, v1, d1, f2, u2, v2, d2, n_hits).
    Entry and exit are the min and max hit depth over all faces; a ray with
    fewer than two hits or a non-positive chord is a miss.
    """
    n_hits = 0
    i1 = np.inf
    i2 = -np.inf
    f1 = -1
    f2 = -1
    u1 = 0.0
    v1 = 0.0
    d1 = 1.0
    u2 = 0.0
    v2 = 0.0
    d2 = 1.0
    for f in range(faces.shape[0]):
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        e1x = V[b, 0] - V[a, 0]
        e1y = V[b, 1] - V[a, 1]
        e2x = V[c, 0] - V[a, 0]
        e2y = V[c, 1] - V[a, 1]
        det = e1x * e2y - e1y * e2x
        if abs(det) <= DET_EPS:
            continue
        sx = rx - V[a, 0]
        sy = ry - V[a, 1]
        u = (sx * e2y - sy * e2x) / det
        if u < 0.0 or u > 1.0:
            continue
        v = (e1x * sy - e1y * sx) / det
        if v < 0.0 or u + v > 1.0:
            continue
        z = (1.0 - u - v) * V[a, 2] + u * V[b, 2] + v * V[c, 2]
        if exact:
            if z <= 0.0:
                continue
            z = nr / z
        n_hits += 1
        if z < i1:
            i1 = z
            f1 = f
            u1 = u
            v1 = v
            d1 = det
        if z > i2:
            i2 = z
            f2 = f
            u2 = u
            v2 = v
            d2 = det
    ok = n_hits >= 2 and i2 > i1 and i1 > 0.0
    return ok, i1, i2, f1, u1, v1, d1, f2, u2, v2, d2, n_hits


@numba.njit(cache=True, inline="always")
def _ray_norm(rx, ry, cx, cy, fx, fy):
    a = (rx - cx) / fx
    b = (ry - cy) / fy
    return math.sqrt(a * a + b * b + 1.0)


@numba.njit(cache=True, parallel=True)
def _composite_tiles(verts, bbox, faces, rgb, sigma, point_list, tile_ranges, width, height,
                     tiles_x, bg, stop_T, exact, cx, cy, fx, fy,
                     out_color, out_T, out_n, out_tlast, out_depth, tile_iter, tile_hits):
    n_tiles = tile_ranges.shape[0]
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_ranges[t, 0]
        end = tile_ranges[t, 1]
        n_iter = 0
        n_int = 0
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                rx = px + 0.5
                ry = py + 0.5
                nr = _ray_norm(rx, ry, cx, cy, fx, fy) if exact else 1.0
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n = 0
                tlast = 1.0
                depth = np.nan
                for j in range(start, end):
                    m = point_list[j]
                    n = j - start + 1
                    n_iter += 1
                    if rx < bbox[m, 0] or rx > bbox[m, 1] or ry < bbox[m, 2] or ry > bbox[m, 3]:
                        continue
                    res = _intersect_prim(verts[m], faces, rx, ry, exact, nr)
                    if not res[0]:
                        continue
                    n_int += 1
                    i1 = res[1]
                    o = 1.0 - math.exp(-sigma[m] * (res[2] - i1))
                    w = T * o
                    c0 += w * rgb[m, 0]
                    c1 += w * rgb[m, 1]
                    c2 += w * rgb[m, 2]
                    tlast = T
                    T = T * (1.0 - o)
                    if np.isnan(depth) and 1.0 - T > 0.5:
                        depth = i1
                    if T < stop_T:
                        break
                out_color[py, px, 0] = c0 + T * bg[0]
                out_color[py, px, 1] = c1 + T * bg[1]
                out_color[py, px, 2] = c2 + T * bg[2]
                out_T[py, px] = T
                out_n[py, px] = n
                out_tlast[py, px] = tlast
                out_depth[py, px] = depth
        tile_iter[t] = n_iter
        tile_hits[t] = n_int


@numba.njit(cache=True)
def _expand_tiles(tile_rects, counts, offsets, depth_bits, tiles_x, point_list, keys):
    for m in range(tile_rects.shape[0]):
        if counts[m] == 0:
            continue
        k = offsets[m]
        for ty in range(tile_rects[m, 2], tile_rects[m, 3] + 1):
            for tx in range(tile_rects[m, 0], tile_rects[m, 1] + 1):
                tile = ty * tiles_x + tx
                keys[k] = (np.uint64(tile) << np.uint64(32)) | np.uint64(depth_bits[m])
                point_list[k] = m
                k += 1


# ---------------------------------------------------------------------------


def apply_2d_filter(verts, kernel=FILTER_2D_KERNEL):
    """Shift bbox-extremal vertices outward by ``kernel / 2`` in x and y.

    Only vertices attaining the min/max ray-space x (resp. y) move, and only
    in that coordinate.  ``verts`` is (M, V, 3) or (V, 3).
    """
    if kernel == 0:
        return verts
    out = np.array(verts, copy=True)
    half = 0.5 * kernel
    for axis in (0, 1):
        c = verts[..., axis]
        lo = c == c.min(axis=-1, keepdims=True)
        hi = c == c.max(axis=-1, keepdims=True)
        out[..., axis] = c - half * lo + half * hi
    return out


def depth_key_bits(depth):
    """Order-preserving 32-bit encoding of positive depths."""
    return np.asarray(depth, dtype=np.float32).view(np.uint32)


def build_worklist(tile_rects, visible, depth_keys, grid: TileGrid) -> Worklist:
    """One (tile, depth)-keyed entry per overlapped tile, stably sorted."""
    tile_rects = np.ascontiguousarray(tile_rects, dtype=np.int64)
    counts = np.where(visible, (tile_rects[:, 1] - tile_rects[:, 0] + 1)
                      * (tile_rects[:, 3] - tile_rects[:, 2] + 1), 0).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    total = int(counts.sum())
    point_list = np.empty(total, dtype=np.int64)
    keys = np.empty(total, dtype=np.uint64)
    if total:
        bits = depth_key_bits(np.maximum(depth_keys, 0)).astype(np.uint64)
        _expand_tiles(tile_rects, counts, offsets, bits, grid.tiles_x, point_list, keys)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    point_list = point_list[order]
    tiles = (keys >> np.uint64(32)).astype(np.int64)
    bounds = np.arange(grid.n_tiles + 1)
    edges = np.searchsorted(tiles, bounds)
    ranges = np.stack([edges[:-1], edges[1:]], axis=1).astype(np.int64)
    return Worklist(point_list, keys, ranges)


def intersect(verts, rx, ry, kind="octahedron", exact=False, ray_norm=1.0):
    """Intersect one projected primitive (V, 3) with a pixel ray; None on miss."""
    faces = face_topology(kind)
    V = np.ascontiguousarray(verts, dtype=np.float64)
    ok, i1, i2, f1, u1, v1, d1, f2, u2, v2, d2, n = _intersect_prim(
        V, faces, float(rx), float(ry), bool(exact), float(ray_norm))
    if not ok:
        return None
    return IntersectionResult(i1, i2, (f1, f2), (u1, u2), (v1, v2), (d1, d2), n)


def face_hit(v0, v1, v2, rx, ry):
    """2D barycentric test of one ray-space triangle: (hit, u, v, det, depth)."""
    e1 = np.subtract(v1[:2], v0[:2])
    e2 = np.subtract(v2[:2], v0[:2])
    det = e1[0] * e2[1] - e1[1] * e2[0]
    if abs(det) <= DET_EPS:
        return False, 0.0, 0.0, det, np.nan
    s = (rx - v0[0], ry - v0[1])
    u = (s[0] * e2[1] - s[1] * e2[0]) / det
    v = (e1[0] * s[1] - e1[1] * s[0]) / det
    hit = u >= 0 and v >= 0 and u + v <= 1
    depth = (1 - u - v) * v0[2] + u * v1[2] + v * v2[2]
    return hit, u, v, det, depth


def pixel_alpha(sigma, i1, i2):
    return 1.0 - np.exp(-np.asarray(sigma) * (np.asarray(i2) - np.asarray(i1)))


def _dtype(settings):
    return np.dtype(settings.dtype)


def prepare_view(prims: PrimitiveSet, cam: Camera, settings: RenderSettings, denominator=None):
    """Projection, screen filter and worklist for one view."""
    dtype = _dtype(settings)
    if prims.dtype != dtype:
        prims = prims.astype(dtype)
    t0 = time.perf_counter()
    proj = project_primitives(prims, cam, settings.projection, settings.use_filter_3d, denominator)
    kernel = settings.effective_filter_2d()
    if kernel and len(proj):
        proj.verts = apply_2d_filter(proj.verts, kernel)
    bbox, _, tiles, visible = screen_bbox(proj.verts[..., :2], cam.width, cam.height, TILE)
    proj.bbox = bbox.astype(np.float64)
    proj.rect = tiles
    proj.cache["visible"] = visible
    proj.n_frustum = int(visible.sum())
    t1 = time.perf_counter()
    grid = TileGrid(cam.width, cam.height)
    worklist = build_worklist(tiles, visible, proj.depth_key, grid)
    t2 = time.perf_counter()
    return proj, worklist, grid, {"preprocess": t1 - t0, "sort_tile": t2 - t1}


def render(prims: PrimitiveSet, cam: Camera, settings: RenderSettings = None, denominator=None):
    """Render color, alpha (1 - T) and depth for one camera."""
    settings = settings or RenderSettings()
    dtype = _dtype(settings)
    proj, worklist, grid, timings = prepare_view(prims, cam, settings, denominator)
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3), dtype=dtype)
    final_T = np.ones((H, W), dtype=dtype)
    n_contrib = np.zeros((H, W), dtype=np.int64)
    t_last = np.ones((H, W), dtype=dtype)
    depth = np.full((H, W), np.nan, dtype=dtype)
    tile_iter = np.zeros(grid.n_tiles, dtype=np.int64)
    tile_hits = np.zeros(grid.n_tiles, dtype=np.int64)
    bg = np.asarray(settings.background, dtype=dtype)
    t0 = time.perf_counter()
    _composite_tiles(
        np.ascontiguousarray(proj.verts, dtype=dtype), proj.bbox, face_topology(prims.kind),
        np.ascontiguousarray(proj.rgb, dtype=dtype), np.ascontiguousarray(proj.sigma, dtype=dtype),
        worklist.point_list, worklist.tile_ranges, W, H, grid.tiles_x, bg,
        float(settings.stop_transmittance), proj.mode == EXACT,
        float(cam.cx), float(cam.cy), float(cam.fx), float(cam.fy),
        color, final_T, n_contrib, t_last, depth, tile_iter, tile_hits)
    timings["render"] = time.perf_counter() - t0
    counters = {
        "frustum": proj.n_frustum,
        "tile_list": len(worklist),
        "iterated": int(tile_iter.sum()),
        "intersected": int(tile_hits.sum()),
    }
    return RenderResult(color, 1.0 - final_T, depth, final_T, n_contrib, t_last, proj, worklist,
                        grid, cam, settings, prims.kind, len(prims), counters, timings)
