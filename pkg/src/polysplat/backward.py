"""Analytic gradients from image-space loss gradients to primitive features.

The rasterization part replays every pixel's contributors back to front,
reconstructing transmittance from the stored final value, and pushes the
color/opacity gradients through the chord opacity into the two hit
triangles of each primitive.  The preprocessing part then undoes the screen
filter (identity), the ray-space map, the camera transform and finally the
rotation, splitting offset gradients onto quaternion and distance features.

Per-entry gradient slots (one per worklist entry) make the tile loop free of
write conflicts; the final per-primitive reduction runs in worklist order,
so results are bit-identical across runs regardless of thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import appearance
from .primitives import (
    DENSITY_SCALE,
    PrimitiveSet,
    density_denominator,
    face_topology,
    local_vertices_backward,
    normalize_rotation_backward,
    quat_to_matrix_backward,
)
from .projection import EXACT, _inverse_depth_jacobian, jacobian_offset_backward
from .raster import (
    DET_EPS,
    RenderResult,
    RenderSettings,
    _intersect_prim,
    _ray_norm,
    render,
)


class ReplayError(RuntimeError):
    """Backward replay disagrees with the recorded forward pass."""


# ---------------------------------------------------------------------------
# scalar building blocks


@numba.njit(cache=True, inline="always")
def _mtia_grad(V, a, b, c, u, v, det, depth, gi, rx, ry, exact, out):
    """Accumulate dL/dvertex for one hit face given dL/d(hit depth) = gi."""
    za = V[a, 2]
    zb = V[b, 2]
    zc = V[c, 2]
    w0 = 1.0 - u - v
    if exact:
        S = w0 * za + u * zb + v * zc
        k = -depth / S
        di_du = k * (zb - za)
        di_dv = k * (zc - za)
        gs = gi * k
        out[a, 2] += gs * w0
        out[b, 2] += gs * u
        out[c, 2] += gs * v
    else:
        di_du = zb - za
        di_dv = zc - za
        out[a, 2] += gi * w0
        out[b, 2] += gi * u
        out[c, 2] += gi * v
    gu = gi * di_du
    gv = gi * di_dv
    e1x = V[b, 0] - V[a, 0]
    e1y = V[b, 1] - V[a, 1]
    e2x = V[c, 0] - V[a, 0]
    e2y = V[c, 1] - V[a, 1]
    sx = rx - V[a, 0]
    sy = ry - V[a, 1]
    gU = gu / det
    gV = gv / det
    gdet = -(gu * u + gv * v) / det
    bx = gV * sy + gdet * e2y
    by = -gV * sx - gdet * e2x
    cxg = -gU * sy - gdet * e1y
    cyg = gU * sx + gdet * e1x
    rxg = gU * e2y - gV * e1y
    ryg = -gU * e2x + gV * e1x
    out[a, 0] += -(bx + cxg + rxg)
    out[a, 1] += -(by + cyg + ryg)
    out[b, 0] += bx
    out[b, 1] += by
    out[c, 0] += cxg
    out[c, 1] += cyg


@numba.njit(cache=True, parallel=True)
def _backward_tiles(verts, bbox, faces, rgb, sigma, point_list, tile_ranges, width, height,
                    tiles_x, bg, exact, cx, cy, fx, fy, final_T, n_contrib, t_last, grad_color,
                    g_verts, g_rgb, g_sigma):
    n_tiles = tile_ranges.shape[0]
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_ranges[t, 0]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                n = n_contrib[py, px]
                if n == 0:
                    continue
                rx = px + 0.5
                ry = py + 0.5
                nr = _ray_norm(rx, ry, cx, cy, fx, fy) if exact else 1.0
                g0 = grad_color[py, px, 0]
                g1 = grad_color[py, px, 1]
                g2 = grad_color[py, px, 2]
                s0 = bg[0]
                s1 = bg[1]
                s2 = bg[2]
                t_next = final_T[py, px]
                first = True
                for j in range(start + n - 1, start - 1, -1):
                    m = point_list[j]
                    if rx < bbox[m, 0] or rx > bbox[m, 1] or ry < bbox[m, 2] or ry > bbox[m, 3]:
                        continue
                    res = _intersect_prim(verts[m], faces, rx, ry, exact, nr)
                    if not res[0]:
                        continue
                    i1 = res[1]
                    i2 = res[2]
                    e = math.exp(-sigma[m] * (i2 - i1))
                    o = 1.0 - e
                    if first:
                        tk = t_last[py, px]
                        first = False
                    else:
                        tk = t_next / e
                    w = tk * o
                    g_rgb[j, 0] += w * g0
                    g_rgb[j, 1] += w * g1
                    g_rgb[j, 2] += w * g2
                    dl_do = tk * ((rgb[m, 0] - s0) * g0 + (rgb[m, 1] - s1) * g1
                                  + (rgb[m, 2] - s2) * g2)
                    s0 = o * rgb[m, 0] + e * s0
                    s1 = o * rgb[m, 1] + e * s1
                    s2 = o * rgb[m, 2] + e * s2
                    t_next = tk
                    dl_di2 = sigma[m] * e * dl_do
                    g_sigma[j] += (i2 - i1) * e * dl_do
                    fa = res[3]
                    fb = res[7]
                    _mtia_grad(verts[m], faces[fa, 0], faces[fa, 1], faces[fa, 2], res[4], res[5],
                               res[6], i1, -dl_di2, rx, ry, exact, g_verts[j])
                    _mtia_grad(verts[m], faces[fb, 0], faces[fb, 1], faces[fb, 2], res[8], res[9],
                               res[10], i2, dl_di2, rx, ry, exact, g_verts[j])


@numba.njit(cache=True, parallel=True)
def _signature_tiles(verts, bbox, faces, point_list, tile_ranges, width, height, tiles_x, exact,
                     cx, cy, fx, fy, n_contrib, out):
    n_tiles = tile_ranges.shape[0]
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_ranges[t, 0]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                rx = px + 0.5
                ry = py + 0.5
                nr = _ray_norm(rx, ry, cx, cy, fx, fy) if exact else 1.0
                h = np.int64(n_contrib[py, px])
                for j in range(start, start + n_contrib[py, px]):
                    m = point_list[j]
                    if rx < bbox[m, 0] or rx > bbox[m, 1] or ry < bbox[m, 2] or ry > bbox[m, 3]:
                        continue
                    res = _intersect_prim(verts[m], faces, rx, ry, exact, nr)
                    if res[0]:
                        h = h * 1000003 + m * 4096 + res[3] * 64 + res[7] * 8 + res[11]
                out[py, px] = h


# ---------------------------------------------------------------------------
# python-level operations


def blend_backward(opacities, colors, grad_pixel, background=(0.0, 0.0, 0.0),
                   stop_transmittance=1e-3, n_contrib=None):
    """Per-contribution (dL/do_k, dL/dc_k) for one pixel's front-to-back list.

    Runs the forward composite to find the stop point and the final
    transmittance, then replays back to front.
    """
    opacities = np.asarray(opacities, dtype=float)
    colors = np.asarray(colors, dtype=float).reshape(-1, 3)
    g = np.asarray(grad_pixel, dtype=float)
    T = 1.0
    t_last = 1.0
    used = 0
    for k, o in enumerate(opacities):
        t_last = T
        T *= 1.0 - o
        used = k + 1
        if T < stop_transmittance:
            break
    if n_contrib is not None and n_contrib != used:
        raise ReplayError(f"replay found {used} contributors, forward recorded {n_contrib}")
    d_o = np.zeros(len(opacities))
    d_c = np.zeros((len(opacities), 3))
    S = np.asarray(background, dtype=float).copy()
    t_next = T
    for k in range(used - 1, -1, -1):
        o = opacities[k]
        tk = t_last if k == used - 1 else t_next / (1.0 - o)
        d_c[k] = tk * o * g
        d_o[k] = tk * np.dot(colors[k] - S, g)
        S = o * colors[k] + (1.0 - o) * S
        t_next = tk
    return d_o, d_c


def alpha_backward(sigma, i1, i2, grad_o, opacity=None, denominator=None):
    """Gradients of the chord opacity w.r.t. entry, exit and (optionally) alpha.

    The density normalization is treated as a constant.  Returns
    ``(dL/di1, dL/di2, dL/dsigma, dL/dalpha)``; the last is None unless
    ``opacity`` and ``denominator`` are given.
    """
    e = np.exp(-sigma * (i2 - i1))
    d_i2 = sigma * e * grad_o
    d_sigma = (i2 - i1) * e * grad_o
    d_alpha = None
    if opacity is not None and denominator is not None:
        d_alpha = d_sigma * DENSITY_SCALE / ((1.0 - DENSITY_SCALE * opacity) * denominator)
    return -d_i2, d_i2, d_sigma, d_alpha


def intersection_depth_jacobian(v0, v1, v2, r, exact=False, ray_norm=1.0):
    """Rows d(hit depth)/d(v_k) for k = 0, 1, 2 of one ray-space triangle."""
    V = np.array([v0, v1, v2], dtype=np.float64)
    rx, ry = float(r[0]), float(r[1])
    e1 = V[1, :2] - V[0, :2]
    e2 = V[2, :2] - V[0, :2]
    det = e1[0] * e2[1] - e1[1] * e2[0]
    if abs(det) <= DET_EPS:
        return np.zeros((3, 3))
    s = (rx - V[0, 0], ry - V[0, 1])
    u = (s[0] * e2[1] - s[1] * e2[0]) / det
    v = (e1[0] * s[1] - e1[1] * s[0]) / det
    z = (1 - u - v) * V[0, 2] + u * V[1, 2] + v * V[2, 2]
    depth = ray_norm / z if exact else z
    out = np.zeros((3, 3))
    _mtia_grad(V, 0, 1, 2, u, v, det, depth, 1.0, rx, ry, exact, out)
    return out


def mtia_backward(v0, v1, v2, r, grad_depth, exact=False, ray_norm=1.0):
    """dL/dv0, dL/dv1, dL/dv2 for one hit face, given dL/d(hit depth)."""
    return grad_depth * intersection_depth_jacobian(v0, v1, v2, r, exact, ray_norm)


@dataclass
class Gradients:
    """Per-primitive gradients of one backward pass (full set length)."""

    centers: np.ndarray
    rotations: np.ndarray
    distances: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    background: np.ndarray
    viewspace: np.ndarray  # |d L / d screen center| in NDC units
    visible: np.ndarray
    screen_size: np.ndarray  # bbox longer side, pixels
    extra: dict = field(default_factory=dict, repr=False)

    @classmethod
    def zeros(cls, prims: PrimitiveSet):
        n = len(prims)
        dt = prims.dtype
        return cls(np.zeros((n, 3), dt), np.zeros((n, 4), dt), np.zeros_like(prims.distances),
                   np.zeros(n, dt), np.zeros_like(prims.sh), np.zeros(3, dt), np.zeros(n, dt),
                   np.zeros(n, bool), np.zeros(n, dt))

    def as_dict(self):
        return {"centers": self.centers, "rotations": self.rotations,
                "distances": self.distances, "opacity_logits": self.opacity_logits,
                "sh": self.sh}

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


class GradientBuffer:
    """Accumulates gradients and densification statistics over passes."""

    def __init__(self, prims: PrimitiveSet):
        self.grads = Gradients.zeros(prims)
        self.viewspace_accum = np.zeros(len(prims))
        self.observations = np.zeros(len(prims), dtype=np.int64)

    def zero(self):
        for v in self.grads.as_dict().values():
            v[...] = 0
        self.grads.background[...] = 0

    def accumulate(self, g: Gradients):
        for name, v in self.grads.as_dict().items():
            v += getattr(g, name)
        self.grads.background += g.background
        self.viewspace_accum += np.where(g.visible, g.viewspace, 0.0)
        self.observations += g.visible


def transform_backward(result: RenderResult, prims: PrimitiveSet, g_verts, g_rgb, g_sigma):
    """Pull per-visible-primitive ray-space gradients back to world features."""
    proj = result.proj
    cam = result.camera
    c = proj.cache
    grads = Gradients.zeros(prims)
    ids = proj.ids
    if len(ids) == 0:
        return grads
    dt = prims.dtype
    g_verts = g_verts.astype(dt)
    opacity = proj.opacity
    # density -> opacity logit, normalization held constant
    d_sigma_d_alpha = DENSITY_SCALE / ((1.0 - DENSITY_SCALE * opacity) * proj.denominator)
    g_logit = g_sigma * d_sigma_d_alpha * opacity * (1.0 - opacity)

    g_sh, g_dir = appearance.sh_backward(prims.sh[ids], c["dirs"], g_rgb.astype(dt), c["clamped"],
                                         prims.sh_degree)
    g_center = appearance.direction_backward(c["view"], g_dir)
    Rc = c["Rc"]
    if proj.mode == EXACT:
        Jv = _inverse_depth_jacobian(c["v_cam"], cam)
        g_vcam = np.einsum("mvji,mvj->mvi", Jv, g_verts)
        g_ow = g_vcam @ Rc
        g_center = g_center + g_ow.sum(axis=1)
    else:
        J = c["J"]
        g_center_ray = g_verts.sum(axis=1)
        g_oc = np.einsum("mji,mvj->mvi", J, g_verts)
        g_p = np.einsum("mji,mj->mi", J, g_center_ray)
        g_p += jacobian_offset_backward(c["p_cam"], c["oc"], g_verts, cam)
        g_ow = g_oc @ Rc
        g_center = g_center + g_p @ Rc
    screen = g_verts[..., :2].sum(axis=1)
    viewspace = np.hypot(screen[:, 0] * 0.5 * cam.width, screen[:, 1] * 0.5 * cam.height)

    Rq = c["Rq"]
    g_local = np.einsum("mji,mvj->mvi", Rq, g_ow)
    g_deff = local_vertices_backward(prims.kind, g_local)
    g_R = np.einsum("mvi,mvj->mij", g_ow, c["local"])
    g_qunit = quat_to_matrix_backward(c["q"], g_R)
    g_q = normalize_rotation_backward(prims.rotations[ids], g_qunit)
    if result.settings.use_filter_3d:
        g_d = g_deff * prims.distances[ids] / c["d_eff"]
    else:
        g_d = g_deff

    grads.centers[ids] = g_center
    grads.rotations[ids] = g_q
    grads.distances[ids] = g_d
    grads.opacity_logits[ids] = g_logit
    grads.sh[ids] = g_sh
    visible = c["visible"]
    grads.visible[ids] = visible
    grads.viewspace[ids] = np.where(visible, viewspace, 0.0)
    bb = proj.bbox
    grads.screen_size[ids] = np.where(visible, np.maximum(bb[:, 1] - bb[:, 0], bb[:, 3] - bb[:, 2]), 0)
    return grads


def rasterize_backward(result: RenderResult, grad_color):
    """Per-visible-primitive gradients (vertices, rgb, sigma) for one view."""
    proj = result.proj
    wl = result.worklist
    cam = result.camera
    dt = result.color.dtype
    V = proj.verts.shape[1] if len(proj) else 0
    E = len(wl)
    g_verts_e = np.zeros((E, V, 3), dtype=dt)
    g_rgb_e = np.zeros((E, 3), dtype=dt)
    g_sigma_e = np.zeros(E, dtype=dt)
    if E:
        _backward_tiles(
            np.ascontiguousarray(proj.verts, dtype=dt), proj.bbox, face_topology(result.kind),
            np.ascontiguousarray(proj.rgb, dtype=dt), np.ascontiguousarray(proj.sigma, dtype=dt),
            wl.point_list, wl.tile_ranges, cam.width, cam.height, result.grid.tiles_x,
            np.asarray(result.settings.background, dtype=dt), proj.mode == EXACT,
            float(cam.cx), float(cam.cy), float(cam.fx), float(cam.fy),
            result.final_T, result.n_contrib, result.t_last,
            np.ascontiguousarray(grad_color, dtype=dt), g_verts_e, g_rgb_e, g_sigma_e)
    M = len(proj)
    g_verts = np.zeros((M, V, 3), dtype=dt)
    g_rgb = np.zeros((M, 3), dtype=dt)
    g_sigma = np.zeros(M, dtype=dt)
    np.add.at(g_verts, wl.point_list, g_verts_e)
    np.add.at(g_rgb, wl.point_list, g_rgb_e)
    np.add.at(g_sigma, wl.point_list, g_sigma_e)
    return g_verts, g_rgb, g_sigma


def backward(result: RenderResult, grad_color, prims: PrimitiveSet) -> Gradients:
    """Full backward pass for one rendered view."""
    if len(prims) != result.n_total:
        raise ReplayError("primitive set changed between forward and backward")
    if prims.dtype != result.color.dtype:
        prims = prims.astype(result.color.dtype)
    g_verts, g_rgb, g_sigma = rasterize_backward(result, grad_color)
    grads = transform_backward(result, prims, g_verts, g_rgb, g_sigma)
    grads.background = np.einsum("hw,hwc->c", result.final_T, grad_color).astype(prims.dtype)
    return grads


def visibility_signature(result: RenderResult):
    """Per-pixel hash of the hit structure plus sort order and filter masks."""
    proj = result.proj
    cam = result.camera
    out = np.zeros((cam.height, cam.width), dtype=np.int64)
    if len(result.worklist):
        _signature_tiles(
            np.ascontiguousarray(proj.verts), proj.bbox, face_topology(result.kind),
            result.worklist.point_list, result.worklist.tile_ranges, cam.width, cam.height,
            result.grid.tiles_x, proj.mode == EXACT, float(cam.cx), float(cam.cy),
            float(cam.fx), float(cam.fy), result.n_contrib, out)
    vr = proj.verts_ray
    masks = []
    for axis in (0, 1):
        col = vr[..., axis]
        masks.append(col == col.min(axis=-1, keepdims=True) if len(vr) else col)
        masks.append(col == col.max(axis=-1, keepdims=True) if len(vr) else col)
    return (out, proj.ids[result.worklist.point_list], np.asarray(masks), proj.ids,
            proj.cache.get("clamped"))


def _signatures_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def signature_of(prims, camera, settings, denominator=None):
    return visibility_signature(render(prims, camera, settings, denominator))


# ---------------------------------------------------------------------------
# finite-difference validation


FD_NOISE = 10.0
REFINE_FACTORS = (4, 16, 64)
GROUPS = ("centers", "rotations", "distances", "opacity_logits", "sh")


@dataclass
class FDEntry:
    name: str
    analytic: float
    numeric: float
    rel_error: float
    status: str  # ok | fail | excluded | unresolved | nonfinite


@dataclass
class FDReport:
    entries: list
    tolerance: float

    @property
    def checked(self):
        return [e for e in self.entries if e.status in ("ok", "fail")]

    @property
    def excluded(self):
        return [e for e in self.entries if e.status == "excluded"]

    @property
    def unresolved(self):
        return [e for e in self.entries if e.status == "unresolved"]

    @property
    def failures(self):
        return [e for e in self.entries if e.status in ("fail", "nonfinite")]

    @property
    def passed(self):
        return not self.failures and not self.unresolved

    @property
    def max_rel_error(self):
        errs = [e.rel_error for e in self.checked]
        return max(errs) if errs else 0.0

    def lines(self):
        for e in self.entries:
            yield (f"param={e.name} analytic={e.analytic:.9e} numeric={e.numeric:.9e} "
                   f"rel_error={e.rel_error:.3e} status={e.status}")


def relative_error(analytic, numeric, floor):
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale if scale > 0 else 0.0


def default_parameters(prims: PrimitiveSet, groups=GROUPS):
    """Every scalar feature of every primitive as (group, index) pairs."""
    out = []
    for g in groups:
        arr = getattr(prims, g)
        for idx in np.ndindex(arr.shape):
            if g == "sh" and idx[1] >= (prims.sh_degree + 1) ** 2:
                continue
            out.append((g, idx))
    return out


def _param_name(group, idx):
    return f"{group}[{','.join(str(i) for i in idx)}]"


def fd_step(theta):
    return max(1e-4 * abs(theta), 1e-6)


def finite_difference_check(prims: PrimitiveSet, camera, target, settings: RenderSettings = None,
                            parameters=None, tolerance=1e-5, ssim_weight=0.2, rel_floor=None,
                            grad_hook=None):
    """Compare analytic loss gradients against central differences.

    The analytic gradient is computed at ``settings.dtype``; the numerical
    reference always runs in float64 with the density normalization frozen at
    its base value.  Each parameter is probed at +-h and +-2h.  If the
    visibility structure (hit faces, sort order, contributor counts, SH clamp
    state or which vertices the screen filter moves) changes anywhere on
    that stencil the parameter is ``excluded``.  A mismatch where the two
    step sizes also disagree means the quotient has not resolved the local
    curvature (typically a silhouette tip just outside the stencil); the step
    is then shrunk by ``REFINE_FACTORS`` until the quotient either matches,
    converges elsewhere (``fail``) or crosses a discontinuity (``excluded``).
    Parameters still moving after the last refinement are ``unresolved``.

    ``rel_floor`` bounds the denominator of the relative error from below;
    by default it is 1e-6 of the largest numerical gradient magnitude.  The
    denominator is also kept above resolution / tolerance, where resolution
    is the round-off of the difference quotient (a few ulps of the loss over
    h), so gradients the quotient cannot resolve are judged in absolute terms.
    ``grad_hook`` may edit the analytic gradients (used as a negative control).
    """
    from .trainer import loss as loss_fn

    settings = settings or RenderSettings()
    base64 = prims.astype(np.float64)
    ref_settings = RenderSettings(**{**settings.__dict__, "dtype": "float64"})
    denom = density_denominator(prims.kind, base64.effective_distances(settings.use_filter_3d))
    target = np.asarray(target, dtype=np.float64)

    res = render(prims, camera, settings)
    _, g_img = loss_fn(res.color, target, ssim_weight)
    grads = backward(res, g_img, prims.astype(np.dtype(settings.dtype)))
    if grad_hook is not None:
        grads = grad_hook(grads) or grads

    base_sig = signature_of(base64, camera, ref_settings, denom)

    parameters = parameters if parameters is not None else default_parameters(prims)

    def probe(group, idx, theta, h, ks):
        values = {}
        same = True
        for k in ks:
            p = base64.copy()
            getattr(p, group)[idx] = theta + k * h
            r = render(p, camera, ref_settings, denom)
            values[k], _ = loss_fn(r.color, target, ssim_weight)
            same = same and _signatures_equal(visibility_signature(r), base_sig)
        # round-off in the loss limits what the quotient can resolve
        resolution = FD_NOISE * np.finfo(np.float64).eps * max(abs(values[ks[0]]), abs(values[ks[1]])) / h
        return values, same, resolution

    raw = []
    for group, idx in parameters:
        theta = float(getattr(base64, group)[idx])
        h = fd_step(theta)
        values, same, resolution = probe(group, idx, theta, h, (1, -1, 2, -2))
        numeric = (values[1] - values[-1]) / (2 * h)
        coarse = (values[2] - values[-2]) / (4 * h)
        analytic = float(getattr(grads, group)[idx])
        raw.append([group, idx, theta, h, analytic, numeric, coarse, same, resolution])

    finite = [abs(r[5]) for r in raw if np.isfinite(r[5])]
    floor = rel_floor if rel_floor is not None else 1e-6 * (max(finite) if finite else 0.0)
    entries = []
    for group, idx, theta, h, a, n, coarse, same, resolution in raw:
        name = _param_name(group, idx)
        if not (np.isfinite(a) and np.isfinite(n)):
            entries.append(FDEntry(name, a, n, float("inf"), "nonfinite"))
            continue
        if not same:
            entries.append(FDEntry(name, a, n, relative_error(a, n, floor), "excluded"))
            continue
        err = relative_error(a, n, max(floor, resolution / tolerance))
        status = "ok" if err <= tolerance else "fail"
        if status == "fail" and relative_error(coarse, n, floor) / 3.0 > 0.5 * tolerance:
            # truncation error dominates: shrink the step until the quotient settles
            status = "unresolved"
            prev = n
            for factor in REFINE_FACTORS:
                hr = h / factor
                values, same_r, res_r = probe(group, idx, theta, hr, (1, -1))
                if not same_r:
                    status = "excluded"
                    break
                n = (values[1] - values[-1]) / (2 * hr)
                err = relative_error(a, n, max(floor, res_r / tolerance))
                if err <= tolerance:
                    status = "ok"
                    break
                if relative_error(prev, n, floor) <= 0.5 * tolerance:
                    status = "fail"  # converged away from the analytic value
                    break
                prev = n
        entries.append(FDEntry(name, a, n, err, status))
    return FDReport(entries, tolerance)
