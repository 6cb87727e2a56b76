"""Random scenes, camera rigs and on-disk fixture scenes for tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .population import random_rotations
from .primitives import OCTAHEDRON, PrimitiveSet, matrix_to_quat, n_distances
from .projection import Camera


def random_scene(kind=OCTAHEDRON, n=64, rng=None, bounds=1.0, size=(0.1, 0.3),
                 opacity=(0.5, 0.95), view_dependent=0.0, non_overlapping=False,
                 dtype=np.float64, max_tries=10000):
    """Random primitives inside the cube [-bounds, bounds]^3.

    With ``non_overlapping`` the bounding spheres of all primitives are kept
    disjoint by rejection sampling.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    nd = n_distances(kind)
    centers = []
    dists = []
    tries = 0
    while len(centers) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could only place {len(centers)} of {n} primitives")
        c = rng.uniform(-bounds, bounds, 3)
        d = rng.uniform(size[0], size[1], nd)
        if non_overlapping:
            r = d.max()
            if any(np.linalg.norm(c - c2) < r + d2.max() for c2, d2 in zip(centers, dists)):
                continue
        centers.append(c)
        dists.append(d)
    rgb = rng.uniform(0.05, 0.95, (n, 3))
    prims = PrimitiveSet.from_features(kind, np.array(centers), random_rotations(n, rng),
                                       np.array(dists), rng.uniform(*opacity, n), rgb=rgb,
                                       dtype=dtype)
    if view_dependent:
        prims.sh[:, 1:, :] = rng.normal(0, view_dependent, (n, 15, 3)).astype(dtype)
    return prims


def fibonacci_sphere(n):
    """Near-uniform unit directions."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5**0.5) * k
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def sphere_rig(n_views=40, radius=4.0, width=128, height=128, fov_deg=50.0, target=(0, 0, 0)):
    """Cameras on a sphere, all looking at ``target``."""
    cams = []
    target = np.asarray(target, float)
    for i, d in enumerate(fibonacci_sphere(n_views)):
        up = (0.0, -1.0, 0.0) if abs(d[1]) < 0.95 else (0.0, 0.0, 1.0)
        cams.append(Camera.look_at(target + radius * d, target, up=up, fov_deg=fov_deg,
                                   width=width, height=height, name=f"view_{i:03d}.png"))
    return cams


def render_views(prims, cameras, background=(0.0, 0.0, 0.0), oracle=True):
    """Ground-truth images, by default from the brute-force reference renderer."""
    from .oracle import render_exact
    from .raster import RenderSettings, render

    out = []
    for cam in cameras:
        if oracle:
            img = render_exact(prims, cam, background).color
        else:
            img = render(prims, cam, RenderSettings(background=background, dtype="float64")).color
        out.append(np.clip(img, 0.0, 1.0))
    return out


def write_colmap_scene(root, cameras, images, points, colors):
    """Write a COLMAP text scene (one PINHOLE camera per view) plus PNG images."""
    from .sceneio import save_png

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for i, c in enumerate(cameras, start=1):
            vals = " ".join(repr(float(v)) for v in (c.fx, c.fy, c.cx, c.cy))
            fh.write(f"{i} PINHOLE {c.width} {c.height} {vals}\n")
    with open(root / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, c in enumerate(cameras, start=1):
            pose = " ".join(repr(float(v)) for v in (*matrix_to_quat(c.rotation), *c.translation))
            name = c.name or f"view_{i:03d}.png"
            fh.write(f"{i} {pose} {i} {name}\n\n")
    with open(root / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        rgb8 = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(int)
        for i, (p, c) in enumerate(zip(points, rgb8), start=1):
            xyz = " ".join(repr(float(v)) for v in p)
            fh.write(f"{i} {xyz} {c[0]} {c[1]} {c[2]} 0.0\n")
    for i, (c, img) in enumerate(zip(cameras, images), start=1):
        save_png(img, root / "images" / (c.name or f"view_{i:03d}.png"))
    return root


def make_fixture_scene(root, kind=OCTAHEDRON, n_prims=8, n_views=6, size=32, seed=0,
                       jitter=0.05):
    """Small self-consistent COLMAP scene rendered from a random ground truth."""
    rng = np.random.default_rng(seed)
    gt = random_scene(kind, n_prims, rng, bounds=0.6, size=(0.15, 0.3))
    cams = sphere_rig(n_views, radius=3.0, width=size, height=size)
    images = render_views(gt, cams)
    pts = gt.centers + rng.normal(0, jitter, gt.centers.shape)
    from .appearance import eval_sh

    rgb, _ = eval_sh(gt.sh, np.tile([0.0, 0.0, 1.0], (len(gt), 1)), 0)
    write_colmap_scene(root, cams, images, pts, np.clip(rgb, 0, 1))
    return gt
