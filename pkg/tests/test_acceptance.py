"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import time

import numpy as np
import pytest

from conftest import record_acceptance
from polysplat.appearance import eval_sh
from polysplat.backward import finite_difference_check
from polysplat.cli import bench_report
from polysplat.oracle import render_exact
from polysplat.population import (
    GAUSSIAN_ALIGN,
    DensifyStats,
    PopulationConfig,
    densify_and_prune,
    gaussian_stds,
    init_from_sfm,
    split_offsets,
)
from polysplat.primitives import OCTAHEDRON, TETRAHEDRON, PrimitiveSet, world_size
from polysplat.projection import APPROXIMATE, EXACT, Camera, project_primitives
from polysplat.raster import RenderSettings, render
from polysplat.synthetic import random_scene, render_views, sphere_rig
from polysplat.trainer import Dataset, EventLog, TrainConfig, evaluate, train_loop

pytestmark = pytest.mark.slow


def check(number, title, ok, detail):
    record_acceptance(number, title, ok, detail)
    assert ok, f"criterion {number} ({title}): {detail}"


# ---------------------------------------------------------------- 1


def _fd_scene(seed):
    rng = np.random.default_rng(seed)
    kind = (OCTAHEDRON, TETRAHEDRON)[seed % 2]
    n = int(rng.integers(3, 11))
    nd = 3 if kind == OCTAHEDRON else 1
    prims = PrimitiveSet.from_features(kind, rng.uniform(-0.7, 0.7, (n, 3)),
                                       rng.normal(size=(n, 4)), rng.uniform(0.2, 0.5, (n, nd)),
                                       rng.uniform(0.3, 0.9, n), rgb=rng.uniform(0, 1, (n, 3)))
    prims.sh[:, 1:, :] = rng.normal(0, 0.1, (n, 15, 3))
    prims.filter_3d[:] = 0.01
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    cam = Camera.look_at(eye, np.zeros(3), width=32, height=32, fov_deg=50.0)
    target = rng.uniform(0, 1, (32, 32, 3))
    mode = (APPROXIMATE, EXACT)[(seed // 2) % 2]
    return prims, cam, target, mode


def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = {"float32": 0.0, "float64": 0.0}
    failures = []
    n_checked = n_excluded = 0
    for seed in range(20):
        prims, cam, target, mode = _fd_scene(seed)
        for dtype, tol in (("float32", 1e-3), ("float64", 1e-5)):
            settings = RenderSettings(projection=mode, dtype=dtype, background=(0.1, 0.2, 0.3))
            rep = finite_difference_check(prims.astype(dtype), cam, target, settings,
                                          tolerance=tol)
            n_checked += len(rep.checked)
            n_excluded += len(rep.excluded)
            worst[dtype] = max(worst[dtype], rep.max_rel_error)
            if not rep.passed:
                failures.append((seed, dtype, [e.name for e in rep.failures + rep.unresolved]))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 300
    check(1, "gradient correctness", ok,
          f"20 scenes x 2 precisions, {n_checked} parameters checked, {n_excluded} excluded, "
          f"max rel err single {worst['float32']:.2e} double {worst['float64']:.2e}, "
          f"{elapsed:.0f}s, failures {failures}")


# ---------------------------------------------------------------- 2


def test_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    cams = sphere_rig(10, 4.0, 128, 128)
    for s in range(10):
        kind = (OCTAHEDRON, TETRAHEDRON)[s % 2]
        prims = random_scene(kind, 40, np.random.default_rng(100 + s), non_overlapping=True)
        ref = render_exact(prims, cams[s]).color
        out = render(prims, cams[s], RenderSettings(projection=EXACT, filter_2d=0.0,
                                                    dtype="float64")).color
        worst = max(worst, float(np.abs(out - ref).max()))
    elapsed = time.perf_counter() - t0
    check(2, "oracle equivalence", worst < 1e-5 and elapsed < 120,
          f"10 scenes at 128x128, max abs diff {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_axis_ray_alpha_identity():
    rng = np.random.default_rng(7)
    size = 33
    cam = Camera(60.0, 60.0, size / 2, size / 2, size, size, np.eye(3), [0.0, 0.0, 6.0])
    worst = 0.0
    for _ in range(100):
        alpha = rng.uniform(0.01, 0.99)
        d = rng.uniform(0.05, 1.0)
        prims = PrimitiveSet.from_features(OCTAHEDRON, [[0, 0, 0]], [1.0, 0, 0, 0], [[d, d, d]],
                                           [alpha], rgb=[[1, 1, 1]], dtype=np.float64)
        for mode in (APPROXIMATE, EXACT):
            res = render(prims, cam, RenderSettings(projection=mode, use_filter_3d=False,
                                                    dtype="float64"))
            worst = max(worst, abs(res.alpha[size // 2, size // 2] - 0.99 * alpha))
    check(3, "axis-ray alpha identity", worst < 1e-6,
          f"100 draws, both projection modes, max |alpha - 0.99 a| {worst:.2e}")


# ---------------------------------------------------------------- 4


def test_early_stop_bound():
    worst = 0.0
    min_t = 1.0
    for s in range(3):
        prims = random_scene(OCTAHEDRON, 2000, np.random.default_rng(s), opacity=(0.3, 0.95))
        for cam in sphere_rig(3, 4.0, 128, 128):
            a = render(prims, cam, RenderSettings(dtype="float64"))
            b = render(prims, cam, RenderSettings(dtype="float64", stop_transmittance=0.0))
            worst = max(worst, float(np.abs(a.color - b.color).max()))
            min_t = min(min_t, float(b.final_T.min()))
    check(4, "early-stop bound", worst < 1e-3 and min_t < 1e-3,
          f"3 scenes of 2000 primitives x 3 views, max diff {worst:.2e}, "
          f"min transmittance without stop {min_t:.1e}")


# ---------------------------------------------------------------- 5

# Desk-scale schedule: 5000 iterations instead of the full-length one, so the
# rotation, distance and position rates are raised tenfold.  Densification
# starts once the initial primitives have settled and stops at half the
# schedule; its threshold is scaled to the small images (the statistic of a
# converged primitive is about 4e-3 at 128x128).
RECOVERY_CONFIG = dict(
    iterations=5000,
    projection=EXACT,
    lr_rotation=1e-2,
    lr_distance=1e-3 / 2.6,
    lr_position_init=1.6e-3,
    lr_position_final=1.6e-5,
    population=PopulationConfig(densify_start=2000, densify_stop=2500, grad_threshold=5e-2,
                                opacity_reset_interval=0),
)


def _recover(kind):
    rng = np.random.default_rng(0)
    gt = random_scene(kind, 64, rng)
    cams = sphere_rig(40, 4.0, 128, 128)
    images = render_views(gt, cams)
    test = list(range(0, 40, 8))
    train = [i for i in range(40) if i not in test]
    rgb, _ = eval_sh(gt.sh, np.tile([0.0, 0.0, 1.0], (64, 1)), 0)
    points = gt.centers + rng.normal(0, 0.02, gt.centers.shape)
    init = init_from_sfm(points, np.clip(rgb, 0, 1), kind, seed=0)
    cfg = TrainConfig(**RECOVERY_CONFIG)
    log = EventLog()
    out = train_loop(Dataset([cams[i] for i in train], [images[i] for i in train]), cfg, init,
                     log)
    rep = evaluate(out, [cams[i] for i in test], [images[i] for i in test], cfg.settings())
    return rep.mean_psnr, len(log.of("population")), len(out)


@pytest.mark.parametrize("kind,target", [(OCTAHEDRON, 35.0), (TETRAHEDRON, 32.0)])
def test_synthetic_recovery(kind, target):
    t0 = time.perf_counter()
    psnr, n_events, count = _recover(kind)
    elapsed = time.perf_counter() - t0
    check(5, f"synthetic recovery ({kind})", psnr >= target and n_events > 0 and elapsed < 1800,
          f"held-out PSNR {psnr:.2f} dB (target {target}), {n_events} population events, "
          f"{count} primitives, {elapsed:.0f}s")


# ---------------------------------------------------------------- 6


def test_population_rules():
    cfg = PopulationConfig()
    defaults = (cfg.prune_opacity == 0.025 and cfg.prune_world_frac == 0.4
                and cfg.prune_screen_px == 20.0 and cfg.grad_threshold == 1.5e-4
                and cfg.densify_interval == 250 and cfg.clone_vs_split_frac == 0.01
                and cfg.split_shrink == 1 / 1.2)

    extent = 10.0
    ops = [0.024, 0.026, 0.9, 0.9, 0.9, 0.9, 0.9]
    d = [[0.2] * 3, [0.2] * 3, [2.1] * 3, [1.9] * 3, [0.04] * 3, [0.06] * 3, [0.3] * 3]
    prims = PrimitiveSet.from_features(OCTAHEDRON, np.zeros((7, 3)), np.tile([1.0, 0, 0, 0], (7, 1)),
                                       d, ops, dtype=np.float64)
    stats = DensifyStats.zeros(7)
    stats.count[:] = 1
    stats.grad_accum[4:6] = 1.6e-4  # world size 0.08 clones, 0.12 splits
    stats.grad_accum[6] = 1.4e-4    # below threshold
    stats.max_screen[6] = 21.0
    before, _ = densify_and_prune(prims, stats, 1000, cfg, extent, np.random.default_rng(0))
    after, _ = densify_and_prune(prims, stats, 3250, cfg, extent, np.random.default_rng(0))
    dist = before.distances[:, 0]
    rules = (
        len(before) == 7  # 0.024 and world 4.2 pruned; one clone, one split into two
        and not np.any(np.isclose(dist, 0.2) & np.isclose(before.opacities, 0.024))
        and np.isclose(dist, 1.9).sum() == 1 and not np.isclose(dist, 2.1).any()
        and np.isclose(dist, 0.04).sum() == 2
        and np.isclose(dist, 0.06 / 1.2).sum() == 2
        and len(after) == len(before) - 1  # screen rule after the first reset
    )

    rng = np.random.default_rng(11)
    std_ok = True
    ratios = []
    q = np.array([[0.9, 0.1, -0.3, 0.2]])
    for kind, dd, expect in ((OCTAHEDRON, [[0.3, 0.1, 0.05]], [0.3, 0.1, 0.05]),
                             (TETRAHEDRON, [[0.2, 0.4, 0.1, 0.3]], [0.2, 0.2, 0.2])):
        offs = split_offsets(kind, np.array(dd), q, rng, n_samples=10_000)[:, 0, :]
        if kind == OCTAHEDRON:
            from polysplat.primitives import normalize_rotation, quat_to_matrix

            R = quat_to_matrix(normalize_rotation(q))[0]
            offs = offs @ R  # back to the primitive frame
        r = offs.std(axis=0) / np.array(expect)
        ratios.extend(r)
        std_ok &= bool(np.all(np.abs(r - 1) < 0.05))
    ws = world_size(OCTAHEDRON, np.array([[0.5, 0.1, 0.1]]))[0] == 1.0
    ok = defaults and rules and std_ok and ws
    check(6, "population rules", ok,
          f"defaults {defaults}, rule outcomes {rules}, split std ratios "
          f"{np.round(ratios, 3).tolist()}")


# ---------------------------------------------------------------- 7


def test_mcmc_budget():
    rng = np.random.default_rng(5)
    gt = random_scene(OCTAHEDRON, 24, rng, bounds=0.7)
    cams = sphere_rig(16, 3.5, 48, 48)
    images = render_views(gt, cams)
    init = init_from_sfm(gt.centers + rng.normal(0, 0.05, gt.centers.shape),
                         np.full((24, 3), 0.5), OCTAHEDRON, seed=1)
    n0 = len(init)
    pop = PopulationConfig(mcmc_enabled=True, mcmc_cap=n0)
    cfg = TrainConfig(iterations=2000, population=pop, checkpoint_iterations=tuple(range(1, 2001)))
    counts = []
    log = EventLog()
    train_loop(Dataset(cams, images), cfg, init, log, lambda it, p: counts.append(len(p)))
    relocated = sum(r.get("relocated", 0) for r in log.of("population"))
    d = np.array([[0.26, 0.52, 2.6]])
    align = (GAUSSIAN_ALIGN == 2.6 and pop.mcmc_scale_align == 2.6
             and np.array_equal(gaussian_stds(d), d / 2.6))
    ok = len(counts) == 2000 and max(counts) <= n0 and align
    check(7, "MCMC budget", ok,
          f"cap {n0}, max population {max(counts)} over {len(counts)} iterations, "
          f"{relocated} relocations, alignment 2.6 {align}")


# ---------------------------------------------------------------- 8


def test_depth_mode():
    size = 33
    cam = Camera(120.0, 120.0, size / 2, size / 2, size, size, np.eye(3), [0.0, 0.0, 6.0])
    prims = PrimitiveSet.from_features(OCTAHEDRON, [[0.05, -0.02, 0.1]], [0.9, 0.2, -0.1, 0.3],
                                       [[0.6, 0.45, 0.5]], [0.98], dtype=np.float64)
    ref = render_exact(prims, cam)
    out = render(prims, cam, RenderSettings(projection=EXACT, dtype="float64"))
    both = ~np.isnan(ref.depth) & ~np.isnan(out.depth)
    single_err = float(np.abs(out.depth[both] - ref.depth[both]).max())
    same_mask = bool(np.array_equal(np.isnan(ref.depth), np.isnan(out.depth)))

    l1 = []
    cams = sphere_rig(8, 4.0, 128, 128)
    for s in range(8):
        scene = random_scene((OCTAHEDRON, TETRAHEDRON)[s % 2], 40, np.random.default_rng(200 + s),
                             non_overlapping=True)
        a = render_exact(scene, cams[s]).depth
        b = render(scene, cams[s], RenderSettings(projection=EXACT, dtype="float64")).depth
        m = ~np.isnan(a) & ~np.isnan(b)
        l1.append(float(np.abs(a[m] - b[m]).mean()))
    ok = single_err < 1e-4 and same_mask and both.sum() > 50 and max(l1) < 1e-3
    check(8, "depth mode", ok,
          f"single primitive: {both.sum()} pixels, max err {single_err:.1e}; "
          f"random scenes depth L1 max {max(l1):.1e}")


# ---------------------------------------------------------------- 9


def test_performance_sanity():
    prims = random_scene(OCTAHEDRON, 10_000, np.random.default_rng(0), size=(0.01, 0.05))
    cam = sphere_rig(1, 4.0, 256, 256)[0]
    render(prims, cam)
    render_exact(prims, sphere_rig(1, 4.0, 8, 8)[0])  # compile
    t0 = time.perf_counter()
    render(prims, cam)
    t_tiled = time.perf_counter() - t0
    t0 = time.perf_counter()
    render_exact(prims, cam)
    t_oracle = time.perf_counter() - t0
    speedup = t_oracle / t_tiled

    rep = bench_report(prims, sphere_rig(4, 4.0, 256, 256), RenderSettings())
    keys = ("frustum", "tile_list", "iterated", "intersected")
    counters_ok = all(all(k in v for k in keys) and v["intersected"] <= v["iterated"]
                      for v in rep["views"])
    check(9, "performance sanity", speedup >= 5 and counters_ok,
          f"tiled {t_tiled * 1e3:.0f} ms vs oracle {t_oracle * 1e3:.0f} ms ({speedup:.1f}x), "
          f"counters per view ok {counters_ok}")


# ---------------------------------------------------------------- 10


def test_ray_space_error_scaling():
    cam = Camera(200.0, 200.0, 64.0, 64.0, 128, 128, np.eye(3), [0.0, 0.0, 0.0])
    sizes = np.geomspace(0.01, 0.3, 8)
    errors = []
    for s in sizes:
        prims = PrimitiveSet.from_features(OCTAHEDRON, [[0.4, -0.3, 5.0]], [0.8, 0.3, 0.4, -0.2],
                                           [s * np.array([1.0, 0.7, 0.5])], [0.5],
                                           dtype=np.float64)
        a = project_primitives(prims, cam, APPROXIMATE, use_filter_3d=False).verts_ray
        b = project_primitives(prims, cam, EXACT, use_filter_3d=False).verts_ray
        errors.append(float(np.abs(a - b).max()))
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    check(10, "ray-space error scaling", abs(slope - 2.0) <= 0.2,
          f"log-log slope {slope:.3f} over sizes {sizes[0]:.2f}..{sizes[-1]:.2f} at depth 5")
