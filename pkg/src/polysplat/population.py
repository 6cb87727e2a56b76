"""Population control: initialization, clone/split/prune, opacity reset,
budgeted relocation (MCMC variant) and the 3D smoothing filter."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import comb

from .appearance import rgb_to_sh_dc
from .primitives import (
    OCTAHEDRON,
    PrimitiveSet,
    logit,
    n_distances,
    normalize_rotation,
    quat_to_matrix,
    sigmoid,
    world_size,
)

INIT_DISTANCE_MIN = 1e-5
INIT_DISTANCE_MAX = 0.5
INIT_OPACITY = 0.1
RESET_OPACITY = 0.01
GAUSSIAN_ALIGN = 2.6


@dataclass
class PopulationConfig:
    densify_interval: int = 250
    grad_threshold: float = 1.5e-4
    prune_opacity: float = 0.025
    prune_world_frac: float = 0.4
    prune_screen_px: float = 20.0
    clone_vs_split_frac: float = 0.01
    split_shrink: float = 1.0 / 1.2
    densify_start: int = 500
    densify_stop: int = 15000
    opacity_reset_interval: int = 3000  # 0 disables
    mcmc_enabled: bool = False
    mcmc_cap: int = 0
    mcmc_scale_align: float = GAUSSIAN_ALIGN
    mcmc_dead_opacity: float = 0.005
    mcmc_growth: float = 0.05
    mcmc_noise_lr: float = 5e5
    mcmc_start: int = 500
    mcmc_stop: int = 25000
    smoothing_kappa: float = 0.2

    def __post_init__(self):
        if self.densify_interval <= 0:
            raise ValueError("densify_interval must be positive")
        if not 0 < self.split_shrink <= 1:
            raise ValueError("split_shrink must be in (0, 1]")
        if self.smoothing_kappa < 0:
            raise ValueError("smoothing_kappa must be >= 0")


@dataclass
class DensifyStats:
    """Per-primitive accumulators between densification events."""

    grad_accum: np.ndarray
    count: np.ndarray
    max_screen: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n))

    def update(self, viewspace, visible, screen_size):
        visible = np.asarray(visible, bool)
        self.grad_accum[visible] += np.asarray(viewspace)[visible]
        self.count[visible] += 1
        self.max_screen[visible] = np.maximum(self.max_screen[visible],
                                              np.asarray(screen_size)[visible])

    def mean_grad(self):
        out = np.zeros_like(self.grad_accum)
        seen = self.count > 0
        out[seen] = self.grad_accum[seen] / self.count[seen]
        return out

    def reset(self):
        self.grad_accum[:] = 0
        self.count[:] = 0
        self.max_screen[:] = 0

    def __len__(self):
        return len(self.grad_accum)


@dataclass
class EditScript:
    """How optimizer state follows a population edit.

    Output primitive ``k`` takes the moments of input ``source[k]`` unless
    ``fresh[k]``, in which case they start at zero.
    """

    source: np.ndarray
    fresh: np.ndarray
    counts: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n), np.zeros(n, bool))

    def apply(self, state: np.ndarray) -> np.ndarray:
        out = state[self.source].copy() if len(self.source) else state[:0].copy()
        out[self.fresh] = 0
        return out


# ---------------------------------------------------------------------------


def random_rotations(n, rng):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def init_from_sfm(points, colors, kind=OCTAHEDRON, seed=0, dtype=np.float32, sh_degree=3):
    """One primitive per SfM point, sized by the nearest-neighbor distance."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot initialize from an empty point set")
    if len(colors) != len(points):
        raise ValueError("points and colors differ in length")
    rng = np.random.default_rng(seed)
    if len(points) > 1:
        dist, _ = cKDTree(points).query(points, k=2)
        nn = dist[:, 1]
    else:
        nn = np.full(1, INIT_DISTANCE_MAX)
    nn = np.clip(nn, INIT_DISTANCE_MIN, INIT_DISTANCE_MAX)
    n = len(points)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rgb_to_sh_dc(colors)
    return PrimitiveSet(
        kind,
        points.astype(dtype),
        random_rotations(n, rng).astype(dtype),
        np.repeat(nn[:, None], n_distances(kind), axis=1).astype(dtype),
        np.full(n, logit(INIT_OPACITY)).astype(dtype),
        sh.astype(dtype),
        None,
        sh_degree,
    )


def prune_mask(prims: PrimitiveSet, stats: DensifyStats, config: PopulationConfig, extent,
               screen_rule: bool):
    """Boolean mask of primitives removed by the transparency/size rules."""
    mask = prims.opacities < config.prune_opacity
    mask |= world_size(prims.kind, prims.distances) > config.prune_world_frac * extent
    if screen_rule:
        mask |= stats.max_screen > config.prune_screen_px
    return mask


def split_offsets(kind, distances, rotations, rng, n_samples=2):
    """Child center offsets, (n_samples, N, 3), in world space."""
    n = len(distances)
    if kind == OCTAHEDRON:
        local = rng.standard_normal((n_samples, n, 3)) * distances[None]
        R = quat_to_matrix(normalize_rotation(rotations.astype(np.float64)))
        return np.einsum("nij,snj->sni", R, local)
    std = distances.max(axis=1) / 2.0
    return rng.standard_normal((n_samples, n, 3)) * std[None, :, None]


def densify_and_prune(prims: PrimitiveSet, stats: DensifyStats, iteration: int,
                      config: PopulationConfig, extent: float, rng=None, densify=True,
                      screen_rule=None):
    """Clone small, split large high-gradient primitives, then prune.

    Returns ``(new_set, EditScript)``.  ``screen_rule`` defaults to "after the
    first opacity reset".
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(prims)
    if len(stats) != n:
        raise ValueError("stats do not match the primitive set")
    if screen_rule is None:
        screen_rule = bool(config.opacity_reset_interval) and iteration > config.opacity_reset_interval
    size = world_size(prims.kind, prims.distances)
    if densify:
        cand = stats.mean_grad() > config.grad_threshold
    else:
        cand = np.zeros(n, bool)
    small = size <= config.clone_vs_split_frac * extent
    clone = cand & small
    split = cand & ~small

    keep_ids = np.nonzero(~split)[0]
    clone_ids = np.nonzero(clone)[0]
    split_ids = np.nonzero(split)[0]

    parts = [prims.select(keep_ids), prims.select(clone_ids)]
    source = [keep_ids, clone_ids]
    fresh = [np.zeros(len(keep_ids), bool), np.ones(len(clone_ids), bool)]
    screen = [stats.max_screen[keep_ids], stats.max_screen[clone_ids]]
    if len(split_ids):
        parent = prims.select(split_ids)
        offs = split_offsets(prims.kind, parent.distances, parent.rotations, rng)
        for s in range(2):
            child = parent.copy()
            child.centers = (parent.centers + offs[s]).astype(prims.dtype)
            child.distances = (parent.distances * config.split_shrink).astype(prims.dtype)
            parts.append(child)
            source.append(split_ids)
            fresh.append(np.ones(len(split_ids), bool))
            # children start a new screen-size history
            screen.append(np.zeros(len(split_ids)))
    out = parts[0]
    for p in parts[1:]:
        out = PrimitiveSet.concat(out, p)
    source = np.concatenate(source)
    fresh = np.concatenate(fresh)
    screen = np.concatenate(screen)

    tmp_stats = DensifyStats(np.zeros(len(out)), np.zeros(len(out), np.int64), screen)
    dead = prune_mask(out, tmp_stats, config, extent, screen_rule)
    alive = np.nonzero(~dead)[0]
    out = out.select(alive)
    script = EditScript(source[alive], fresh[alive], {
        "cloned": int(len(clone_ids)), "split": int(len(split_ids)),
        "pruned": int(dead.sum()), "count": int(len(out))})
    if len(out) == 0:
        warnings.warn("population is empty after pruning", RuntimeWarning, stacklevel=2)
    return out, script


def opacity_reset(prims: PrimitiveSet, iteration=None, config: PopulationConfig = None):
    """Clamp every opacity to at most 0.01 (in logit space)."""
    if config is not None and iteration is not None:
        if not config.opacity_reset_interval or iteration % config.opacity_reset_interval:
            return prims
    out = prims.copy()
    cap = logit(RESET_OPACITY)
    out.opacity_logits = np.minimum(out.opacity_logits, np.asarray(cap, out.dtype))
    return out


# ---------------------------------------------------------------------------
# budgeted relocation


def gaussian_stds(distances, align=GAUSSIAN_ALIGN):
    """Standard deviations of the Gaussian a primitive is treated as."""
    return np.asarray(distances) / align


def relocation_update(opacity, distances, ratio):
    """Opacity and distances after splitting one primitive into ``ratio`` copies.

    Chosen so the sum of the copies matches the original when each is
    treated as a Gaussian; distances scale like the Gaussian stds.
    """
    opacity = np.asarray(opacity, dtype=np.float64)
    ratio = np.asarray(ratio, dtype=np.int64)
    new_op = 1.0 - np.power(1.0 - opacity, 1.0 / ratio)
    denom = np.zeros_like(new_op)
    for idx in np.ndindex(new_op.shape):
        r = int(ratio[idx])
        total = 0.0
        for i in range(1, r + 1):
            for k in range(i):
                total += comb(i - 1, k) * (-1) ** k / math.sqrt(k + 1) * new_op[idx] ** (k + 1)
        denom[idx] = total
    coeff = opacity / denom
    return new_op, np.asarray(distances) * coeff[..., None]


def _sample_alive(opacity, n, rng):
    p = opacity / opacity.sum()
    return rng.choice(len(opacity), size=n, replace=True, p=p)


def _relocate_into(prims, targets, rng, config):
    """Apply the ratio update to sampled targets; returns updated copy."""
    out = prims.copy()
    uniq, counts = np.unique(targets, return_counts=True)
    op = prims.opacities[uniq].astype(np.float64)
    new_op, new_d = relocation_update(op, prims.distances[uniq].astype(np.float64), counts + 1)
    new_op = np.clip(new_op, config.mcmc_dead_opacity, 1.0 - 1e-7)
    out.opacity_logits[uniq] = logit(new_op).astype(out.dtype)
    out.distances[uniq] = np.maximum(new_d, 1e-7).astype(out.dtype)
    return out


def check_budget(prims: PrimitiveSet, config: PopulationConfig):
    if config.mcmc_cap < len(prims):
        raise ValueError(f"mcmc_cap {config.mcmc_cap} is below the current population {len(prims)}")


def mcmc_relocate(prims: PrimitiveSet, config: PopulationConfig, rng):
    """Move dead primitives onto live ones and grow toward the cap.

    Returns ``(new_set, EditScript)``; relocated slots and their targets get
    fresh optimizer moments.
    """
    check_budget(prims, config)
    n = len(prims)
    op = prims.opacities.astype(np.float64)
    dead = op <= config.mcmc_dead_opacity
    alive = np.nonzero(~dead)[0]
    fresh = np.zeros(n, bool)
    out = prims
    n_dead = int(dead.sum())
    relocated = 0
    if n_dead and len(alive):
        targets = alive[_sample_alive(op[alive], n_dead, rng)]
        out = _relocate_into(out, targets, rng, config)
        dead_ids = np.nonzero(dead)[0]
        for name in ("centers", "rotations", "distances", "opacity_logits", "sh", "filter_3d"):
            getattr(out, name)[dead_ids] = getattr(out, name)[targets]
        fresh[dead_ids] = True
        fresh[targets] = True
        relocated = n_dead
    source = np.arange(n)
    n_add = max(0, min(config.mcmc_cap, int(math.floor(n * (1.0 + config.mcmc_growth)))) - n)
    added = 0
    if n_add and n:
        op = out.opacities.astype(np.float64)
        targets = _sample_alive(op, n_add, rng)
        out = _relocate_into(out, targets, rng, config)
        fresh[targets] = True
        out = PrimitiveSet.concat(out, out.select(targets))
        source = np.concatenate([source, targets])
        fresh = np.concatenate([fresh, np.ones(n_add, bool)])
        added = n_add
    return out, EditScript(source, fresh, {"relocated": relocated, "added": added,
                                           "count": len(out)})


def mcmc_noise(prims: PrimitiveSet, position_lr, config: PopulationConfig, rng):
    """Opacity-gated exploration noise shaped by each primitive's Gaussian."""
    out = prims.copy()
    if len(prims) == 0:
        return out
    std = gaussian_stds(prims.distances.astype(np.float64), config.mcmc_scale_align)
    if prims.kind != OCTAHEDRON:
        std = np.repeat(std.max(axis=1, keepdims=True), 3, axis=1)
    R = quat_to_matrix(normalize_rotation(prims.rotations.astype(np.float64)))
    cov = np.einsum("nij,nj,nkj->nik", R, std**2, R)
    gate = sigmoid(100.0 * ((1.0 - prims.opacities.astype(np.float64)) - 0.995))
    eps = rng.standard_normal((len(prims), 3))
    noise = np.einsum("nij,nj->ni", cov, eps) * (gate * config.mcmc_noise_lr * position_lr)[:, None]
    out.centers = (prims.centers + noise).astype(prims.dtype)
    return out


def mcmc_step(prims: PrimitiveSet, iteration: int, config: PopulationConfig, rng,
              position_lr=0.0):
    """Noise every call; relocation and growth on the densification schedule."""
    if not config.mcmc_enabled:
        return prims, EditScript.identity(len(prims))
    check_budget(prims, config)
    script = EditScript.identity(len(prims))
    if (config.mcmc_start <= iteration <= config.mcmc_stop
            and iteration % config.densify_interval == 0):
        prims, script = mcmc_relocate(prims, config, rng)
    if position_lr:
        prims = mcmc_noise(prims, position_lr, config, rng)
    return prims, script


# ---------------------------------------------------------------------------
# 3D smoothing filter


def update_smoothing_filter(prims: PrimitiveSet, cameras, kappa=0.2, margin=0.15):
    """Per-primitive 3D filter size from the finest sampling rate among cameras.

    A camera sees a primitive when its center lies in front of the near plane
    and projects inside the image enlarged by ``margin`` on each side.
    Primitives seen by none fall back to the nearest camera.
    """
    cameras = list(cameras)
    if not cameras:
        raise ValueError("update_smoothing_filter needs at least one camera")
    n = len(prims)
    c = prims.centers.astype(np.float64)
    best = np.full(n, np.inf)
    nearest = np.full(n, np.inf)
    nearest_rate = np.zeros(n)
    for cam in cameras:
        p = cam.world_to_camera(c)
        z = p[:, 2]
        focal = max(cam.fx, cam.fy)
        dist = np.linalg.norm(c - cam.position, axis=1)
        closer = dist < nearest
        nearest[closer] = dist[closer]
        nearest_rate[closer] = np.maximum(z[closer], cam.znear) / focal
        front = z > cam.znear
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * p[:, 0] / z + cam.cx
            v = cam.fy * p[:, 1] / z + cam.cy
        mx = margin * cam.width
        my = margin * cam.height
        seen = front & (u >= -mx) & (u <= cam.width + mx) & (v >= -my) & (v <= cam.height + my)
        best[seen] = np.minimum(best[seen], z[seen] / focal)
    unseen = ~np.isfinite(best)
    if np.any(unseen):
        warnings.warn(f"{int(unseen.sum())} primitives are visible from no training camera",
                      RuntimeWarning, stacklevel=2)
        best[unseen] = nearest_rate[unseen]
    return (kappa * best).astype(prims.dtype)
