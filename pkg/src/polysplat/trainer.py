"""Loss, Adam with parameter groups, learning-rate schedules and the loop."""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import metrics
from .backward import backward
from .population import (
    DensifyStats,
    EditScript,
    PopulationConfig,
    check_budget,
    densify_and_prune,
    mcmc_step,
    opacity_reset,
    update_smoothing_filter,
)
from .primitives import DISTANCE_FLOOR, PrimitiveSet, normalize_rotation
from .projection import APPROXIMATE, Camera
from .raster import RenderSettings, render

GROUPS = ("centers", "sh_dc", "sh_rest", "opacity_logits", "rotations", "distances")


@dataclass
class TrainConfig:
    iterations: int = 30000
    lr_color: float = 2.5e-3
    lr_sh: float = 1.25e-4
    lr_opacity: float = 2.5e-2
    lr_rotation: float = 1e-3
    lr_distance: float = 1e-4 / 2.6  # times scene extent
    lr_position_init: float = 1.6e-4  # times scene extent
    lr_position_final: float = 1.6e-6
    ssim_weight: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    projection: str = APPROXIMATE
    filter_2d: bool = True
    filter_3d: bool = True
    precision: str = "float32"
    sh_degree: int = 3
    sh_interval: int = 1000
    extent_mode: str = "mean"  # mean | pairwise
    log_interval: int = 100
    checkpoint_iterations: tuple = ()
    population: PopulationConfig = field(default_factory=PopulationConfig)

    def __post_init__(self):
        if isinstance(self.population, dict):
            self.population = PopulationConfig(**self.population)
        for name in ("lr_color", "lr_sh", "lr_opacity", "lr_rotation", "lr_distance",
                     "lr_position_init", "lr_position_final"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim_weight must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.extent_mode not in ("mean", "pairwise"):
            raise ValueError(f"unknown extent_mode {self.extent_mode!r}")
        self.background = tuple(float(b) for b in self.background)
        self.checkpoint_iterations = tuple(int(i) for i in self.checkpoint_iterations)

    def settings(self) -> RenderSettings:
        return RenderSettings(projection=self.projection,
                              filter_2d=0.1 if self.filter_2d else 0.0,
                              use_filter_3d=self.filter_3d, background=self.background,
                              dtype=self.precision)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SceneExtent:
    extent: float
    center: np.ndarray

    @classmethod
    def from_cameras(cls, cameras, mode="mean"):
        pos = np.array([c.position for c in cameras], dtype=np.float64).reshape(-1, 3)
        if len(pos) == 0:
            raise ValueError("scene extent needs at least one camera")
        center = pos.mean(axis=0)
        if mode == "mean":
            extent = float(np.max(np.linalg.norm(pos - center, axis=1)))
        elif mode == "pairwise":
            diff = pos[:, None] - pos[None]
            extent = float(np.max(np.linalg.norm(diff, axis=-1)))
        else:
            raise ValueError(f"unknown extent mode {mode!r}")
        if extent <= 0:
            # single or coincident cameras: fall back to unit scale
            extent = 1.0
        return cls(extent, center)


def loss(rendered, target, ssim_weight=0.2):
    """(1 - w) * L1 + w * (1 - SSIM) and its gradient w.r.t. ``rendered``."""
    a = np.asarray(rendered)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    dtype = np.result_type(a.dtype, np.float32)
    a = a.astype(dtype)
    b = b.astype(dtype)
    diff = a - b
    l1 = float(np.abs(diff).mean())
    g = (1.0 - ssim_weight) * np.sign(diff) / diff.size
    value = (1.0 - ssim_weight) * l1
    if ssim_weight:
        s, gs = metrics.ssim(a, b, return_grad=True)
        value += ssim_weight * (1.0 - s)
        g = g - ssim_weight * gs
    return value, g.astype(dtype)


def position_lr(iteration, config: TrainConfig, extent=1.0):
    """Log-linear decay of the center learning rate over the run."""
    lr0 = config.lr_position_init * extent
    lr1 = config.lr_position_final * extent
    if config.iterations <= 0:
        return lr0
    t = min(max(iteration / config.iterations, 0.0), 1.0)
    return math.exp((1.0 - t) * math.log(lr0) + t * math.log(lr1))


def group_lrs(iteration, config: TrainConfig, extent):
    return {
        "centers": position_lr(iteration, config, extent),
        "sh_dc": config.lr_color,
        "sh_rest": config.lr_sh,
        "opacity_logits": config.lr_opacity,
        "rotations": config.lr_rotation,
        "distances": config.lr_distance * extent,
    }


def _views(prims: PrimitiveSet):
    return {
        "centers": prims.centers,
        "sh_dc": prims.sh[:, 0:1],
        "sh_rest": prims.sh[:, 1:],
        "opacity_logits": prims.opacity_logits,
        "rotations": prims.rotations,
        "distances": prims.distances,
    }


def _grad_views(grads):
    return {
        "centers": grads.centers,
        "sh_dc": grads.sh[:, 0:1],
        "sh_rest": grads.sh[:, 1:],
        "opacity_logits": grads.opacity_logits,
        "rotations": grads.rotations,
        "distances": grads.distances,
    }


class Adam:
    """Adam over named parameter groups with per-primitive first axis."""

    def __init__(self, prims: PrimitiveSet, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in _views(prims).items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in _views(prims).items()}

    def apply_edit(self, script: EditScript):
        for store in (self.m, self.v):
            for k in store:
                store[k] = script.apply(store[k])

    def reset_group(self, name):
        self.m[name][...] = 0
        self.v[name][...] = 0

    def step(self, params: dict, grads: dict, lrs: dict):
        """In-place update of ``params``; returns names of skipped groups."""
        self.step_count += 1
        t = self.step_count
        skipped = []
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.all(np.isfinite(g)):
                skipped.append(name)
                warnings.warn(f"non-finite gradient in group {name!r}; step skipped",
                              RuntimeWarning, stacklevel=2)
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= update.astype(p.dtype)
        return skipped


def adam_step(prims: PrimitiveSet, grads, optimizer: Adam, lrs: dict):
    """One optimizer step followed by the distance clamp and quaternion renormalization."""
    skipped = optimizer.step(_views(prims), _grad_views(grads), lrs)
    np.maximum(prims.distances, DISTANCE_FLOOR, out=prims.distances)
    prims.rotations[...] = normalize_rotation(prims.rotations)
    return skipped


@dataclass
class Dataset:
    cameras: list
    images: list
    points: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("every camera needs exactly one image")
        for cam, img in zip(self.cameras, self.images):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"image shape {img.shape[:2]} does not match camera "
                                 f"{cam.name or '?'} ({cam.height}, {cam.width})")
        if not self.names:
            self.names = [c.name or f"view_{i:04d}" for i, c in enumerate(self.cameras)]


class EventLog:
    """Line-delimited JSON records, kept in memory and optionally streamed."""

    def __init__(self, stream=None):
        self.records = []
        self.stream = stream

    def emit(self, kind, **fields):
        rec = {"event": kind, **fields}
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(json.dumps(rec, default=float) + "\n")
            self.stream.flush()

    def of(self, kind):
        return [r for r in self.records if r["event"] == kind]


def train_loop(data: Dataset, config: TrainConfig, prims: PrimitiveSet, log: EventLog = None,
               on_checkpoint: Callable = None, extent: SceneExtent = None):
    """Optimize ``prims`` against the training views; returns the final set."""
    log = log if log is not None else EventLog()
    pop = config.population
    rng = np.random.default_rng(config.seed)
    settings = config.settings()
    dtype = np.dtype(config.precision)
    prims = prims.astype(dtype)
    prims.sh_degree = 0 if config.iterations else min(prims.sh_degree, config.sh_degree)
    extent = extent or SceneExtent.from_cameras(data.cameras, config.extent_mode)
    scale = extent.extent
    if len(prims) and config.filter_3d and config.iterations:
        prims.filter_3d = update_smoothing_filter(prims, data.cameras, pop.smoothing_kappa)
    if pop.mcmc_enabled:
        check_budget(prims, pop)
    optimizer = Adam(prims, config.adam_beta1, config.adam_beta2, config.adam_eps)
    stats = DensifyStats.zeros(len(prims))
    n_views = len(data.cameras)
    order = []
    targets = [np.asarray(im, dtype=dtype) for im in data.images]
    log.emit("start", count=len(prims), extent=scale, config=config.digest())
    t_start = time.perf_counter()
    recent = []
    for it in range(1, config.iterations + 1):
        if it % config.sh_interval == 0 and prims.sh_degree < config.sh_degree:
            prims.sh_degree += 1
        if not order:
            order = list(rng.permutation(n_views))
        view = order.pop()
        t0 = time.perf_counter()
        res = render(prims, data.cameras[view], settings)
        value, g_img = loss(res.color, targets[view], config.ssim_weight)
        grads = backward(res, g_img, prims)
        t1 = time.perf_counter()
        lr_pos = position_lr(it, config, scale)
        lrs = group_lrs(it, config, scale)
        skipped = adam_step(prims, grads, optimizer, lrs)
        if skipped:
            log.emit("warning", iteration=it, skipped=skipped)
        stats.update(grads.viewspace, grads.visible, grads.screen_size)
        recent.append(value)

        if pop.mcmc_enabled:
            prims, script = mcmc_step(prims, it, pop, rng, lr_pos)
            if not np.array_equal(script.source, np.arange(len(script.source))) or script.fresh.any():
                optimizer.apply_edit(script)
                stats = DensifyStats.zeros(len(prims))
                if config.filter_3d:
                    prims.filter_3d = update_smoothing_filter(prims, data.cameras,
                                                              pop.smoothing_kappa)
                log.emit("population", iteration=it, **script.counts)
        elif pop.densify_start <= it <= pop.densify_stop and it % pop.densify_interval == 0:
            prims, script = densify_and_prune(prims, stats, it, pop, scale, rng)
            optimizer.apply_edit(script)
            stats = DensifyStats.zeros(len(prims))
            if config.filter_3d and len(prims):
                prims.filter_3d = update_smoothing_filter(prims, data.cameras, pop.smoothing_kappa)
            log.emit("population", iteration=it, **script.counts)
        if (not pop.mcmc_enabled and pop.opacity_reset_interval
                and it % pop.opacity_reset_interval == 0 and it <= pop.densify_stop):
            prims = opacity_reset(prims)
            optimizer.reset_group("opacity_logits")
            log.emit("opacity_reset", iteration=it)

        if it % config.log_interval == 0 or it == config.iterations:
            mse = float(np.mean((res.color.astype(np.float64) - targets[view]) ** 2))
            log.emit("train", iteration=it, loss=float(np.mean(recent)),
                     psnr=10 * math.log10(1 / mse) if mse > 0 else float("inf"),
                     count=len(prims), step_ms=1e3 * (t1 - t0),
                     elapsed_s=time.perf_counter() - t_start)
            recent = []
        if on_checkpoint is not None and it in config.checkpoint_iterations:
            on_checkpoint(it, prims)
    log.emit("done", iteration=config.iterations, count=len(prims))
    return prims


def evaluate(prims: PrimitiveSet, cameras, images, settings: RenderSettings = None, names=None):
    """Per-view PSNR/SSIM of renders against ground truth."""
    from .oracle import MetricReport

    report = MetricReport()
    for i, (cam, img) in enumerate(zip(cameras, images)):
        r = render(prims, cam, settings or RenderSettings())
        report.add(names[i] if names else cam.name or str(i), np.clip(r.color, 0, 1), img)
    return report
