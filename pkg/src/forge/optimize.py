"""Text-driven optimization of the style field over a motion sequence.

Each iteration styles the template once, applies the result to the sampled
content frames, renders every frame from several random cameras and scores
three augmentation levels against the prompt embedding:

* global: colored render, perspective warp only
* local: colored render, random crop then perspective warp
* geo: gray render (displacement only), random crop then perspective warp

Per level, view embeddings are averaged with foreground-ratio weights and
compared with the text embedding by cosine distance. Level losses are summed
over levels and over frames.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .body import SkinnedBodyModel, shaped_template
from .embedding import top_k
from .mesh import Mesh, vertex_normals
from .render import (
    CameraConfig,
    RenderSettings,
    augment_global,
    augment_local,
    bounding_sphere,
    foreground_ratio,
    frontal_camera,
    gray_like,
    rasterize,
    render_geo,
    sample_camera_poses,
)
from .style_field import StyleField, StyleFieldArch, apply_style, displace, dnsf_forward, init_params

log = logging.getLogger(__name__)

LEVELS = ("global", "local", "geo")
WEIGHT_EPS = 1e-8


class OptimizationError(RuntimeError):
    """Raised when the loss becomes non-finite."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class EmptyViewsError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizationConfig:
    iterations: int = 1500
    learning_rate: float = 5e-4
    decay_factor: float = 0.9
    decay_every: int = 100
    n_views: int = 5
    frame_top_k: int = 3
    seed: int = 0
    n_global: int = 1  # augmented copies per view and level
    n_local: int = 1
    level_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    render_size: int = 224
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    crop_min_area: float = 0.1
    max_jitter: float = 0.15
    deterministic: bool = True
    arch: StyleFieldArch = field(default_factory=StyleFieldArch)

    def __post_init__(self):
        checks = {
            "iterations": self.iterations >= 0,
            "learning_rate": self.learning_rate > 0,
            "decay_factor": 0 < self.decay_factor <= 1,
            "decay_every": self.decay_every > 0,
            "n_views": self.n_views > 0,
            "frame_top_k": self.frame_top_k > 0,
            "n_global": self.n_global > 0,
            "n_local": self.n_local > 0,
            "level_weights": len(self.level_weights) == 3 and all(w >= 0 for w in self.level_weights),
            "crop_min_area": 0 < self.crop_min_area <= 1,
            "max_jitter": 0 <= self.max_jitter < 0.5,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid optimization config field(s): {', '.join(bad)}")

    @property
    def settings(self) -> RenderSettings:
        return RenderSettings(self.render_size, self.render_size, tuple(self.background))


@dataclass
class LossReport:
    total: list[float] = field(default_factory=list)
    levels: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in LEVELS})
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    skipped: int = 0
    frame_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.total)

    def record(self, total: float, levels: dict[str, float], lr: float, wall: float) -> None:
        self.total.append(total)
        for k in LEVELS:
            self.levels[k].append(levels[k])
        self.lr.append(lr)
        self.wall_time.append(wall)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "total", "global", "local", "geo", "lr"])
            for i, t in enumerate(self.total):
                w.writerow([i, repr(t), *(repr(self.levels[k][i]) for k in LEVELS), repr(self.lr[i])])


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------


def mask_weighted_mean(embeddings: torch.Tensor, weights) -> torch.Tensor:
    """Mean of ``(N, D)`` embeddings with non-negative per-view weights."""
    w = torch.as_tensor(weights, dtype=embeddings.dtype)
    if embeddings.ndim != 2 or w.shape != embeddings.shape[:1]:
        raise ValueError(f"need (N, D) embeddings and N weights, got {tuple(embeddings.shape)} and {tuple(w.shape)}")
    if torch.any(w < 0):
        raise ValueError("view weights must be non-negative")
    total = w.sum()
    if total <= WEIGHT_EPS:
        raise EmptyViewsError("all views are empty (foreground weights sum to zero)")
    return (w / total) @ embeddings


def semantic_loss(mean_embedding: torch.Tensor, text_embedding) -> torch.Tensor:
    """``1 - cos(mean_embedding, text_embedding)``, in [0, 2]."""
    t = torch.as_tensor(text_embedding, dtype=mean_embedding.dtype)
    na, nb = mean_embedding.norm(), t.norm()
    if na == 0 or nb == 0:
        raise ValueError("semantic loss is undefined for a zero vector")
    cos = (mean_embedding @ t) / (na * nb)
    return 1 - cos.clamp(-1.0, 1.0)


def sample_content_frames(meshes: Sequence[Mesh], prompt: str, image_encoder, text_encoder, k: int,
                          settings: RenderSettings = RenderSettings(),
                          camera: CameraConfig = CameraConfig()) -> list[int]:
    """Indices of the ``k`` frames whose gray frontal render best matches ``prompt``."""
    if not meshes:
        raise ValueError("motion has no frames")
    if not 0 < k <= len(meshes):
        raise ValueError(f"k must lie in [1, {len(meshes)}], got {k}")
    text = torch.as_tensor(np.asarray(text_encoder.encode(prompt), dtype=np.float64))
    scores = frame_scores(meshes, text, image_encoder, settings, camera)
    rows, _ = top_k(scores, k)
    return [int(r) for r in rows]


def frame_scores(meshes: Sequence[Mesh], text: torch.Tensor, image_encoder,
                 settings: RenderSettings, camera: CameraConfig = CameraConfig()) -> np.ndarray:
    scores = []
    for mesh in meshes:
        center, radius = bounding_sphere(mesh.vertices)
        out = render_geo(mesh, frontal_camera(center, radius, camera), settings)
        with torch.no_grad():
            emb = image_encoder.encode(out.rgb).to(torch.float64)
        scores.append(float(1 - semantic_loss(emb, text)))
    return np.asarray(scores)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


@dataclass
class ContentFrame:
    vertices: torch.Tensor
    normals: torch.Tensor  # posed-frame vertex normals
    center: np.ndarray
    radius: float


@dataclass
class StyleProblem:
    """Everything one loss evaluation needs besides the field and the rng."""

    template: torch.Tensor
    faces: torch.Tensor
    frames: list[ContentFrame]
    text: torch.Tensor
    image_encoder: object
    config: OptimizationConfig
    camera: CameraConfig = field(default_factory=CameraConfig)
    settings: RenderSettings | None = None

    @classmethod
    def build(cls, body: SkinnedBodyModel, meshes: Sequence[Mesh], frame_indices: Sequence[int],
              text_embedding, image_encoder, config: OptimizationConfig, shape=None,
              dtype: torch.dtype = torch.float32, **kw) -> "StyleProblem":
        template, _ = shaped_template(body, shape)
        frames = []
        for i in frame_indices:
            m = meshes[i]
            center, radius = bounding_sphere(m.vertices)
            frames.append(ContentFrame(torch.as_tensor(m.vertices, dtype=dtype),
                                       torch.as_tensor(vertex_normals(m), dtype=dtype), center, radius))
        return cls(torch.as_tensor(template, dtype=dtype), torch.as_tensor(body.faces, dtype=torch.long),
                   frames, torch.as_tensor(np.asarray(text_embedding, dtype=np.float64), dtype=dtype),
                   image_encoder, config, **kw)


def _level_loss(embeddings: list[torch.Tensor], weights: list[float], text: torch.Tensor) -> torch.Tensor:
    return semantic_loss(mask_weighted_mean(torch.stack(embeddings), weights), text)


def iteration_loss(field_: StyleField, problem: StyleProblem,
                   rng: np.random.Generator) -> tuple[torch.Tensor | None, dict[str, float]]:
    """Summed loss over frames and levels, or ``None`` if every view was empty.

    Frames whose views are all empty are dropped from the sum.
    """
    cfg = problem.config
    settings = problem.settings or cfg.settings
    style = field_(problem.template)
    gray = gray_like(problem.template)
    enc = problem.image_encoder
    total = None
    parts = {k: 0.0 for k in LEVELS}
    for frame in problem.frames:
        verts = displace(frame.vertices, frame.normals, style.displacements)
        poses = sample_camera_poses(cfg.n_views, rng, frame.center, frame.radius, problem.camera)
        embs = {k: [] for k in LEVELS}
        weights = {k: [] for k in LEVELS}
        for pose in poses:
            # colored and gray renders share geometry: one pass, six channels
            out = rasterize(verts, problem.faces, torch.cat([style.colors, gray], 1), pose, settings)
            color, geo = out.rgb[..., :3], out.rgb[..., 3:]
            w = foreground_ratio(out.mask)
            for _ in range(cfg.n_global):
                embs["global"].append(enc.encode(augment_global(color, rng, cfg.max_jitter)))
                weights["global"].append(w)
            for _ in range(cfg.n_local):
                embs["local"].append(enc.encode(augment_local(color, rng, cfg.crop_min_area, cfg.max_jitter)))
                weights["local"].append(w)
                embs["geo"].append(enc.encode(augment_local(geo, rng, cfg.crop_min_area, cfg.max_jitter)))
                weights["geo"].append(w)
        if sum(weights["global"]) <= WEIGHT_EPS:
            continue
        for k, lw in zip(LEVELS, cfg.level_weights):
            term = lw * _level_loss(embs[k], weights[k], problem.text)
            parts[k] += float(term.detach())
            total = term if total is None else total + term
    return total, parts


def evaluate_loss(field_: StyleField, problem: StyleProblem, seed: int = 0) -> float:
    """Loss on a fixed, seeded draw of cameras and augmentations (no gradient).

    Comparing two fields on the same draw removes the view-sampling noise
    that the per-iteration training loss carries.
    """
    with torch.no_grad():
        loss, _ = iteration_loss(field_, problem, np.random.default_rng(seed))
    return math.nan if loss is None else float(loss)


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic torch kernels for bitwise-reproducible runs."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    was_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(was_det)


def optimize_dnsf(config: OptimizationConfig, body: SkinnedBodyModel, meshes: Sequence[Mesh], prompt: str,
                  text_encoder, image_encoder, shape=None, frame_indices: Sequence[int] | None = None,
                  field_: StyleField | None = None, callback=None,
                  camera: CameraConfig = CameraConfig()) -> tuple[StyleField, LossReport]:
    """Fit a style field so renders of ``meshes`` match ``prompt``.

    ``frame_indices`` defaults to the ``config.frame_top_k`` best-scoring
    frames. Raises :class:`OptimizationError` on a non-finite loss.
    """
    if not getattr(image_encoder, "differentiable", False):
        raise ValueError(f"image encoder {getattr(image_encoder, 'id', image_encoder)!r} is not differentiable")
    settings = config.settings
    if frame_indices is None:
        frame_indices = sample_content_frames(meshes, prompt, image_encoder, text_encoder,
                                              min(config.frame_top_k, len(meshes)), settings, camera)
    field_ = field_ if field_ is not None else init_params(config.arch, config.seed)
    dtype = next(field_.parameters()).dtype
    text = np.asarray(text_encoder.encode(prompt), dtype=np.float64)
    problem = StyleProblem.build(body, meshes, frame_indices, text, image_encoder, config, shape, dtype,
                                 camera=camera, settings=settings)
    report = LossReport(frame_indices=[int(i) for i in frame_indices])
    if config.iterations == 0:
        return field_, report

    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(field_.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.decay_every, gamma=config.decay_factor)
    with deterministic_mode(config.deterministic):
        for it in range(config.iterations):
            t0 = time.perf_counter()
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad(set_to_none=True)
            loss, parts = iteration_loss(field_, problem, rng)
            if loss is None:
                report.skipped += 1
                log.warning("iteration %d skipped: every view is empty", it)
                with warnings.catch_warnings():
                    # the schedule still advances on skipped iterations
                    warnings.filterwarnings("ignore", "Detected call of `lr_scheduler.step", UserWarning)
                    sched.step()
                continue
            value = float(loss.detach())
            if not math.isfinite(value):
                raise OptimizationError(it, f"non-finite loss {value}")
            loss.backward()
            opt.step()
            sched.step()
            report.record(value, parts, lr, time.perf_counter() - t0)
            if callback is not None:
                callback(it, report)
    return field_, report


def stylize_motion(field_: StyleField, body: SkinnedBodyModel, meshes: Sequence[Mesh], shape=None) -> list[Mesh]:
    """Style the template once, then apply the same colors and offsets to every frame."""
    template, _ = shaped_template(body, shape)
    with torch.no_grad():
        style = dnsf_forward(field_, template)
    return [apply_style(m, style) for m in meshes]
