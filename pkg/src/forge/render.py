"""Soft differentiable rasterizer, camera sampling and 2D view augmentations.

Images are ``(H, W, C)`` tensors with values in [0, 1]. Gradients of the
rendered RGB and mask flow to vertex positions (through the soft silhouette,
perspective-correct interpolation and flat shading) and to vertex colors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .mesh import Mesh

GRAY = 0.5


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    radius: float
    fov: float = math.radians(60.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise RenderError(f"fov must lie in (0, pi), got {self.fov}")
        if self.radius <= 0:
            raise RenderError(f"camera radius must be positive, got {self.radius}")

    @property
    def eye(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        offset = np.array([ce * math.sin(self.azimuth), math.sin(self.elevation), ce * math.cos(self.azimuth)])
        return np.asarray(self.look_at, dtype=np.float64) + self.radius * offset

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation rows (right, up, forward) and the eye position."""
        eye = self.eye
        fwd = np.asarray(self.look_at, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 1.0, 0.0])
        if abs(fwd @ up) > 1 - 1e-9:
            up = np.array([0.0, 0.0, -1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return np.stack([right, true_up, fwd]), eye


@dataclass(frozen=True)
class RenderSettings:
    height: int = 224
    width: int = 224
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sigma: float = 1e-4  # coverage temperature, squared NDC units
    ambient: float = 0.4
    depth_softness: float = 5e-3  # occlusion sigmoid width, fraction of the camera distance
    bary_softness: float = 1e-2
    cutoff: float = 30.0  # pairs with sigmoid argument below -cutoff contribute exactly 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise RenderError(f"render size must be at least 16x16, got {self.height}x{self.width}")


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    mask: torch.Tensor  # (H, W)


@dataclass(frozen=True)
class CameraConfig:
    radius_scale: float = 2.2
    elevation_std: float = math.radians(25.0)
    elevation_limit: float = math.radians(60.0)
    fov: float = math.radians(60.0)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def bounding_sphere(vertices) -> tuple[np.ndarray, float]:
    v = vertices.detach().cpu().numpy() if torch.is_tensor(vertices) else np.asarray(vertices)
    center = 0.5 * (v.min(0) + v.max(0))
    return center, float(np.linalg.norm(v - center, axis=1).max())


def sample_camera_poses(n: int, rng: np.random.Generator, center=(0.0, 0.0, 0.0),
                        bounding_radius: float = 1.0, config: CameraConfig = CameraConfig()) -> list[CameraPose]:
    """Azimuth uniform on [0, 2 pi), elevation a truncated Gaussian, fixed radius."""
    if n < 1:
        raise ValueError("need at least one camera")
    az = rng.uniform(0.0, 2 * math.pi, size=n)
    el = np.empty(n)
    for i in range(n):
        while True:
            e = rng.normal(0.0, config.elevation_std)
            if abs(e) <= config.elevation_limit:
                el[i] = e
                break
    radius = config.radius_scale * bounding_radius
    look = tuple(float(c) for c in center)
    return [CameraPose(float(a), float(e), radius, config.fov, look) for a, e in zip(az, el)]


def frontal_camera(center=(0.0, 0.0, 0.0), bounding_radius: float = 1.0,
                   config: CameraConfig = CameraConfig()) -> CameraPose:
    return CameraPose(0.0, 0.0, config.radius_scale * bounding_radius, config.fov,
                      tuple(float(c) for c in center))


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _pixel_pairs(xy: np.ndarray, valid: np.ndarray, H: int, W: int, pad: float) -> tuple[np.ndarray, np.ndarray]:
    """Enumerate (face, pixel) pairs whose pixel centre lies in the padded face bbox."""
    lo = xy.min(1) - pad
    hi = xy.max(1) + pad
    # pixel centre of column c is x = -1 + (2c + 1) / W; row r is y = 1 - (2r + 1) / H
    c0 = np.ceil(((lo[:, 0] + 1) * W - 1) / 2).astype(np.int64).clip(0, W)
    c1 = np.floor(((hi[:, 0] + 1) * W - 1) / 2).astype(np.int64).clip(-1, W - 1)
    r0 = np.ceil(((1 - hi[:, 1]) * H - 1) / 2).astype(np.int64).clip(0, H)
    r1 = np.floor(((1 - lo[:, 1]) * H - 1) / 2).astype(np.int64).clip(-1, H - 1)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    count = np.where(valid, nc * nr, 0)
    total = int(count.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    face = np.repeat(np.arange(len(xy)), count)
    start = np.repeat(np.cumsum(count) - count, count)
    local = np.arange(total) - start
    ncf = nc[face]
    rows = r0[face] + local // ncf
    cols = c0[face] + local % ncf
    return face, rows * W + cols


def _cross2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def rasterize(vertices: torch.Tensor, faces: torch.Tensor, colors: torch.Tensor, pose: CameraPose,
              settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Soft-rasterize a colored triangle mesh seen from ``pose``.

    ``colors`` is ``(V, C)``; any channel count works (the background color is
    tiled across channels), which lets callers render several color sets in
    one pass.
    """
    dtype = vertices.dtype
    H, W = settings.height, settings.width
    faces = torch.as_tensor(faces, dtype=torch.long)
    center, rad = bounding_sphere(vertices)
    if np.linalg.norm(pose.eye - center) <= rad:
        raise RenderError("camera lies inside the mesh bounding sphere")

    rot, eye = pose.world_to_camera()
    cam = (vertices - torch.as_tensor(eye, dtype=dtype)) @ torch.as_tensor(rot, dtype=dtype).T
    z = cam[:, 2]
    focal = 1.0 / math.tan(pose.fov / 2)
    aspect = W / H
    near = 1e-3
    zs = z.clamp(min=near)
    xy = torch.stack([cam[:, 0] * focal / (zs * aspect), cam[:, 1] * focal / zs], dim=1)

    C = colors.shape[1]
    bg = torch.tensor(np.resize(np.asarray(settings.background, dtype=np.float64), C), dtype=dtype)
    rgb_flat = bg.expand(H * W, C)
    mask_flat = torch.zeros(H * W, dtype=dtype)

    z_np = z.detach().cpu().numpy()
    f_np = faces.cpu().numpy()
    xy_np = xy.detach().cpu().numpy()[f_np]
    e1, e2 = xy_np[:, 1] - xy_np[:, 0], xy_np[:, 2] - xy_np[:, 0]
    area_np = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    valid = np.all(z_np[f_np] > near, axis=1) & (np.abs(area_np) > 1e-14)
    pad = math.sqrt(settings.cutoff * settings.sigma)
    face_idx, pix_idx = _pixel_pairs(xy_np, valid, H, W, pad)
    if face_idx.size == 0:
        return RenderOutput(rgb_flat.reshape(H, W, C).clone(), mask_flat.reshape(H, W))

    fi = torch.from_numpy(face_idx)
    pi = torch.from_numpy(pix_idx)
    cols = (pi % W).to(dtype)
    rows = (pi // W).to(dtype)
    p = torch.stack([-1 + (2 * cols + 1) / W, 1 - (2 * rows + 1) / H], dim=1)

    tri = xy[faces[fi]]  # (P, 3, 2)
    tz = z[faces[fi]]  # (P, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = _cross2(b - a, c - a)
    # edge function of the edge opposite each vertex -> screen-space barycentrics
    e0 = _cross2(c - b, p - b)
    e1 = _cross2(a - c, p - c)
    e2 = _cross2(b - a, p - a)
    bary = torch.stack([e0, e1, e2], dim=1) / area[:, None]
    inside = (bary.detach() >= 0).all(dim=1)

    d2 = []
    for s, t in ((a, b), (b, c), (c, a)):
        st = t - s
        u = (((p - s) * st).sum(1) / (st * st).sum(1)).clamp(0.0, 1.0)
        d2.append(((p - s - u[:, None] * st) ** 2).sum(1))
    d2 = torch.stack(d2, 1).min(1).values
    arg = torch.where(inside, d2, -d2) / settings.sigma

    keep = (arg.detach() > -settings.cutoff).nonzero()[:, 0]
    if keep.numel() == 0:
        return RenderOutput(rgb_flat.reshape(H, W, C).clone(), mask_flat.reshape(H, W))
    fi, pi, arg, tz, bary = fi[keep], pi[keep], arg[keep], tz[keep], bary[keep]

    # barycentrics of band samples are negative; a softplus clamp keeps colors
    # convex without the slope kink of a hard clamp on the triangle edges
    eps = settings.bary_softness
    bc = eps * F.softplus(bary / eps)
    bc = bc / bc.sum(1, keepdim=True)
    inv_z = (bc / tz).sum(1)
    persp = (bc / tz) / inv_z[:, None]

    # flat Lambertian shading, directional headlight along the view axis
    ctri = cam[faces[fi]]
    fn = torch.linalg.cross(ctri[:, 1] - ctri[:, 0], ctri[:, 2] - ctri[:, 0], dim=1)
    cos = fn[:, 2].abs() / fn.norm(dim=1).clamp(min=1e-30)
    shade = settings.ambient + (1 - settings.ambient) * cos
    col = shade[:, None] * (persp[:, :, None] * colors[faces[fi]]).sum(1)
    alpha = torch.sigmoid(arg)

    # soft occlusion: face j hides face i by alpha_j * sigmoid((z_i - z_j) / tau);
    # continuous in depth, so coplanar neighbours never swap discontinuously
    depth = 1.0 / inv_z
    tau = settings.depth_softness * pose.radius
    pi_np = pi.numpy()
    order = np.argsort(pi_np, kind="stable")
    pi_s = pi_np[order]
    order = torch.from_numpy(order)
    alpha, col, depth = alpha[order], col[order], depth[order]
    pix, start, count = np.unique(pi_s, return_index=True, return_counts=True)
    seg = np.repeat(np.arange(len(pix)), count)
    slot = np.arange(len(pi_s)) - start[seg]
    A, K = len(pix), int(count.max())
    idx = (torch.from_numpy(seg), torch.from_numpy(slot))
    alpha_d = torch.zeros(A, K, dtype=dtype).index_put(idx, alpha)
    col_d = torch.zeros(A, K, C, dtype=dtype).index_put(idx, col)
    depth_d = torch.zeros(A, K, dtype=dtype).index_put(idx, depth)
    in_front = torch.sigmoid((depth_d[:, :, None] - depth_d[:, None, :]) / tau)  # [a, i, j]: j before i
    hide = alpha_d[:, None, :] * in_front * (1 - torch.eye(K, dtype=dtype))
    weight = alpha_d * torch.prod(1 - hide, dim=2)
    empty = torch.prod(1 - alpha_d, dim=1)
    coverage = 1 - empty
    face_rgb = (weight[:, :, None] * col_d).sum(1) / weight.sum(1, keepdim=True).clamp(min=1e-300)
    rgb_a = coverage[:, None] * face_rgb + empty[:, None] * bg

    pix_t = torch.from_numpy(pix)
    rgb_flat = bg.expand(H * W, C).index_copy(0, pix_t, rgb_a)
    mask_flat = torch.zeros(H * W, dtype=dtype).index_copy(0, pix_t, coverage)
    return RenderOutput(rgb_flat.reshape(H, W, C), mask_flat.reshape(H, W))


def _mesh_tensors(mesh: Mesh, dtype=torch.float64):
    if mesh.colors is None:
        raise RenderError("mesh has no per-vertex colors")
    return (torch.as_tensor(mesh.vertices, dtype=dtype), torch.as_tensor(mesh.faces),
            torch.as_tensor(mesh.colors, dtype=dtype))


def render(mesh: Mesh, pose: CameraPose, settings: RenderSettings = RenderSettings()) -> RenderOutput:
    return rasterize(*_mesh_tensors(mesh), pose, settings)


def render_geo(mesh: Mesh, pose: CameraPose, settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Render with every vertex color replaced by uniform gray."""
    v = torch.as_tensor(mesh.vertices, dtype=torch.float64)
    return rasterize(v, torch.as_tensor(mesh.faces), torch.full_like(v, GRAY), pose, settings)


def gray_like(vertices: torch.Tensor) -> torch.Tensor:
    return torch.full(vertices.shape, GRAY, dtype=vertices.dtype)


# ---------------------------------------------------------------------------
# 2D augmentations (grids are in grid_sample's normalized [-1, 1] coordinates)
# ---------------------------------------------------------------------------

_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping the four ``src`` points onto ``dst``."""
    A, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(A), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


def perspective_params(rng: np.random.Generator, max_jitter: float = 0.15) -> np.ndarray:
    """Source-corner positions: each corner moved by at most ``max_jitter`` of the side."""
    return _CORNERS + rng.uniform(-2 * max_jitter, 2 * max_jitter, size=(4, 2))


@dataclass(frozen=True)
class CropBox:
    cx: float
    cy: float
    half: float  # half side in normalized units; area fraction = half ** 2

    @property
    def area_fraction(self) -> float:
        return self.half**2


def crop_params(rng: np.random.Generator, min_area: float = 0.1) -> CropBox:
    area = rng.uniform(min_area, 1.0)
    half = math.sqrt(area)
    cx, cy = rng.uniform(-1 + half, 1 - half, size=2) if half < 1 else (0.0, 0.0)
    return CropBox(float(cx), float(cy), half)


def _identity_grid(H: int, W: int) -> np.ndarray:
    xs = -1 + (2 * np.arange(W) + 1) / W
    ys = -1 + (2 * np.arange(H) + 1) / H
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X, Y], -1)


def _warp_grid(grid: np.ndarray, src_corners: np.ndarray) -> np.ndarray:
    Hm = homography(_CORNERS, src_corners)
    pts = np.concatenate([grid, np.ones(grid.shape[:-1] + (1,))], -1) @ Hm.T
    return pts[..., :2] / pts[..., 2:]


def warp(image: torch.Tensor, grid: np.ndarray) -> torch.Tensor:
    g = torch.as_tensor(grid, dtype=image.dtype)[None]
    out = F.grid_sample(image.permute(2, 0, 1)[None], g, mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[0].permute(1, 2, 0)


def augment_global(image: torch.Tensor, rng: np.random.Generator, max_jitter: float = 0.15) -> torch.Tensor:
    """Random perspective warp of an ``(H, W, C)`` image; no crop."""
    H, W = image.shape[:2]
    return warp(image, _warp_grid(_identity_grid(H, W), perspective_params(rng, max_jitter)))


def augment_local(image: torch.Tensor, rng: np.random.Generator, min_area: float = 0.1,
                  max_jitter: float = 0.15) -> torch.Tensor:
    """Random square crop (>= ``min_area`` of the image) resized to full size, then a perspective warp."""
    H, W = image.shape[:2]
    box = crop_params(rng, min_area)
    grid = _warp_grid(_identity_grid(H, W), perspective_params(rng, max_jitter))
    grid = grid * box.half + np.array([box.cx, box.cy])
    return warp(image, grid)


def foreground_ratio(mask: torch.Tensor, threshold: float = 0.5) -> float:
    m = mask.detach() if torch.is_tensor(mask) else torch.as_tensor(mask)
    return float((m >= threshold).to(torch.float64).mean())


# ---------------------------------------------------------------------------
# preview export
# ---------------------------------------------------------------------------


def save_png(rgb: torch.Tensor, path: str | Path) -> None:
    from PIL import Image

    arr = (rgb.detach().cpu().numpy().clip(0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_frame_manifest(directory: str | Path, files: Sequence[str], extra: dict | None = None) -> Path:
    path = Path(directory) / "frames.json"
    payload = {"frames": {str(i): f for i, f in enumerate(files)}, **(extra or {})}
    path.write_text(json.dumps(payload, indent=1))
    return path
