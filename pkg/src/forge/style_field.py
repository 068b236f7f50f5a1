"""Decoupled neural style field.

A Fourier-feature MLP evaluated on the rest-pose template. The resulting
per-vertex color and normal displacement are then applied to any posed frame
of the motion, so a single network styles the whole sequence.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .mesh import Mesh, vertex_normals

MAX_DISPLACEMENT = 0.1


@dataclass(frozen=True)
class StyleFieldArch:
    n_frequencies: int = 256
    sigma: float = 5.0
    width: int = 256
    depth: int = 4
    zero_heads: bool = True


class FourierFeatures(nn.Module):
    """``v -> [sin(2 pi B v), cos(2 pi B v)]`` with a fixed Gaussian ``B``."""

    def __init__(self, n_frequencies: int = 256, sigma: float = 5.0, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        B = torch.randn(n_frequencies, 3, generator=gen, dtype=torch.float64) * sigma
        self.register_buffer("B", B)

    @property
    def out_dim(self) -> int:
        return 2 * self.B.shape[0]

    def forward(self, vertices: torch.Tensor) -> torch.Tensor:
        proj = 2 * math.pi * vertices @ self.B.to(vertices.dtype).T
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def fourier_encode(vertices, B) -> torch.Tensor:
    vertices = torch.as_tensor(vertices)
    B = torch.as_tensor(B, dtype=vertices.dtype)
    proj = 2 * math.pi * vertices @ B.T
    return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


@dataclass
class StyleAttributes:
    colors: torch.Tensor  # (V, 3) in [0, 1]
    displacements: torch.Tensor  # (V,) in [-0.1, 0.1]


class StyleField(nn.Module):
    def __init__(self, arch: StyleFieldArch = StyleFieldArch(), seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = seed
        # module construction draws from torch's global RNG; fork it so that
        # initialization is a function of ``seed`` alone
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fourier = FourierFeatures(arch.n_frequencies, arch.sigma, seed)
            layers, d_in = [], self.fourier.out_dim
            for _ in range(arch.depth):
                layers += [nn.Linear(d_in, arch.width), nn.ReLU()]
                d_in = arch.width
            self.trunk = nn.Sequential(*layers)
            self.color_head = nn.Linear(d_in, 3)
            self.disp_head = nn.Linear(d_in, 1)
        if arch.zero_heads:
            for head in (self.color_head, self.disp_head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def forward(self, template: torch.Tensor) -> StyleAttributes:
        h = self.trunk(self.fourier(template))
        colors = torch.sigmoid(self.color_head(h))
        disp = MAX_DISPLACEMENT * torch.tanh(self.disp_head(h)[:, 0])
        return StyleAttributes(colors, disp)


def init_params(arch: StyleFieldArch = StyleFieldArch(), seed: int = 0,
                dtype: torch.dtype = torch.float32) -> StyleField:
    return StyleField(arch, seed).to(dtype)


def dnsf_forward(field: StyleField, template_vertices) -> StyleAttributes:
    param = next(field.parameters())
    v = torch.as_tensor(np.asarray(template_vertices) if not torch.is_tensor(template_vertices)
                        else template_vertices, dtype=param.dtype)
    return field(v)


def displace(vertices: torch.Tensor, normals: torch.Tensor, displacements: torch.Tensor) -> torch.Tensor:
    if vertices.shape[0] != displacements.shape[0]:
        raise ValueError(f"style has {displacements.shape[0]} vertices, mesh has {vertices.shape[0]}")
    return vertices + displacements[:, None] * normals


def apply_style(content: Mesh, style: StyleAttributes) -> Mesh:
    """Displace ``content`` along its own (posed) vertex normals and attach colors."""
    c = style.colors.detach().cpu().numpy().astype(np.float64)
    d = style.displacements.detach().cpu().numpy().astype(np.float64)
    if c.shape[0] != content.n_vertices or d.shape[0] != content.n_vertices:
        raise ValueError(f"style has {d.shape[0]} vertices, mesh has {content.n_vertices}")
    verts = content.vertices + d[:, None] * vertex_normals(content)
    return Mesh(verts, content.faces, c)


# ---------------------------------------------------------------------------
# checkpoint: one JSON header line, then the float32 parameter blob
# ---------------------------------------------------------------------------


def save_checkpoint(field: StyleField, path: str | Path, n_vertices: int, extra: dict | None = None) -> None:
    state = field.state_dict()
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {
        "arch": asdict(field.arch),
        "seeds": {"init": field.seed, "fourier": field.seed},
        "fourier": {"sigma": field.arch.sigma, "L": field.arch.n_frequencies},
        "vertex_count": int(n_vertices),
        "tensors": tensors,
        **(extra or {}),
    }
    buf = io.BytesIO()
    for v in state.values():
        buf.write(v.detach().cpu().numpy().astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(buf.getvalue())


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[StyleField, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    field = StyleField(StyleFieldArch(**header["arch"]), header["seeds"]["init"])
    flat = np.frombuffer(blob, dtype="<f4")
    state, offset = {}, 0
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"]))
        if offset + n > flat.size:
            raise ValueError(f"{path}: parameter blob truncated at {spec['name']}")
        state[spec["name"]] = torch.from_numpy(flat[offset:offset + n].reshape(spec["shape"]).copy())
        offset += n
    field.load_state_dict(state)
    return field.to(dtype), header
