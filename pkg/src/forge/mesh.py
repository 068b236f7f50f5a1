"""Triangle meshes: normals, midpoint subdivision, small primitive builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3) triangles, got {f.shape}")
        f = f.astype(np.int64)
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise MeshError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.shape != v.shape:
                raise MeshError(f"colors must be {v.shape}, got {c.shape}")
            object.__setattr__(self, "colors", c)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def with_colors(self, colors) -> "Mesh":
        return Mesh(self.vertices, self.faces, colors)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        lo, hi = self.vertices.min(0), self.vertices.max(0)
        center = 0.5 * (lo + hi)
        return center, float(np.linalg.norm(self.vertices - center, axis=1).max())


def face_normals(vertices: np.ndarray, faces: np.ndarray, unit: bool = True) -> np.ndarray:
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if unit:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
    return n


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized."""
    # unnormalized cross products already carry twice the face area
    fn = face_normals(mesh.vertices, mesh.faces, unit=False)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norms <= 1e-20)
    if bad.size:
        raise MeshError(f"{bad.size} vertices have no incident area (first: {bad[0]})")
    return acc / norms[:, None]


def unique_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique edges ``(E, 2)`` and, per face corner edge, its edge id ``(F, 3)``.

    Corner edge ``k`` of a face joins corners ``k`` and ``(k + 1) % 3``.
    """
    e = np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1).reshape(-1, 2)
    e = np.sort(e, axis=1)
    edges, inverse = np.unique(e, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def euler_characteristic(mesh: Mesh) -> int:
    edges, _ = unique_edges(mesh.faces)
    return mesh.n_vertices - len(edges) + len(mesh.faces)


def subdivide(mesh: Mesh, levels: int = 1, attrs: dict[str, np.ndarray] | None = None,
              renormalize: tuple[str, ...] = ("skin_weights",)) -> tuple[Mesh, dict[str, np.ndarray]]:
    """Midpoint (1-to-4) subdivision without smoothing.

    Each attribute in ``attrs`` is a per-vertex array; new vertices receive the
    average of their edge endpoints. Attributes listed in ``renormalize`` get
    their rows rescaled to sum to one afterwards.
    """
    if levels < 1:
        raise ValueError("levels must be a positive integer")
    faces = np.asarray(mesh.faces)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshError("subdivision needs a triangle mesh")
    verts = mesh.vertices
    colors = mesh.colors
    attrs = {k: np.asarray(v, dtype=np.float64) for k, v in (attrs or {}).items()}
    for name, a in attrs.items():
        if a.shape[0] != verts.shape[0]:
            raise MeshError(f"attribute {name!r} has {a.shape[0]} rows, mesh has {verts.shape[0]} vertices")

    for _ in range(levels):
        edges, corner_edge = unique_edges(faces)
        n = verts.shape[0]
        mid = n + corner_edge  # ids of the midpoint on each corner edge
        verts = np.concatenate([verts, 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])])
        if colors is not None:
            colors = np.concatenate([colors, 0.5 * (colors[edges[:, 0]] + colors[edges[:, 1]])])
        for name in attrs:
            a = attrs[name]
            attrs[name] = np.concatenate([a, 0.5 * (a[edges[:, 0]] + a[edges[:, 1]])])
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        ab, bc, ca = mid[:, 0], mid[:, 1], mid[:, 2]
        faces = np.concatenate(
            [np.stack(t, axis=1) for t in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))]
        )

    for name in renormalize:
        if name in attrs:
            a = attrs[name]
            attrs[name] = a / a.sum(axis=1, keepdims=True)
    return Mesh(verts, faces, colors), attrs


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def tetrahedron() -> Mesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f)


def cube() -> Mesh:
    """Axis-aligned cube spanning [-1, 1]^3 with outward winding."""
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    # split every quad along the diagonal between its two even-parity corners
    # (an inscribed tetrahedron), so all corners see symmetric face areas
    even = ((v > 0).sum(1) % 2) == 0
    f = []
    for q in quads:
        k = next(i for i in range(4) if even[q[i]])
        a, b, c, d = q[k:] + q[:k]
        f += [(a, b, c), (a, c, d)]
    return Mesh(v, np.array(f))


def icosphere(levels: int = 2, radius: float = 1.0) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    mesh = Mesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)
    for _ in range(levels):
        mesh, _ = subdivide(mesh, 1)
        v = mesh.vertices
        mesh = Mesh(v / np.linalg.norm(v, axis=1, keepdims=True), mesh.faces)
    return Mesh(radius * mesh.vertices, mesh.faces)
