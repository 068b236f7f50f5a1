"""Mesh-sequence export: per-frame PLY files, a sequence manifest and glTF morph targets."""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Sequence

import numpy as np
from plyfile import PlyData, PlyElement

from .mesh import Mesh

PLY_FORMATS = ("ascii", "binary_little_endian")


class ExportError(ValueError):
    pass


def write_ply(mesh: Mesh, path: str | Path, fmt: str = "binary_little_endian", color_type: str = "f4") -> Path:
    """Write vertices, per-vertex colors and faces.

    ``color_type`` ``"f4"`` stores colors as float32 in [0, 1] (lossless for
    round trips); ``"u1"`` stores 8-bit colors, which most viewers expect.
    """
    if fmt not in PLY_FORMATS:
        raise ExportError(f"unknown PLY format {fmt!r}; choose from {PLY_FORMATS}")
    if color_type not in ("f4", "u1"):
        raise ExportError(f"color_type must be 'f4' or 'u1', got {color_type!r}")
    v = mesh.vertices
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.colors is not None:
        fields += [(c, "<" + color_type if color_type == "f4" else "u1") for c in ("red", "green", "blue")]
    vert = np.empty(len(v), dtype=fields)
    vert["x"], vert["y"], vert["z"] = v[:, 0], v[:, 1], v[:, 2]
    if mesh.colors is not None:
        c = mesh.colors if color_type == "f4" else np.round(np.clip(mesh.colors, 0, 1) * 255)
        vert["red"], vert["green"], vert["blue"] = c[:, 0], c[:, 1], c[:, 2]
    face = np.empty(len(mesh.faces), dtype=[("vertex_indices", "<i4", (3,))])
    face["vertex_indices"] = mesh.faces
    ply = PlyData([PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
                  text=fmt == "ascii", byte_order="<")
    path = Path(path)
    ply.write(str(path))
    return path


def read_ply(path: str | Path) -> Mesh:
    ply = PlyData.read(str(path))
    try:
        vert = ply["vertex"].data
        faces = np.vstack(ply["face"].data["vertex_indices"]).astype(np.int64)
    except KeyError as exc:
        raise ExportError(f"{path}: missing PLY element {exc}") from None
    v = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    colors = None
    names = vert.dtype.names
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1).astype(np.float64)
        if vert.dtype["red"].kind in "ui":
            colors /= 255.0
    return Mesh(v, faces, colors)


def export_sequence(meshes: Sequence[Mesh], directory: str | Path, fmt: str = "binary_little_endian",
                    color_type: str = "f4", fps: float = 30.0, extra: dict | None = None) -> Path:
    """Write ``frame_00000.ply`` ... plus ``sequence.json``; returns the manifest path."""
    if not meshes:
        raise ExportError("nothing to export: empty sequence")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(meshes):
        name = f"frame_{i:05d}.ply"
        write_ply(m, out / name, fmt, color_type)
        files.append(name)
    manifest = {
        "frames": files,
        "fps": fps,
        "vertex_count": int(meshes[0].n_vertices),
        "face_count": int(len(meshes[0].faces)),
        "format": fmt,
        **(extra or {}),
    }
    path = out / "sequence.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_sequence(manifest: str | Path) -> tuple[list[Mesh], dict]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "sequence.json"
    if not manifest.is_file():
        raise ExportError(f"sequence manifest not found: {manifest}")
    meta = json.loads(manifest.read_text())
    return [read_ply(manifest.parent / f) for f in meta["frames"]], meta


# ---------------------------------------------------------------------------
# glTF: frame 0 is the base mesh, later frames are morph targets switched on
# one at a time by a step-interpolated weights animation
# ---------------------------------------------------------------------------


def write_gltf(meshes: Sequence[Mesh], path: str | Path, fps: float = 30.0) -> Path:
    if not meshes:
        raise ExportError("nothing to export: empty sequence")
    base = meshes[0]
    if base.colors is None:
        raise ExportError("glTF export needs per-vertex colors")
    n_t = len(meshes) - 1
    blob = bytearray()
    views, accessors = [], []

    def add(arr: np.ndarray, component: int, kind: str, target: int | None, minmax: bool = False) -> int:
        data = arr.tobytes()
        while len(blob) % 4:
            blob.append(0)
        view = {"buffer": 0, "byteOffset": len(blob), "byteLength": len(data)}
        if target is not None:
            view["target"] = target
        views.append(view)
        blob.extend(data)
        acc = {"bufferView": len(views) - 1, "componentType": component,
               "count": int(arr.shape[0]), "type": kind}
        if minmax:
            acc["min"] = arr.min(0).tolist() if arr.ndim > 1 else [float(arr.min())]
            acc["max"] = arr.max(0).tolist() if arr.ndim > 1 else [float(arr.max())]
        accessors.append(acc)
        return len(accessors) - 1

    f32, u32 = 5126, 5125
    pos = add(base.vertices.astype("<f4"), f32, "VEC3", 34962, minmax=True)
    col = add(base.colors.astype("<f4"), f32, "VEC3", 34962)
    idx = add(base.faces.reshape(-1).astype("<u4"), u32, "SCALAR", 34963)
    targets = []
    for m in meshes[1:]:
        if m.n_vertices != base.n_vertices:
            raise ExportError("all frames must share the vertex count")
        delta = (m.vertices - base.vertices).astype("<f4")
        targets.append({"POSITION": add(delta, f32, "VEC3", 34962, minmax=True)})

    primitive = {"attributes": {"POSITION": pos, "COLOR_0": col}, "indices": idx, "mode": 4}
    doc = {"asset": {"version": "2.0"}, "scenes": [{"nodes": [0]}], "scene": 0,
           "nodes": [{"mesh": 0}], "meshes": [{"primitives": [primitive]}]}
    if targets:
        primitive["targets"] = targets
        doc["meshes"][0]["weights"] = [0.0] * n_t
        times = (np.arange(len(meshes)) / fps).astype("<f4")
        weights = np.zeros((len(meshes), n_t), dtype="<f4")
        for t in range(1, len(meshes)):
            weights[t, t - 1] = 1.0
        t_acc = add(times, f32, "SCALAR", None, minmax=True)
        w_acc = add(weights.reshape(-1), f32, "SCALAR", None)
        doc["animations"] = [{
            "samplers": [{"input": t_acc, "output": w_acc, "interpolation": "STEP"}],
            "channels": [{"sampler": 0, "target": {"node": 0, "path": "weights"}}],
        }]
    uri = "data:application/octet-stream;base64," + base64.b64encode(bytes(blob)).decode("ascii")
    doc["buffers"] = [{"byteLength": len(blob), "uri": uri}]
    doc["bufferViews"] = views
    doc["accessors"] = accessors
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path
