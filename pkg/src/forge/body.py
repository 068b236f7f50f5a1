"""Parametric skinned body: linear blend skinning, persistence, toy humanoid."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .mesh import Mesh, MeshError, face_normals, icosphere, subdivide

N_BETAS = 10


class BodyModelError(ValueError):
    pass


@dataclass(frozen=True)
class SkinnedBodyModel:
    template: np.ndarray  # (V, 3) rest pose
    faces: np.ndarray  # (F, 3)
    joints: np.ndarray  # (J, 3) rest joint positions
    parents: np.ndarray  # (J,) parent index, -1 for the root
    skin_weights: np.ndarray  # (V, J)
    shape_basis: np.ndarray | None = None  # (V, 3, 10)
    joint_regressor: np.ndarray | None = None  # (J, V)
    joint_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        t = np.asarray(self.template, dtype=np.float64)
        j = np.asarray(self.joints, dtype=np.float64)
        p = np.asarray(self.parents, dtype=np.int64)
        w = np.asarray(self.skin_weights, dtype=np.float64)
        V, J = t.shape[0], j.shape[0]
        if t.ndim != 2 or t.shape[1] != 3:
            raise BodyModelError(f"template: expected (V, 3), got {t.shape}")
        if j.shape != (J, 3) or p.shape != (J,):
            raise BodyModelError(f"joints/parents: expected ({J}, 3)/({J},), got {j.shape}/{p.shape}")
        if p[0] != -1 or np.any(p[1:] < 0) or np.any(p[1:] >= np.arange(1, J)):
            raise BodyModelError("parents: need a single root at index 0 and parents[j] < j")
        if w.shape != (V, J):
            raise BodyModelError(f"skin_weights: expected ({V}, {J}), got {w.shape}")
        if np.any(w < 0) or not np.allclose(w.sum(1), 1.0, atol=1e-6):
            raise BodyModelError("skin_weights: rows must be non-negative and sum to 1")
        try:
            mesh = Mesh(t, self.faces)
        except MeshError as exc:
            raise BodyModelError(f"faces: {exc}") from exc
        object.__setattr__(self, "template", t)
        object.__setattr__(self, "faces", mesh.faces)
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "parents", p)
        object.__setattr__(self, "skin_weights", w)
        if self.shape_basis is not None:
            sb = np.asarray(self.shape_basis, dtype=np.float64)
            if sb.shape != (V, 3, N_BETAS):
                raise BodyModelError(f"shape_basis: expected ({V}, 3, {N_BETAS}), got {sb.shape}")
            object.__setattr__(self, "shape_basis", sb)
        if self.joint_regressor is not None:
            jr = np.asarray(self.joint_regressor, dtype=np.float64)
            if jr.shape != (J, V):
                raise BodyModelError(f"joint_regressor: expected ({J}, {V}), got {jr.shape}")
            object.__setattr__(self, "joint_regressor", jr)

    @property
    def n_joints(self) -> int:
        return self.joints.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    def template_mesh(self) -> Mesh:
        return Mesh(self.template, self.faces)


def rodrigues(rotvecs: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3)).as_matrix()


def shaped_template(model: SkinnedBodyModel, shape=None) -> tuple[np.ndarray, np.ndarray]:
    v = model.template
    if shape is not None and model.shape_basis is not None:
        beta = np.asarray(shape, dtype=np.float64).reshape(-1)[:N_BETAS]
        v = v + model.shape_basis[..., : beta.size] @ beta
    joints = model.joint_regressor @ v if model.joint_regressor is not None else model.joints
    return v, joints


def joint_transforms(model: SkinnedBodyModel, pose, joints: np.ndarray) -> np.ndarray:
    """Global rigid transforms ``(J, 4, 4)`` of every joint (forward kinematics)."""
    pose = np.asarray(pose, dtype=np.float64)
    J = model.n_joints
    if pose.shape != (J, 3):
        raise BodyModelError(f"pose: expected ({J}, 3) axis-angle, got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise BodyModelError("pose: non-finite rotation")
    rots = rodrigues(pose)
    G = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = rots[j]
        p = model.parents[j]
        local[:3, 3] = joints[j] - (joints[p] if p >= 0 else 0.0)
        G[j] = local if p < 0 else G[p] @ local
    return G


def lbs(model: SkinnedBodyModel, pose, shape=None) -> Mesh:
    v, joints = shaped_template(model, shape)
    G = joint_transforms(model, pose, joints)
    # express each transform relative to the rest-pose joint location
    A = G.copy()
    A[:, :3, 3] -= np.einsum("jab,jb->ja", G[:, :3, :3], joints)
    T = np.einsum("vj,jab->vab", model.skin_weights, A)
    posed = np.einsum("vab,vb->va", T[:, :3, :3], v) + T[:, :3, 3]
    return Mesh(posed, model.faces)


def motion_to_meshes(model: SkinnedBodyModel, poses, shape=None) -> list[Mesh]:
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3:
        raise BodyModelError(f"poses: expected (T, J, 3), got {poses.shape}")
    return [lbs(model, p, shape) for p in poses]


def subdivide_body(model: SkinnedBodyModel, levels: int = 1) -> SkinnedBodyModel:
    """Midpoint-subdivide the template and carry skinning data to the new vertices."""
    V = model.n_vertices
    attrs = {"skin_weights": model.skin_weights}
    if model.shape_basis is not None:
        attrs["shape_basis"] = model.shape_basis.reshape(V, -1)
    mesh, out = subdivide(model.template_mesh(), levels, attrs)
    V2 = mesh.n_vertices
    sb = out["shape_basis"].reshape(V2, 3, N_BETAS) if "shape_basis" in out else None
    jr = None
    if model.joint_regressor is not None:
        # joint locations must not move, so new vertices get zero regressor weight
        jr = np.concatenate([model.joint_regressor, np.zeros((model.n_joints, V2 - V))], axis=1)
    return SkinnedBodyModel(mesh.vertices, mesh.faces, model.joints, model.parents,
                            out["skin_weights"], sb, jr, model.joint_names)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_ARRAY_FIELDS = {
    "template": "<f4",
    "faces": "<i4",
    "joints": "<f4",
    "parents": "<i4",
    "skin_weights": "<f4",
    "shape_basis": "<f4",
    "joint_regressor": "<f4",
}
_REQUIRED = ("template", "faces", "joints", "parents", "skin_weights")


def save_body(model: SkinnedBodyModel, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, dtype in _ARRAY_FIELDS.items():
        value = getattr(model, name)
        if value is None:
            continue
        value = np.asarray(value)
        fname = f"{name}.bin"
        value.astype(dtype).tofile(directory / fname)
        arrays[name] = {"file": fname, "shape": list(value.shape), "dtype": dtype}
    manifest = directory / "body.json"
    manifest.write_text(json.dumps({"arrays": arrays, "joint_names": list(model.joint_names)}, indent=1))
    return manifest


def load_body(manifest_path: str | Path) -> SkinnedBodyModel:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "body.json"
    meta = json.loads(manifest_path.read_text())
    arrays = meta.get("arrays", {})
    missing = [n for n in _REQUIRED if n not in arrays]
    if missing:
        raise BodyModelError(f"{manifest_path}: missing arrays {missing}")
    loaded = {}
    for name, spec in arrays.items():
        if name not in _ARRAY_FIELDS:
            continue
        path = manifest_path.parent / spec["file"]
        if not path.is_file():
            raise BodyModelError(f"{name}: file {path} not found")
        raw = np.fromfile(path, dtype=spec.get("dtype", _ARRAY_FIELDS[name]))
        shape = tuple(spec["shape"])
        if raw.size != int(np.prod(shape)):
            raise BodyModelError(f"{name}: {raw.size} values on disk, shape {shape} declared")
        loaded[name] = raw.reshape(shape)
    return SkinnedBodyModel(joint_names=tuple(meta.get("joint_names", ())), **loaded)


# ---------------------------------------------------------------------------
# toy humanoid
# ---------------------------------------------------------------------------

TOY_JOINTS = ("pelvis", "spine", "neck", "head", "l_shoulder", "r_shoulder", "l_hip", "r_hip")
_TOY_PARENTS = np.array([-1, 0, 1, 2, 1, 1, 0, 0])
_TOY_JOINT_POS = np.array(
    [[0.0, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.5, 0.0], [0.0, 0.6, 0.0],
     [0.17, 0.45, 0.0], [-0.17, 0.45, 0.0], [0.1, -0.05, 0.0], [-0.1, -0.05, 0.0]]
)
# segment each joint drives, used to derive smooth skin weights
_TOY_BONES = np.array(
    [[[0, -0.12, 0], [0, 0.1, 0]], [[0, 0.1, 0], [0, 0.44, 0]], [[0, 0.47, 0], [0, 0.58, 0]],
     [[0, 0.6, 0], [0, 0.8, 0]], [[0.2, 0.45, 0], [0.75, 0.45, 0]], [[-0.2, 0.45, 0], [-0.75, 0.45, 0]],
     [[0.1, -0.15, 0], [0.1, -0.9, 0]], [[-0.1, -0.15, 0], [-0.1, -0.9, 0]]], dtype=np.float64
)


def _tube(p0, p1, radius: float, n_seg: int, n_rings: int) -> tuple[np.ndarray, np.ndarray]:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    axis /= np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    ring = radius * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w)
    ts = np.linspace(0.0, 1.0, n_rings)
    verts = [p0 + t * (p1 - p0) + ring for t in ts]
    verts = np.concatenate(verts + [p0[None] - 0.5 * radius * axis, p1[None] + 0.5 * radius * axis])
    faces = []
    for r in range(n_rings - 1):
        for s in range(n_seg):
            a, b = r * n_seg + s, r * n_seg + (s + 1) % n_seg
            faces += [(a, b, b + n_seg), (a, b + n_seg, a + n_seg)]
    c0, c1 = n_rings * n_seg, n_rings * n_seg + 1
    last = (n_rings - 1) * n_seg
    for s in range(n_seg):
        faces += [(c0, (s + 1) % n_seg, s), (c1, last + s, last + (s + 1) % n_seg)]
    return verts, np.array(faces)


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    # parts are convex, so the part centroid is a valid interior point
    center = verts.mean(0)
    n = face_normals(verts, faces, unit=False)
    out = verts[faces].mean(1) - center
    flip = np.einsum("fa,fa->f", n, out) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return faces


def _point_segment_dist2(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.sum((points - (a + t[:, None] * ab)) ** 2, axis=1)


def make_toy_body(falloff: float = 0.05) -> SkinnedBodyModel:
    """Low-poly T-posed humanoid (288 vertices, 8 joints), Y up, facing +Z."""
    parts = [
        _tube((0, -0.12, 0), (0, 0.5, 0), 0.13, 10, 6),
        _tube((0.16, 0.45, 0), (0.75, 0.45, 0), 0.045, 8, 5),
        _tube((-0.16, 0.45, 0), (-0.75, 0.45, 0), 0.045, 8, 5),
        _tube((0.1, -0.05, 0), (0.1, -0.9, 0), 0.06, 8, 6),
        _tube((-0.1, -0.05, 0), (-0.1, -0.9, 0), 0.06, 8, 6),
    ]
    head = icosphere(1, radius=0.1)
    parts.append((head.vertices + np.array([0.0, 0.68, 0.0]), head.faces))

    verts, faces, offset = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(_orient_outward(v, f) + offset)
        offset += len(v)
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)

    d2 = np.stack([_point_segment_dist2(verts, a, b) for a, b in _TOY_BONES], axis=1)
    logits = -d2 / (2 * falloff**2)
    logits -= logits.max(1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(1, keepdims=True)
    return SkinnedBodyModel(verts, faces, _TOY_JOINT_POS, _TOY_PARENTS, w, joint_names=TOY_JOINTS)


def toy_motion(frames: int = 8, seed: int = 0, amplitude: float = 0.6) -> np.ndarray:
    """Smooth periodic pose sequence ``(T, 8, 3)`` for the toy body."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=(len(TOY_JOINTS), 3))
    scale = amplitude * rng.uniform(0.3, 1.0, size=(len(TOY_JOINTS), 3))
    scale[0] *= 0.3  # keep the root mostly upright
    t = np.arange(frames)[:, None, None] / max(frames, 1) * 2 * np.pi
    return scale[None] * np.sin(t + phase[None])
