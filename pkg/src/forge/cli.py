"""``forge`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyModelError, SkinnedBodyModel, load_body, make_toy_body, motion_to_meshes, toy_motion
from .embedding import EncoderError, get_encoder, registered_encoders
from .export import ExportError, export_sequence, load_sequence, write_gltf
from .mesh import MeshError
from .motion_db import MotionClip, MotionDataError, MotionStore, write_motion_db
from .optimize import OptimizationConfig, OptimizationError, optimize_dnsf, stylize_motion
from .render import CameraConfig, CameraPose, RenderSettings, bounding_sphere, render, save_png, write_frame_manifest
from .retrieval import VARIANTS, build_index, eval_precision, load_sick, rank
from .style_field import StyleFieldArch, load_checkpoint, save_checkpoint

log = logging.getLogger("forge")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    stage1_encoder: str = "toy-text"
    stage2_encoder: str = "toy-text-alt"
    text_encoder: str = "toy-text"  # shares its space with image_encoder
    image_encoder: str = "toy-image"
    body: str = "toy"  # "toy" or a body manifest path
    motion_db: str | None = None
    cache_dir: str | None = None
    out: str = "forge-out"
    seed: int = 0
    k: int = 3
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)

    def validate(self) -> "RunConfig":
        known = registered_encoders()
        for name in ("stage1_encoder", "stage2_encoder", "text_encoder", "image_encoder"):
            value = getattr(self, name)
            if value not in known:
                raise ConfigError(f"{name}: unknown encoder {value!r}; registered: {', '.join(known)}")
        if self.k < 1:
            raise ConfigError(f"k: must be a positive integer, got {self.k}")
        if self.body != "toy" and not Path(self.body).exists():
            raise ConfigError(f"body: manifest {self.body!r} does not exist")
        return self

    @property
    def cache_root(self) -> Path:
        if self.cache_dir:
            return Path(self.cache_dir)
        return Path(os.environ.get("FORGE_CACHE", Path.home() / ".cache" / "forge"))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build_dataclass(cls, data: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = dict(data)
    if cls is OptimizationConfig:
        if "arch" in kwargs:
            kwargs["arch"] = _build_dataclass(StyleFieldArch, kwargs["arch"], f"{where}.arch")
        for key in ("level_weights", "background"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    opt = dict(data.pop("optimization", {}) or {})
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("optimization."):
            opt[key.split(".", 1)[1]] = value
        else:
            data[key] = value
    if "seed" in data:
        opt.setdefault("seed", data["seed"])
    cfg = _build_dataclass(RunConfig, {**data, "optimization": {}}, "config")
    cfg.optimization = _build_dataclass(OptimizationConfig, opt, "optimization")
    return cfg.validate()


def _open_body(cfg: RunConfig) -> SkinnedBodyModel:
    return make_toy_body() if cfg.body == "toy" else load_body(cfg.body)


def _open_store(cfg: RunConfig) -> MotionStore:
    if cfg.motion_db is None:
        raise ConfigError("motion_db: required for this command (--db)")
    if not Path(cfg.motion_db).is_dir():
        raise ConfigError(f"motion_db: directory {cfg.motion_db!r} does not exist")
    return MotionStore(cfg.motion_db)


def _open_index(cfg: RunConfig, store: MotionStore):
    enc1, enc2 = get_encoder(cfg.stage1_encoder), get_encoder(cfg.stage2_encoder)
    cache = cfg.cache_root / "index" / Path(cfg.motion_db).resolve().name
    return build_index(store.entries, enc1, enc2, cache)


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1))
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

TOY_LABELS = ("walk", "run", "jump", "dance", "wave hand", "kick", "sit down", "throw a ball")


def cmd_index(cfg: RunConfig, init_toy: bool = False) -> int:
    if init_toy:
        if cfg.motion_db is None:
            raise ConfigError("motion_db: required with --init-toy")
        items = [(label, MotionClip(toy_motion(8, seed=i), np.zeros(10))) for i, label in enumerate(TOY_LABELS)]
        write_motion_db(cfg.motion_db, items)
        print(f"wrote toy motion database with {len(items)} entries to {cfg.motion_db}")
    store = _open_store(cfg)
    index = _open_index(cfg, store)
    print(f"indexed {len(index)} labels with {index.stage1_id} / {index.stage2_id} "
          f"(cache {cfg.cache_root / 'index'})")
    return EXIT_OK


def cmd_retrieve(cfg: RunConfig, prompt: str) -> int:
    store = _open_store(cfg)
    index = _open_index(cfg, store)
    best, cands = rank(index, prompt, min(cfg.k, len(index)))
    print(f"{best.entry.label}\t{best.entry.motion_ref}")
    for c in cands:
        print(f"  {c.entry.label!r}: stage1={c.stage1_score:.4f} stage2={c.stage2_score:.4f}")
    payload = {
        "query": prompt,
        "k": cfg.k,
        "stage1_encoder": index.stage1_id,
        "stage2_encoder": index.stage2_id,
        "best": {"label": best.entry.label, "motion_ref": best.entry.motion_ref},
        "candidates": [{"label": c.entry.label, "motion_ref": c.entry.motion_ref,
                        "stage1_score": c.stage1_score, "stage2_score": c.stage2_score} for c in cands],
    }
    _write_json(Path(cfg.out) / "retrieval.json", payload)
    return EXIT_OK


def cmd_stylize(cfg: RunConfig, prompt: str) -> int:
    store = _open_store(cfg)
    index = _open_index(cfg, store)
    best, _ = rank(index, prompt, min(cfg.k, len(index)))
    clip = store.load(best.entry.motion_ref)
    body = _open_body(cfg)
    if clip.poses.shape[1] != body.n_joints:
        raise DataError(f"motion {best.entry.motion_ref!r} has {clip.poses.shape[1]} joints, body has {body.n_joints}")
    meshes = motion_to_meshes(body, clip.poses, clip.shape)
    text_enc, image_enc = get_encoder(cfg.text_encoder), get_encoder(cfg.image_encoder)
    if text_enc.dimension != image_enc.dimension:
        raise ConfigError(f"text_encoder ({text_enc.dimension}) and image_encoder ({image_enc.dimension}) "
                          "dimensions differ")
    log.info("retrieved %r (%d frames); optimizing", best.entry.label, clip.frames)
    field_, report = optimize_dnsf(cfg.optimization, body, meshes, prompt, text_enc, image_enc, shape=clip.shape)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "style.ckpt"
    save_checkpoint(field_, ckpt, body.n_vertices)
    report.write_csv(out / "loss.csv")
    seq = export_sequence(stylize_motion(field_, body, meshes, clip.shape), out / "sequence", fps=clip.fps)
    manifest = {
        "config": cfg.to_dict(),
        "prompt": prompt,
        "retrieved": {"label": best.entry.label, "motion_ref": best.entry.motion_ref},
        "frame_indices": report.frame_indices,
        "seeds": {"run": cfg.seed, "optimization": cfg.optimization.seed, "init": field_.seed},
        "final_loss": report.total[-1] if report.total else None,
        "skipped_iterations": report.skipped,
        "checkpoint": str(ckpt),
        "loss_history": "loss.csv",
        "sequence": str(seq),
    }
    _write_json(out / "run.json", manifest)
    final = f"{report.total[-1]:.4f}" if report.total else "n/a"
    print(f"stylized {best.entry.label!r}: final loss {final}, outputs in {out}")
    return EXIT_OK


def cmd_eval_sick(cfg: RunConfig, dataset: str, variants: list[str], score_range) -> int:
    path = Path(dataset)
    if not path.is_file():
        raise ConfigError(f"dataset: {dataset!r} not found")
    pairs = load_sick(path)
    enc1, enc2 = get_encoder(cfg.stage1_encoder), get_encoder(cfg.stage2_encoder)
    rng_label = "all" if score_range is None else f"[{score_range[0]}, {score_range[1]}]"
    print("variant\trange\tprecision")
    for v in variants:
        p = eval_precision(pairs, v, enc1, enc2, score_range, cfg.k)
        print(f"{v}\t{rng_label}\t{p:.2f}")
    return EXIT_OK


def cmd_export(cfg: RunConfig, checkpoint: str, run_dir: str | None, motion_ref: str | None, fmt: str) -> int:
    field_, header = load_checkpoint(checkpoint)
    body = _open_body(cfg)
    shape, fps = None, 30.0
    if motion_ref is None and run_dir is not None:
        run = json.loads((Path(run_dir) / "run.json").read_text())
        motion_ref = run["retrieved"]["motion_ref"]
        cfg.motion_db = cfg.motion_db or run["config"]["motion_db"]
    if motion_ref is None:
        raise ConfigError("export needs --motion or --run")
    clip = _open_store(cfg).load(motion_ref)
    if header["vertex_count"] != body.n_vertices:
        raise DataError(f"checkpoint was fitted on {header['vertex_count']} vertices, body has {body.n_vertices}")
    shape, fps = clip.shape, clip.fps
    meshes = stylize_motion(field_, body, motion_to_meshes(body, clip.poses, shape), shape)
    out = Path(cfg.out)
    if fmt in ("ply", "both"):
        print(export_sequence(meshes, out, fps=fps, extra={"checkpoint": str(checkpoint), "motion_ref": motion_ref}))
    if fmt in ("gltf", "both"):
        out.mkdir(parents=True, exist_ok=True)
        print(write_gltf(meshes, out / "sequence.gltf", fps))
    return EXIT_OK


def cmd_preview(cfg: RunConfig, sequence: str, views: int, size: int) -> int:
    meshes, meta = load_sequence(sequence)
    if meshes[0].colors is None:
        raise DataError("sequence frames carry no vertex colors")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = RenderSettings(size, size)
    cam = CameraConfig()
    files = []
    # turntable: the camera circles once while the sequence plays (looping if needed)
    n = max(views, len(meshes))
    center, radius = bounding_sphere(np.concatenate([m.vertices for m in meshes]))
    for i in range(n):
        mesh = meshes[i % len(meshes)]
        az = 2 * math.pi * i / n if views > 1 else 0.0
        pose = CameraPose(az, 0.0, cam.radius_scale * radius, cam.fov, tuple(float(c) for c in center))
        name = f"preview_{i:05d}.png"
        save_png(render(mesh, pose, settings).rgb, out / name)
        files.append(name)
    write_frame_manifest(out, files, {"source": str(sequence), "views": views})
    print(f"wrote {len(files)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--db", dest="motion_db", help="motion database directory")
    common.add_argument("--body", help="body manifest path, or 'toy'")
    common.add_argument("--k", type=int, help="stage-1 candidate count")
    common.add_argument("--stage1-encoder")
    common.add_argument("--stage2-encoder")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="forge", description="Text-driven motion retrieval and mesh stylization.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("index", parents=[common], help="embed the motion database labels")
    s.add_argument("--init-toy", action="store_true", help="first write a small synthetic database to --db")

    s = sub.add_parser("retrieve", parents=[common], help="recommend a motion for a prompt")
    s.add_argument("--prompt", required=True)

    s = sub.add_parser("stylize", parents=[common], help="retrieve, optimize and export a stylized sequence")
    s.add_argument("--prompt", required=True)
    s.add_argument("--text-encoder")
    s.add_argument("--image-encoder")
    s.add_argument("--iterations", type=int)
    s.add_argument("--render-size", type=int)
    s.add_argument("--views", type=int)
    s.add_argument("--lr", type=float)

    s = sub.add_parser("eval-sick", parents=[common], help="sentence-pair retrieval precision")
    s.add_argument("--dataset", required=True, help="SICK-style TSV")
    s.add_argument("--variant", choices=VARIANTS, action="append")
    s.add_argument("--range", nargs=2, type=float, metavar=("LO", "HI"))

    s = sub.add_parser("export", parents=[common], help="export a stylized sequence from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--run", help="run directory whose run.json names the motion")
    s.add_argument("--motion", help="motion reference inside --db")
    s.add_argument("--format", choices=("ply", "gltf", "both"), default="ply")

    s = sub.add_parser("preview", parents=[common], help="render an exported sequence to PNG frames")
    s.add_argument("--sequence", required=True, help="directory holding sequence.json")
    s.add_argument("--views", type=int, default=1, help="turntable camera positions (1 = fixed front view)")
    s.add_argument("--size", type=int, default=224)
    return p


def _overrides(args: argparse.Namespace) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "seed": get("seed"),
        "out": get("out"),
        "motion_db": get("motion_db"),
        "body": get("body"),
        "k": get("k"),
        "stage1_encoder": get("stage1_encoder"),
        "stage2_encoder": get("stage2_encoder"),
        "text_encoder": get("text_encoder"),
        "image_encoder": get("image_encoder"),
        "optimization.seed": get("seed"),
        "optimization.iterations": get("iterations"),
        "optimization.render_size": get("render_size"),
        "optimization.n_views": get("views") if args.command == "stylize" else None,
        "optimization.learning_rate": get("lr"),
    }


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, _overrides(args))
        if args.command == "index":
            return cmd_index(cfg, args.init_toy)
        if args.command == "retrieve":
            return cmd_retrieve(cfg, args.prompt)
        if args.command == "stylize":
            return cmd_stylize(cfg, args.prompt)
        if args.command == "eval-sick":
            return cmd_eval_sick(cfg, args.dataset, args.variant or list(VARIANTS),
                                 tuple(args.range) if args.range else None)
        if args.command == "export":
            return cmd_export(cfg, args.checkpoint, args.run, args.motion, args.format)
        if args.command == "preview":
            return cmd_preview(cfg, args.sequence, args.views, args.size)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MotionDataError, BodyModelError, MeshError, ExportError, EncoderError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OptimizationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
