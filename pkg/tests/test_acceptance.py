"""Acceptance criteria, one test each; every test prints a PASS/FAIL/SKIP line.

Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import forge.optimize as optimize
from conftest import record_criterion
from forge.body import lbs, make_toy_body, motion_to_meshes, toy_motion
from forge.embedding import EncoderError, ToyImageEncoder, ToyTextEncoder, get_encoder
from forge.export import read_ply, write_ply
from forge.mesh import icosphere, subdivide, tetrahedron
from forge.motion_db import ActionLabelEntry
from forge.optimize import (
    OptimizationConfig,
    StyleProblem,
    evaluate_loss,
    iteration_loss,
    mask_weighted_mean,
    optimize_dnsf,
    semantic_loss,
    stylize_motion,
)
from forge.retrieval import build_index, eval_precision, load_sick, retrieve
from forge.style_field import MAX_DISPLACEMENT, StyleAttributes, StyleFieldArch, apply_style, dnsf_forward, init_params

SMOKE_PROMPT = "a person dancing happily"


# ---------------------------------------------------------------------------
# 1. sentence-pair retrieval precision with pretrained encoders (network-gated)
# ---------------------------------------------------------------------------

REFERENCE_PRECISION = {"SICK4.8": ((4.8, 4.8), 92.24), "SICK4.4": ((4.4, 4.4), 85.75),
                       "SICK[4.4,4.8]": ((4.4, 4.8), 81.90)}


def test_criterion_1_sick_precision():
    path = os.environ.get("FORGE_SICK")
    if not path or not Path(path).is_file():
        record_criterion("1", None, "set FORGE_SICK to the SICK TSV (and cache the clip-text / mpnet models) to run")
        pytest.skip("SICK dataset not available")
    clip, mpnet = get_encoder("clip-text"), get_encoder("mpnet")
    try:
        clip.encode("warm up"), mpnet.encode("warm up")
    except EncoderError as exc:
        record_criterion("1", None, f"pretrained encoders unavailable: {exc}")
        pytest.skip(str(exc))
    pairs = load_sick(path)
    t0 = time.perf_counter()
    got, ok = {}, True
    for name, (rng, want) in REFERENCE_PRECISION.items():
        got[name] = eval_precision(pairs, "stage1+stage2", clip, mpnet, rng)
        ok &= abs(got[name] - want) <= 1.5
    clip_only = eval_precision(pairs, "stage1-only", clip, mpnet, (4.4, 4.8))
    ok &= got["SICK[4.4,4.8]"] >= clip_only
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    detail = ", ".join(f"{k}={v:.2f}" for k, v in got.items())
    record_criterion("1", ok, f"{detail}, clip-only[4.4,4.8]={clip_only:.2f}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. retrieval oracle equivalence
# ---------------------------------------------------------------------------


class _Table:
    def __init__(self, table, id):
        self.table, self.id = table, id
        self.dimension = len(next(iter(table.values())))

    def encode(self, text):
        return self.table[text]


def _oracle(stage1, stage2, q1, q2, k):
    s1 = [float(r @ q1 / (np.linalg.norm(r) * np.linalg.norm(q1))) for r in stage1]
    s2 = [float(r @ q2 / (np.linalg.norm(r) * np.linalg.norm(q2))) for r in stage2]
    cands = sorted(range(len(s1)), key=lambda i: (-s1[i], i))[:k]
    best = cands[0]
    for i in cands[1:]:
        if s2[i] > s2[best]:
            best = i
    return best


def test_criterion_2_retrieval_oracle():
    t0 = time.perf_counter()
    matches, trials = 0, 1000
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, n + 1))
        labels = [f"label {i}" for i in range(n)]
        t1 = {lab: rng.normal(size=16) for lab in labels + ["query"]}
        t2 = {lab: rng.normal(size=16) for lab in labels + ["query"]}
        idx = build_index([ActionLabelEntry(lab, f"m{i}") for i, lab in enumerate(labels)],
                          _Table(t1, "s1"), _Table(t2, "s2"))
        # the oracle scans the same float32 tables the index stores
        want = _oracle(idx.stage1.astype(np.float64), idx.stage2.astype(np.float64),
                       np.float32(t1["query"]).astype(np.float64), np.float32(t2["query"]).astype(np.float64), k)
        matches += retrieve(idx, "query", k)[0].label == labels[want]
    elapsed = time.perf_counter() - t0
    ok = matches == trials and elapsed < 30
    record_criterion("2", ok, f"{matches}/{trials} exact matches in {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. end-to-end gradient check through field, skinning offsets, renderer and encoder
# ---------------------------------------------------------------------------


def test_criterion_3_end_to_end_gradient():
    t0 = time.perf_counter()
    body = make_toy_body()
    meshes = motion_to_meshes(body, toy_motion(4, seed=2))
    te, ie = ToyTextEncoder(16), ToyImageEncoder(16)
    cfg = OptimizationConfig(n_views=2, render_size=32, background=(0.0, 0.0, 0.0),
                             arch=StyleFieldArch(n_frequencies=16, width=16, depth=2, zero_heads=False))
    field_ = init_params(cfg.arch, seed=4, dtype=torch.float64)
    problem = StyleProblem.build(body, meshes, [1, 3], te.encode(SMOKE_PROMPT), ie, cfg, dtype=torch.float64)

    def loss():
        total, _ = iteration_loss(field_, problem, np.random.default_rng(11))
        return total

    field_.zero_grad()
    loss().backward()
    params = [p for p in field_.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(0)
    flat_ids = rng.choice(sizes.sum(), size=20, replace=False)
    h, errs = 1e-4, []
    for fid in flat_ids:
        which = int(np.searchsorted(np.cumsum(sizes), fid, side="right"))
        p = params[which].view(-1)
        i = int(fid - (sizes[:which].sum() if which else 0))
        with torch.no_grad():
            orig = p[i].item()
            p[i] = orig + h
            up = loss().item()
            p[i] = orig - h
            down = loss().item()
            p[i] = orig
        fd = (up - down) / (2 * h)
        an = params[which].grad.view(-1)[i].item()
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    errs = np.array(errs)
    frac = float(np.mean(errs < 1e-3))
    elapsed = time.perf_counter() - t0
    ok = frac >= 0.95 and elapsed < 120
    record_criterion("3", ok, f"{frac:.0%} of 20 coordinates within 1e-3 (max rel err {errs.max():.1e}), "
                              f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4 + 5. optimization smoke run, determinism and decoupling
# ---------------------------------------------------------------------------

SMOKE = OptimizationConfig(iterations=300, learning_rate=5e-3, n_views=3, frame_top_k=2, render_size=32,
                           background=(0.0, 0.0, 0.0), seed=0,
                           arch=StyleFieldArch(n_frequencies=64, width=64, depth=2))


@pytest.fixture(scope="module")
def smoke_runs():
    body = make_toy_body()
    meshes = motion_to_meshes(body, toy_motion(8))
    te, ie = ToyTextEncoder(4), ToyImageEncoder(4)
    t0 = time.perf_counter()
    runs = [optimize_dnsf(SMOKE, body, meshes, SMOKE_PROMPT, te, ie) for _ in range(2)]
    elapsed = time.perf_counter() - t0
    return body, meshes, te, ie, runs, elapsed


def test_criterion_4_optimization_smoke(smoke_runs):
    body, meshes, te, ie, runs, elapsed = smoke_runs
    (field_a, rep_a), (_, rep_b) = runs
    identical = rep_a.total == rep_b.total and rep_a.levels == rep_b.levels
    # initial and final losses are scored on the same fixed camera/augmentation draws
    problem = StyleProblem.build(body, meshes, rep_a.frame_indices, te.encode(SMOKE_PROMPT), ie, SMOKE,
                                 settings=SMOKE.settings)
    start = init_params(SMOKE.arch, SMOKE.seed)
    initial = np.mean([evaluate_loss(start, problem, s) for s in range(3)])
    final = np.mean([evaluate_loss(field_a, problem, s) for s in range(3)])
    ratio = final / initial
    train_ratio = np.mean(rep_a.total[-10:]) / rep_a.total[0]
    ok = ratio <= 0.5 and identical and elapsed < 300 and rep_a.skipped == 0
    record_criterion("4", ok, f"final/initial = {final:.4f}/{initial:.4f} = {ratio:.3f} "
                              f"(training-history tail ratio {train_ratio:.3f}); histories bitwise "
                              f"{'identical' if identical else 'DIFFERENT'}; two runs {elapsed:.0f}s")
    assert ok


def test_criterion_5_decoupling(smoke_runs, monkeypatch):
    body, meshes, _, _, runs, _ = smoke_runs
    field_ = runs[0][0]
    seen = []
    real = optimize.apply_style

    def spy(mesh, style):
        seen.append((style.colors.numpy().copy(), style.displacements.numpy().copy()))
        return real(mesh, style)

    monkeypatch.setattr(optimize, "apply_style", spy)
    styled = stylize_motion(field_, body, meshes)
    c0, d0 = seen[0]
    same = len(seen) == len(meshes) and all(np.array_equal(c, c0) and np.array_equal(d, d0) for c, d in seen)
    same &= all(np.array_equal(s.colors, styled[0].colors) for s in styled)
    moved = np.abs(d0).max()
    record_criterion("5", same, f"(c, d) bitwise identical across {len(meshes)} frames; max|d| = {moved:.4f}")
    assert same


# ---------------------------------------------------------------------------
# 6. bounds
# ---------------------------------------------------------------------------


def test_criterion_6_bounds():
    arch = StyleFieldArch(n_frequencies=32, width=32, depth=2, zero_heads=False)
    gen = torch.Generator().manual_seed(0)
    pts = torch.randn(500, 3, generator=gen)
    bad = 0
    for draw in range(100):
        field_ = init_params(arch, seed=draw)
        with torch.no_grad():
            scale = 10 ** (draw / 50 - 1)  # 0.1 .. 10
            for p in field_.parameters():
                p.mul_(scale)
            out = dnsf_forward(field_, pts)
        bad += int((out.colors < 0).sum() + (out.colors > 1).sum() + (out.displacements.abs() > MAX_DISPLACEMENT).sum())
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(10_000):
        dim = int(rng.integers(2, 64))
        a = torch.tensor(rng.normal(size=dim) * 10 ** rng.uniform(-3, 3))
        b = rng.normal(size=dim) * 10 ** rng.uniform(-3, 3)
        if rng.uniform() < 0.1:  # include exactly (anti)parallel pairs
            b = a.numpy() * rng.choice([-1.0, 1.0]) * 3.0
        losses.append(float(semantic_loss(a, b)))
    lo, hi = min(losses), max(losses)
    ok = bad == 0 and lo >= 0 and hi <= 2
    record_criterion("6", ok, f"{bad} field-bound violations over 100 draws; loss range [{lo:.3g}, {hi:.3g}]")
    assert ok


# ---------------------------------------------------------------------------
# 7. mask-weighted mean degeneracies
# ---------------------------------------------------------------------------


def test_criterion_7_mask_weighted_mean():
    rng = np.random.default_rng(0)
    worst, exact = 0.0, True
    for _ in range(200):
        n = int(rng.integers(1, 12))
        e = torch.tensor(rng.normal(size=(n, 16)) * 10)
        w = float(rng.uniform(0.01, 1.0))
        worst = max(worst, float((mask_weighted_mean(e, [w] * n) - e.mean(0)).abs().max()))
        j = int(rng.integers(n))
        one_hot = np.zeros(n)
        one_hot[j] = rng.uniform(0.01, 1.0)
        exact &= torch.equal(mask_weighted_mean(e, one_hot), e[j])
    ok = worst <= 1e-6 and exact
    record_criterion("7", ok, f"max deviation from arithmetic mean {worst:.1e}; one-hot exact: {exact}")
    assert ok


# ---------------------------------------------------------------------------
# 8. geometry
# ---------------------------------------------------------------------------


def test_criterion_8_geometry():
    m, _ = subdivide(tetrahedron(), 1)
    counts = (m.n_vertices, len(m.faces))
    body = make_toy_body()
    lbs_err = float(np.abs(lbs(body, np.zeros((body.n_joints, 3))).vertices - body.template).max())
    sphere = icosphere(2)
    style = StyleAttributes(torch.zeros(sphere.n_vertices, 3), torch.full((sphere.n_vertices,), 0.1))
    r = np.linalg.norm(apply_style(sphere, style).vertices, axis=1)
    r_err = float(np.abs(r - 1.1).max())
    ok = counts == (10, 16) and lbs_err <= 1e-6 and r_err <= 1e-3
    record_criterion("8", ok, f"subdivided tetrahedron V,F = {counts}; lbs identity error {lbs_err:.1e}; "
                              f"displaced sphere radius error {r_err:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 9. PLY round trip
# ---------------------------------------------------------------------------


def test_criterion_9_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    body = make_toy_body()
    mesh = body.template_mesh().with_colors(rng.uniform(size=(body.n_vertices, 3)))
    ok = True
    for fmt in ("ascii", "binary_little_endian"):
        got = read_ply(write_ply(mesh, tmp_path / f"{fmt}.ply", fmt))
        ok &= np.array_equal(got.vertices, mesh.vertices.astype(np.float32).astype(np.float64))
        ok &= np.array_equal(got.colors, mesh.colors.astype(np.float32).astype(np.float64))
        ok &= np.array_equal(got.faces, mesh.faces)
    record_criterion("9", ok, f"{mesh.n_vertices} vertices and colors reproduced exactly at float32, ascii and binary")
    assert ok
