import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forge.embedding import ToyTextEncoder
from forge.motion_db import ActionLabelEntry, MotionClip, MotionDataError, MotionStore, read_motion, write_motion, write_motion_db
from forge.retrieval import (
    SentencePair,
    build_index,
    eval_precision,
    filter_pairs,
    load_sick,
    rank,
    retrieve,
    select_two_stage,
    stage1_match,
    stage2_rerank,
)


class TableEncoder:
    """Looks vectors up in a fixed table; unknown text raises."""

    def __init__(self, table: dict[str, np.ndarray], id: str = "table"):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.id = id
        self.dimension = len(next(iter(self.table.values())))

    def encode(self, text):
        return self.table[text]


def entries(labels):
    return [ActionLabelEntry(label, f"m{i}.bin") for i, label in enumerate(labels)]


def oracle(stage1, stage2, q1, q2, k):
    s1 = stage1 @ q1 / (np.linalg.norm(stage1, axis=1) * np.linalg.norm(q1))
    s2 = stage2 @ q2 / (np.linalg.norm(stage2, axis=1) * np.linalg.norm(q2))
    order = sorted(range(len(s1)), key=lambda i: (-s1[i], i))[:k]
    return max(order, key=lambda i: (s2[i], -order.index(i)))


def test_stage2_overrides_stage1_within_candidates():
    # stage 1 ranks a > b > c > d; stage 2 prefers c, and d is outside the top 3
    e1 = TableEncoder({"q": [1, 0], "a": [1, 0.1], "b": [1, 0.3], "c": [1, 0.6], "d": [0, 1]}, "s1")
    e2 = TableEncoder({"q": [1, 0], "a": [0, 1], "b": [0.2, 1], "c": [1, 0.1], "d": [1, 0]}, "s2")
    idx = build_index(entries("abcd"), e1, e2)
    cands = stage1_match(idx, "q", 3)
    assert [c.entry.label for c in cands] == ["a", "b", "c"]
    assert stage2_rerank(idx, cands, "q").entry.label == "c"
    best, scored = rank(idx, "q", 3)
    assert best.entry.label == "c"
    assert all(c.stage2_score is not None for c in scored)
    # with k = 4 the exact stage-2 match "d" becomes reachable
    assert retrieve(idx, "q", 4)[0].label == "d"


def test_k1_is_stage1_only():
    e1 = TableEncoder({"q": [1, 0], "a": [1, 0.1], "b": [0, 1]}, "s1")
    e2 = TableEncoder({"q": [1, 0], "a": [0, 1], "b": [1, 0]}, "s2")
    idx = build_index(entries("ab"), e1, e2)
    assert retrieve(idx, "q", 1)[0].label == "a"


def test_exact_label_query_wins():
    enc1, enc2 = ToyTextEncoder(64, seed=0), ToyTextEncoder(64, seed=1)
    labels = ["walk", "run forward", "jump up", "wave hand"]
    idx = build_index(entries(labels), enc1, enc2)
    for label in labels:
        assert retrieve(idx, label, 3)[0].label == label


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 5))
def test_matches_exhaustive_oracle(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    labels = [f"l{i}" for i in range(n)]
    t1 = {lab: rng.normal(size=4) for lab in labels} | {"q": rng.normal(size=4)}
    t2 = {lab: rng.normal(size=4) for lab in labels} | {"q": rng.normal(size=4)}
    idx = build_index(entries(labels), TableEncoder(t1, "s1"), TableEncoder(t2, "s2"))
    want = oracle(idx.stage1.astype(np.float64), idx.stage2.astype(np.float64),
                  np.float32(t1["q"]).astype(np.float64), np.float32(t2["q"]).astype(np.float64), k)
    assert retrieve(idx, "q", k)[0].label == labels[want]


def test_empty_query_rejected():
    idx = build_index(entries(["a"]), ToyTextEncoder(8), ToyTextEncoder(8, seed=1))
    with pytest.raises(ValueError):
        stage1_match(idx, "  ", 1)


def test_index_cache_reuse_and_staleness(tmp_path):
    ents = entries(["walk", "run"])
    enc = ToyTextEncoder(8, seed=0, id="a")
    idx = build_index(ents, enc, enc, tmp_path)
    assert (tmp_path / "stage1_embeddings.f32").is_file()
    # tamper with the cached table: a reused cache returns the tampered values
    raw = np.fromfile(tmp_path / "stage1_embeddings.f32", dtype="<f4")
    (raw * 0 + 7).astype("<f4").tofile(tmp_path / "stage1_embeddings.f32")
    again = build_index(ents, enc, enc, tmp_path)
    assert np.all(again.stage1 == 7)
    # a different encoder id invalidates the cache
    other = ToyTextEncoder(8, seed=0, id="b")
    fresh = build_index(ents, other, other, tmp_path)
    assert np.allclose(fresh.stage1, idx.stage1)


def test_select_two_stage():
    assert select_two_stage(np.array([0.9, 0.8, 0.1]), np.array([0.0, 0.5, 1.0]), 2) == 1
    assert select_two_stage(np.array([0.9, 0.8, 0.1]), np.array([0.0, 0.5, 1.0]), 3) == 2


# ---------------------------------------------------------------------------
# SICK harness
# ---------------------------------------------------------------------------


def test_precision_duplicate_pairs_is_100():
    enc1, enc2 = ToyTextEncoder(64), ToyTextEncoder(64, seed=1)
    sents = ["a man is walking", "a dog runs in the park", "two kids play soccer", "a woman slices an onion"]
    pairs = [SentencePair(s, s, 5.0) for s in sents]
    for v in ("stage1-only", "stage2-only", "stage2+stage1", "stage1+stage2"):
        assert eval_precision(pairs, v, enc1, enc2) == 100.0


def test_precision_hand_computed():
    # pool = sorted {x, y, z}; stage 1 sends q1 -> y (wrong), stage 2 sends q1 -> x (right)
    e1 = TableEncoder({"q1": [1, 0, 0], "q2": [0, 0, 1], "q3": [1, 0.05, 0],
                       "x": [0.6, 0.8, 0], "y": [1, 0.05, 0], "z": [0, 0, 1]}, "s1")
    e2 = TableEncoder({"q1": [1, 0, 0], "q2": [0, 1, 0], "q3": [0, 0, 1],
                       "x": [1, 0, 0], "y": [0, 0, 1], "z": [0, 1, 0]}, "s2")
    pairs = [SentencePair("q1", "x", 4.8), SentencePair("q2", "z", 4.8), SentencePair("q3", "y", 4.8)]
    assert eval_precision(pairs, "stage1-only", e1, e2) == pytest.approx(200 / 3)
    assert eval_precision(pairs, "stage2-only", e1, e2) == 100.0
    assert eval_precision(pairs, "stage1+stage2", e1, e2, k=2) == 100.0
    assert eval_precision(pairs, "stage1+stage2", e1, e2, k=1) == pytest.approx(200 / 3)
    # stage 2 first: q1's stage-2 top 2 is {x, y/z tie -> y}; stage 1 then prefers y
    assert eval_precision(pairs, "stage2+stage1", e1, e2, k=2) == pytest.approx(200 / 3)
    with pytest.raises(ValueError):
        eval_precision(pairs, "bogus", e1, e2)


def test_filter_pairs_and_ranges():
    pairs = [SentencePair("a", "b", s) for s in (4.4, 4.6, 4.8, 5.0)]
    assert [p.score for p in filter_pairs(pairs, 4.8)] == [4.8]
    assert [p.score for p in filter_pairs(pairs, 4.4, 4.8)] == [4.4, 4.6, 4.8]
    with pytest.raises(ValueError):
        SentencePair("a", "b", 5.5)


def test_load_sick(tmp_path):
    path = tmp_path / "sick.tsv"
    path.write_text("pair_ID\tsentence_A\tsentence_B\trelatedness_score\n1\ta b\tc d\t4.5\n")
    assert load_sick(path) == [SentencePair("a b", "c d", 4.5)]
    bad = tmp_path / "bad.tsv"
    bad.write_text("x\ty\n1\t2\n")
    with pytest.raises(ValueError, match="missing columns"):
        load_sick(bad)


# ---------------------------------------------------------------------------
# motion database
# ---------------------------------------------------------------------------


def test_motion_round_trip(tmp_path, rng):
    clip = MotionClip(rng.normal(size=(5, 8, 3)).astype(np.float32), rng.normal(size=10).astype(np.float32))
    write_motion(tmp_path / "m.bin", clip)
    assert (tmp_path / "m.bin").stat().st_size == 4 * (5 * 8 * 3 + 10)
    got = read_motion(tmp_path / "m.bin", 5)
    assert np.array_equal(got.poses, clip.poses)
    assert np.array_equal(got.shape, clip.shape)


def test_motion_store(tmp_path, rng):
    clip = MotionClip(rng.normal(size=(3, 8, 3)), np.zeros(10))
    store = write_motion_db(tmp_path, [("walk", clip), ("run", clip)])
    assert [e.label for e in store.entries] == ["walk", "run"]
    assert store.load("motion_00001.bin").frames == 3
    with pytest.raises(MotionDataError, match="unresolved"):
        store.load("missing.bin")
    (tmp_path / "motion_00000.bin").write_bytes(b"\0" * 12)
    with pytest.raises(MotionDataError):
        MotionStore(tmp_path).load("motion_00000.bin")


def test_index_retrieve_loads_motion(tmp_path, rng):
    clip = MotionClip(rng.normal(size=(2, 8, 3)), np.zeros(10))
    store = write_motion_db(tmp_path, [("walk", clip), ("jump up", clip)])
    idx = build_index(store.entries, ToyTextEncoder(16), ToyTextEncoder(16, seed=1))
    entry, got = retrieve(idx, "jump up", 2, store)
    assert entry.label == "jump up"
    assert np.allclose(got.poses, clip.poses.astype(np.float32))
