"""Two-stage text-to-motion recommendation and the SICK precision harness."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import (
    cosine_scores,
    encode_texts,
    load_embedding_cache,
    save_embedding_cache,
    top_k,
)
from .motion_db import ActionLabelEntry, MotionClip, MotionStore

log = logging.getLogger(__name__)

DEFAULT_K = 3
VARIANTS = ("stage1-only", "stage2-only", "stage2+stage1", "stage1+stage2")


@dataclass
class MotionIndex:
    entries: list[ActionLabelEntry]
    stage1: np.ndarray  # (n, D1) float32
    stage2: np.ndarray  # (n, D2) float32
    stage1_id: str
    stage2_id: str
    stage1_encoder: object = field(default=None, repr=False, compare=False)
    stage2_encoder: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.entries)
        if self.stage1.shape[0] != n or self.stage2.shape[0] != n:
            raise ValueError(
                f"embedding rows ({self.stage1.shape[0]}, {self.stage2.shape[0]}) != entries ({n})"
            )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]


@dataclass(frozen=True)
class Candidate:
    row: int
    entry: ActionLabelEntry
    stage1_score: float
    stage2_score: float | None = None


def _item_ids(entries: Sequence[ActionLabelEntry]) -> list[str]:
    return [f"{e.motion_ref}\t{e.label}" for e in entries]


def build_index(entries, stage1_encoder, stage2_encoder, cache_dir: str | Path | None = None) -> MotionIndex:
    """Embed every label with both encoders; persist the tables if ``cache_dir`` is given.

    With a ``cache_dir``, a table is reused only when its sidecar names the same
    encoder id and the same item list; otherwise it is recomputed.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("cannot build an index from zero entries")
    labels = [e.label for e in entries]
    ids = _item_ids(entries)
    tables = []
    for stage, enc in (("stage1", stage1_encoder), ("stage2", stage2_encoder)):
        table = None
        if cache_dir is not None:
            stem = Path(cache_dir) / f"{stage}_embeddings"
            if stem.with_suffix(".json").is_file():
                cached, meta = load_embedding_cache(stem)
                if meta["encoder_id"] == enc.id and meta["item_ids"] == ids:
                    table = cached
                else:
                    log.info("%s cache stale (encoder %s -> %s); rebuilding", stage, meta["encoder_id"], enc.id)
        if table is None:
            table = encode_texts(enc, labels).astype(np.float32)
            if cache_dir is not None:
                save_embedding_cache(Path(cache_dir) / f"{stage}_embeddings", table, enc.id, ids)
        tables.append(table)
    return MotionIndex(entries, tables[0], tables[1], stage1_encoder.id, stage2_encoder.id,
                       stage1_encoder, stage2_encoder)


def _query_vector(encoder, query: str) -> np.ndarray:
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    if encoder is None:
        raise ValueError("index has no encoder attached for this stage")
    return np.asarray(encoder.encode(query), dtype=np.float32).astype(np.float64)


def stage1_match(index: MotionIndex, query: str, k: int = DEFAULT_K) -> list[Candidate]:
    scores = cosine_scores(index.stage1, _query_vector(index.stage1_encoder, query))
    rows, vals = top_k(scores, k)
    return [Candidate(int(r), index.entries[r], float(v)) for r, v in zip(rows, vals)]


def stage2_rerank(index: MotionIndex, candidates: Sequence[Candidate], query: str) -> Candidate:
    """Pick the candidate with the highest stage-2 similarity (first wins ties)."""
    if not candidates:
        raise ValueError("no candidates to re-rank")
    rows = [c.row for c in candidates]
    scores = cosine_scores(index.stage2[rows], _query_vector(index.stage2_encoder, query))
    best = int(np.argmax(scores))
    c = candidates[best]
    return Candidate(c.row, c.entry, c.stage1_score, float(scores[best]))


def rank(index: MotionIndex, query: str, k: int = DEFAULT_K) -> tuple[Candidate, list[Candidate]]:
    """Run both stages; return the winner and all candidates with both scores."""
    cands = stage1_match(index, query, k)
    rows = [c.row for c in cands]
    s2 = cosine_scores(index.stage2[rows], _query_vector(index.stage2_encoder, query))
    scored = [Candidate(c.row, c.entry, c.stage1_score, float(s)) for c, s in zip(cands, s2)]
    return scored[int(np.argmax(s2))], scored


def retrieve(index: MotionIndex, query: str, k: int = DEFAULT_K,
             store: MotionStore | None = None) -> tuple[ActionLabelEntry, MotionClip | None]:
    best = stage2_rerank(index, stage1_match(index, query, k), query)
    if store is None:
        return best.entry, None
    return best.entry, store.load(best.entry.motion_ref)


# ---------------------------------------------------------------------------
# SICK evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SentencePair:
    sentence_a: str
    sentence_b: str
    score: float

    def __post_init__(self):
        if not 1.0 <= self.score <= 5.0:
            raise ValueError(f"relatedness score {self.score} outside [1, 5]")


def load_sick(path: str | Path) -> list[SentencePair]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = {"sentence_A", "sentence_B", "relatedness_score"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            SentencePair(row["sentence_A"], row["sentence_B"], float(row["relatedness_score"]))
            for row in reader
        ]


def filter_pairs(pairs: Sequence[SentencePair], lo: float, hi: float | None = None) -> list[SentencePair]:
    hi = lo if hi is None else hi
    return [p for p in pairs if lo - 1e-9 <= p.score <= hi + 1e-9]


def select_two_stage(first: np.ndarray, second: np.ndarray, k: int) -> int:
    rows, _ = top_k(first, k)
    return int(rows[int(np.argmax(second[rows]))])


def eval_precision(pairs: Sequence[SentencePair], variant: str, stage1_encoder, stage2_encoder,
                   score_range: tuple[float, float] | None = None, k: int = DEFAULT_K) -> float:
    """Percentage of pairs whose ``sentence_a`` retrieves its own ``sentence_b``.

    The candidate pool is every distinct ``sentence_b`` of the filtered set.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if score_range is not None:
        pairs = filter_pairs(pairs, *score_range)
    if not pairs:
        raise ValueError("no sentence pairs left after filtering")

    pool = sorted({p.sentence_b for p in pairs})
    queries = sorted({p.sentence_a for p in pairs})
    pool_pos = {s: i for i, s in enumerate(pool)}
    query_pos = {s: i for i, s in enumerate(queries)}

    need1 = variant != "stage2-only"
    need2 = variant != "stage1-only"
    sims1 = _similarity_matrix(stage1_encoder, queries, pool) if need1 else None
    sims2 = _similarity_matrix(stage2_encoder, queries, pool) if need2 else None
    kk = min(k, len(pool))

    hits = 0
    for p in pairs:
        q = query_pos[p.sentence_a]
        if variant == "stage1-only":
            got = int(np.argmax(sims1[q]))
        elif variant == "stage2-only":
            got = int(np.argmax(sims2[q]))
        elif variant == "stage1+stage2":
            got = select_two_stage(sims1[q], sims2[q], kk)
        else:
            got = select_two_stage(sims2[q], sims1[q], kk)
        hits += got == pool_pos[p.sentence_b]
    return 100.0 * hits / len(pairs)


def _similarity_matrix(encoder, queries: Sequence[str], pool: Sequence[str]) -> np.ndarray:
    q = encode_texts(encoder, queries)
    p = encode_texts(encoder, pool)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    return q @ p.T
