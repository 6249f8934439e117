"""Structural embedding training, triple scoring, ranking, candidate collection.

Three lightweight scorers are implemented on shared f64 numpy arrays:

* translation:  s(h,r,t) = -||h + r - t||_1
* bilinear:     s(h,r,t) = sum_i (h_i * r_i) * t_i
* rotation:     s(h,r,t) = -||h * e^{i theta_r} - t||_2, entities stored as
  [real | imag] halves, relation entries are phases wrapped into [0, 2pi).

Training is plain minibatch SGD on the margin ranking loss
max(0, margin - s(pos) + s(neg)) with uniform head-or-tail corruption.
A fixed seed makes training bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError
from .graph import HEAD, TAIL, CompletionQuery, KnowledgeGraph, known_true_answers

MODEL_KINDS = ("transe", "distmult", "rotate")

_EMB_MAGIC = b"EMBX"
_EMB_VERSION = 1
_KIND_CODES = {"transe": 1, "distmult": 2, "rotate": 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class EmbeddingConfig:
    model_kind: str = "transe"
    dim: int = 32
    epochs: int = 200
    lr: float = 0.05
    negatives: int = 4
    margin: float = 1.0
    batch_size: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.dim <= 0:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.epochs < 0 or self.negatives < 1 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0, negatives and batch_size >= 1")


@dataclass
class GlobalEmbeddings:
    """Per-entity and per-relation vectors for one scorer kind.

    ``entity_vecs`` is (|E|, d) except for the rotation model where it is
    (|E|, 2d) holding real and imaginary halves. ``rel_vecs`` is (|R|, d).
    """

    model_kind: str
    entity_vecs: np.ndarray
    rel_vecs: np.ndarray
    dim: int
    loss_trace: list[float] = field(default_factory=list)

    @property
    def d_global(self) -> int:
        return self.entity_vecs.shape[1]

    def check_finite(self) -> None:
        if not (np.isfinite(self.entity_vecs).all() and np.isfinite(self.rel_vecs).all()):
            raise ValueError("embeddings contain non-finite entries")

    def save(self, path: str | Path) -> None:
        ne, _ = self.entity_vecs.shape
        nr, _ = self.rel_vecs.shape
        with open(path, "wb") as fh:
            fh.write(_EMB_MAGIC)
            fh.write(struct.pack("<IIQQQ", _EMB_VERSION, _KIND_CODES[self.model_kind], ne, nr, self.dim))
            fh.write(np.ascontiguousarray(self.entity_vecs, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(self.rel_vecs, dtype=np.float64).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "GlobalEmbeddings":
        with open(path, "rb") as fh:
            if fh.read(4) != _EMB_MAGIC:
                raise ParseError(f"{path}: not an embedding checkpoint")
            version, code, ne, nr, dim = struct.unpack("<IIQQQ", fh.read(4 + 4 + 24))
            if version != _EMB_VERSION:
                raise ParseError(f"{path}: unsupported checkpoint version {version}")
            kind = _CODE_KINDS[code]
            ent_cols = 2 * dim if kind == "rotate" else dim
            ent = np.frombuffer(fh.read(ne * ent_cols * 8), dtype=np.float64).reshape(ne, ent_cols).copy()
            rel = np.frombuffer(fh.read(nr * dim * 8), dtype=np.float64).reshape(nr, dim).copy()
        return cls(model_kind=kind, entity_vecs=ent, rel_vecs=rel, dim=dim)


def init_embeddings(kg: KnowledgeGraph, config: EmbeddingConfig) -> GlobalEmbeddings:
    """Seeded random initialization; entities/relations unseen in train get zeros."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.dim
    scale = 1.0 / np.sqrt(d)
    ent_cols = 2 * d if config.model_kind == "rotate" else d
    ent = rng.normal(0.0, scale, size=(kg.num_entities, ent_cols))
    if config.model_kind == "rotate":
        rel = rng.uniform(0.0, 2.0 * np.pi, size=(kg.num_relations, d))
    else:
        rel = rng.normal(0.0, scale, size=(kg.num_relations, d))
    for e in kg.unseen_entities:
        ent[e] = 0.0
    for r in kg.unseen_relations:
        rel[r] = 0.0
    return GlobalEmbeddings(config.model_kind, ent, rel, d)


# -- scoring ----------------------------------------------------------------
#
# All paths below keep the same per-row arithmetic (grouping and reduction
# order), so a scalar score and the corresponding row of an all-entity score
# vector are bit-identical.


def _score_rows(kind: str, dim: int, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    if kind == "transe":
        return -np.abs((h + r) - t).sum(axis=-1)
    if kind == "distmult":
        return ((h * r) * t).sum(axis=-1)
    if kind == "rotate":
        hr, hi = h[..., :dim], h[..., dim:]
        tr_, ti = t[..., :dim], t[..., dim:]
        c, s = np.cos(r), np.sin(r)
        dr = (hr * c - hi * s) - tr_
        di = (hr * s + hi * c) - ti
        return -np.sqrt((dr * dr + di * di).sum(axis=-1))
    raise ConfigError(f"unknown model kind {kind!r}")


def score_triple(emb: GlobalEmbeddings, h: int, r: int, t: int) -> float:
    ne = emb.entity_vecs.shape[0]
    nr = emb.rel_vecs.shape[0]
    if not (0 <= h < ne and 0 <= t < ne and 0 <= r < nr):
        raise ValueError(f"ids out of range for embedding tables: ({h},{r},{t})")
    return float(
        _score_rows(emb.model_kind, emb.dim, emb.entity_vecs[h], emb.rel_vecs[r], emb.entity_vecs[t])
    )


def score_against_all(emb: GlobalEmbeddings, query: CompletionQuery) -> np.ndarray:
    """Score of every entity substituted into the missing slot of the query."""
    rel = emb.rel_vecs[query.rel]
    known = emb.entity_vecs[query.known_entity]
    if query.direction == HEAD:
        return _score_rows(emb.model_kind, emb.dim, emb.entity_vecs, rel, known)
    return _score_rows(emb.model_kind, emb.dim, known, rel, emb.entity_vecs)


# -- training ----------------------------------------------------------------


def _accumulate_margin_grads(
    emb: GlobalEmbeddings,
    ent_grad: np.ndarray,
    rel_grad: np.ndarray,
    hs: np.ndarray,
    rs: np.ndarray,
    ts: np.ndarray,
    coeff: np.ndarray,
) -> None:
    """Accumulate -coeff_i * ds/dparam for each triple row.

    Margin-loss chain rule: positives pass coeff = +weight (dL/ds = -1),
    negatives pass coeff = -weight (dL/ds = +1).
    """
    kind, d = emb.model_kind, emb.dim
    H = emb.entity_vecs[hs]
    R = emb.rel_vecs[rs]
    T = emb.entity_vecs[ts]
    c = coeff[:, None]
    if kind == "transe":
        g = np.sign((H + R) - T)  # ds/dh = -g, ds/dr = -g, ds/dt = +g
        np.add.at(ent_grad, hs, c * g)
        np.add.at(rel_grad, rs, c * g)
        np.add.at(ent_grad, ts, -c * g)
        return
    if kind == "distmult":
        np.add.at(ent_grad, hs, -c * (R * T))
        np.add.at(rel_grad, rs, -c * (H * T))
        np.add.at(ent_grad, ts, -c * (H * R))
        return
    # rotation
    hr, hi = H[:, :d], H[:, d:]
    tr_, ti = T[:, :d], T[:, d:]
    cos, sin = np.cos(R), np.sin(R)
    dr = (hr * cos - hi * sin) - tr_
    di = (hr * sin + hi * cos) - ti
    norm = np.sqrt((dr * dr + di * di).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    ur = dr / safe[:, None]  # ds/d(dr) = -ur
    ui = di / safe[:, None]
    ur[norm == 0] = 0.0
    ui[norm == 0] = 0.0
    gh = np.concatenate([ur * cos + ui * sin, -ur * sin + ui * cos], axis=1)
    gt = np.concatenate([-ur, -ui], axis=1)
    g_theta = ur * (-hr * sin - hi * cos) + ui * (hr * cos - hi * sin)
    np.add.at(ent_grad, hs, c * gh)
    np.add.at(ent_grad, ts, c * gt)
    np.add.at(rel_grad, rs, c * g_theta)


def train_global(kg: KnowledgeGraph, config: EmbeddingConfig) -> GlobalEmbeddings:
    """Train global embeddings on the train split.

    Returns the embeddings with a per-epoch mean-loss trace attached.
    With epochs == 0 the seeded initialization is returned unchanged.
    """
    config.validate()
    if not kg.train:
        raise ValueError("cannot train on an empty train split")
    emb = init_embeddings(kg, config)
    if config.epochs == 0:
        return emb
    rng = np.random.default_rng(config.seed + 1)
    triples = np.asarray(kg.train, dtype=np.int64)
    n = len(triples)
    n_ent = kg.num_entities
    neg = config.negatives
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        terms = 0
        for start in range(0, n, config.batch_size):
            batch = triples[order[start : start + config.batch_size]]
            b = len(batch)
            hs, rs, ts = batch[:, 0], batch[:, 1], batch[:, 2]
            corrupt_head = rng.random((b, neg)) < 0.5
            rand_ent = rng.integers(0, n_ent, size=(b, neg))
            neg_h = np.where(corrupt_head, rand_ent, hs[:, None])
            neg_t = np.where(corrupt_head, ts[:, None], rand_ent)

            s_pos = _score_rows(
                emb.model_kind, emb.dim, emb.entity_vecs[hs], emb.rel_vecs[rs], emb.entity_vecs[ts]
            )
            neg_hf, neg_tf = neg_h.ravel(), neg_t.ravel()
            rs_f = np.repeat(rs, neg)
            s_neg = _score_rows(
                emb.model_kind,
                emb.dim,
                emb.entity_vecs[neg_hf],
                emb.rel_vecs[rs_f],
                emb.entity_vecs[neg_tf],
            ).reshape(b, neg)

            viol = (config.margin - s_pos[:, None] + s_neg) > 0
            epoch_loss += float(np.maximum(0.0, config.margin - s_pos[:, None] + s_neg).sum())
            terms += b * neg
            if not viol.any():
                continue

            scale = 1.0 / (b * neg)
            ent_grad = np.zeros_like(emb.entity_vecs)
            rel_grad = np.zeros_like(emb.rel_vecs)
            pos_coeff = viol.sum(axis=1).astype(np.float64) * scale
            _accumulate_margin_grads(emb, ent_grad, rel_grad, hs, rs, ts, pos_coeff)
            vf = viol.ravel()
            neg_coeff = -np.ones(vf.sum(), dtype=np.float64) * scale
            _accumulate_margin_grads(
                emb, ent_grad, rel_grad, neg_hf[vf], rs_f[vf], neg_tf[vf], neg_coeff
            )
            emb.entity_vecs -= config.lr * ent_grad
            emb.rel_vecs -= config.lr * rel_grad
            if emb.model_kind == "rotate":
                np.mod(emb.rel_vecs, 2.0 * np.pi, out=emb.rel_vecs)

        mean_loss = epoch_loss / max(terms, 1)
        if not np.isfinite(mean_loss):
            raise RuntimeError(f"non-finite training loss at epoch {epoch + 1}: {mean_loss}")
        emb.loss_trace.append(mean_loss)

    # Keep the convention that entities/relations absent from train stay at
    # the zero vector (uniform corruption may have nudged them).
    for e in kg.unseen_entities:
        emb.entity_vecs[e] = 0.0
    for r in kg.unseen_relations:
        emb.rel_vecs[r] = 0.0
    emb.check_finite()
    return emb


# -- ranking and candidates ---------------------------------------------------


@dataclass
class CandidateSet:
    """Top-k replacement entities for one query, in non-increasing score order."""

    query: CompletionQuery
    entities: list[int]
    scores: list[float]

    def __post_init__(self) -> None:
        if len(self.entities) != len(self.scores):
            raise ValueError("entities and scores must be parallel")
        if len(set(self.entities)) != len(self.entities):
            raise ValueError("candidate set contains duplicates")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("candidate scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.entities)


def eligible_mask(kg: KnowledgeGraph, query: CompletionQuery) -> np.ndarray:
    """True for entities whose completed triple is NOT already a train fact."""
    mask = np.ones(kg.num_entities, dtype=bool)
    if query.direction == HEAD:
        existing = kg.heads_of(query.known_entity, query.rel)
    else:
        existing = kg.tails_of(query.known_entity, query.rel)
    if existing:
        mask[list(existing)] = False
    return mask


def rank_from_scores(
    kg: KnowledgeGraph,
    query: CompletionQuery,
    scores: np.ndarray,
    filtered: bool = False,
) -> list[tuple[int, float]]:
    """Order eligible entities by score desc, ties by ascending id.

    When ``filtered`` is set, known-true answers other than the query's gold
    are removed as well.
    """
    mask = eligible_mask(kg, query)
    if filtered:
        for e in known_true_answers(kg, query):
            if e != query.gold:
                mask[e] = False
    ids = np.arange(kg.num_entities)
    order = np.lexsort((ids, -scores))
    return [(int(e), float(scores[e])) for e in order if mask[e]]


def rank_entities(
    kg: KnowledgeGraph,
    emb: GlobalEmbeddings,
    query: CompletionQuery,
    filtered: bool = False,
) -> list[tuple[int, float]]:
    return rank_from_scores(kg, query, score_against_all(emb, query), filtered=filtered)


def collect_candidates(
    kg: KnowledgeGraph, emb: GlobalEmbeddings, query: CompletionQuery, k: int
) -> CandidateSet:
    """Top-k prefix of the raw (unfiltered) ranking.

    Filtering is an evaluation-time construct; candidate collection always
    works on the raw eligible ranking. Fewer than k eligible entities simply
    yields a shorter set.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ranked = rank_entities(kg, emb, query, filtered=False)[:k]
    return CandidateSet(
        query=query, entities=[e for e, _ in ranked], scores=[s for _, s in ranked]
    )


# -- external rankings ---------------------------------------------------------


class ExternalRankings:
    """Precomputed per-query entity orderings ingested from JSONL.

    One record per query:
    ``{"direction": "head"|"tail", "known_entity": key, "rel": key,
    "ranked_entities": [key, ...]}``. Rankings are re-checked against the
    train-membership eligibility rule on use.
    """

    def __init__(self, table: dict[tuple[str, int, int], list[int]]) -> None:
        self._table = table

    def __len__(self) -> int:
        return len(self._table)

    def get(self, query: CompletionQuery) -> Optional[list[int]]:
        return self._table.get((query.direction, query.known_entity, query.rel))

    def scores_for(self, kg: KnowledgeGraph, query: CompletionQuery) -> Optional[np.ndarray]:
        """Synthetic descending scores: listed entities get len-position, others -1."""
        ranked = self.get(query)
        if ranked is None:
            return None
        scores = np.full(kg.num_entities, -1.0)
        n = len(ranked)
        for pos, e in enumerate(ranked):
            scores[e] = float(n - pos)
        return scores


def load_external_rankings(path: str | Path, kg: KnowledgeGraph) -> ExternalRankings:
    table: dict[tuple[str, int, int], list[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                direction = rec["direction"]
                if direction not in (HEAD, TAIL):
                    raise KeyError(f"bad direction {direction!r}")
                known = kg.resolve_entity(rec["known_entity"])
                rel = kg.resolve_relation(rec["rel"])
                ranked = [kg.resolve_entity(e) for e in rec["ranked_entities"]]
            except (KeyError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            table[(direction, known, rel)] = ranked
    return ExternalRankings(table)
