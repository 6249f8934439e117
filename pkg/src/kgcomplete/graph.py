"""Indexed triple store: loading, adjacency, shortest paths, known-true lookups.

Entities and relations get dense integer ids in first-seen order over
train, then valid, then test. All adjacency indices cover the train split
only; the known-true maps cover the union of the three splits.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ParseError

logger = logging.getLogger(__name__)

Triple = tuple[int, int, int]  # (head, relation, tail)

HEAD = "head"  # query (?, r, t): predict the head
TAIL = "tail"  # query (h, r, ?): predict the tail

_CACHE_MAGIC = b"KGCX"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class CompletionQuery:
    """One incomplete triple: direction says which side is missing.

    For a head query the known entity is the tail; for a tail query it is
    the head. ``gold`` is the held-out answer when the query comes from an
    evaluation split.
    """

    direction: str
    known_entity: int
    rel: int
    gold: Optional[int] = None

    def __post_init__(self) -> None:
        if self.direction not in (HEAD, TAIL):
            raise ValueError(f"direction must be '{HEAD}' or '{TAIL}', got {self.direction!r}")


class KnowledgeGraph:
    """Immutable, fully indexed knowledge graph with train/valid/test splits.

    Safe to share across threads after construction; nothing mutates it.
    """

    def __init__(
        self,
        entity_keys: list[str],
        relation_keys: list[str],
        train: list[Triple],
        valid: list[Triple],
        test: list[Triple],
        entity_labels: Optional[list[str]] = None,
        entity_descriptions: Optional[list[Optional[str]]] = None,
        relation_labels: Optional[list[str]] = None,
        duplicate_counts: Optional[dict[str, int]] = None,
    ) -> None:
        self.entity_keys = list(entity_keys)
        self.relation_keys = list(relation_keys)
        self.entity_labels = list(entity_labels) if entity_labels is not None else list(entity_keys)
        self.entity_descriptions = (
            list(entity_descriptions) if entity_descriptions is not None else [None] * len(entity_keys)
        )
        self.relation_labels = (
            list(relation_labels) if relation_labels is not None else list(relation_keys)
        )
        self.train = list(train)
        self.valid = list(valid)
        self.test = list(test)
        self.duplicate_counts = dict(duplicate_counts or {})

        n_ent, n_rel = len(self.entity_keys), len(self.relation_keys)
        for name, split in (("train", self.train), ("valid", self.valid), ("test", self.test)):
            for h, r, t in split:
                if not (0 <= h < n_ent and 0 <= t < n_ent and 0 <= r < n_rel):
                    raise ValueError(f"{name} triple ({h},{r},{t}) does not resolve in the tables")

        train_set = set(self.train)
        valid_set = set(self.valid)
        test_set = set(self.test)
        if train_set & valid_set or train_set & test_set or valid_set & test_set:
            raise ParseError("splits are not pairwise disjoint")
        self._train_set = frozenset(train_set)

        # Train-only indices.
        by_head_rel: dict[tuple[int, int], list[int]] = {}
        by_tail_rel: dict[tuple[int, int], list[int]] = {}
        incident: dict[int, list[Triple]] = {}
        for tr in self.train:
            h, r, t = tr
            by_head_rel.setdefault((h, r), []).append(t)
            by_tail_rel.setdefault((t, r), []).append(h)
            incident.setdefault(h, []).append(tr)
            if t != h:
                incident.setdefault(t, []).append(tr)
        self._by_head_rel = {k: tuple(sorted(v)) for k, v in by_head_rel.items()}
        self._by_tail_rel = {k: tuple(sorted(v)) for k, v in by_tail_rel.items()}
        self._incident = {k: tuple(sorted(v)) for k, v in incident.items()}

        # Undirected adjacency for path search, sorted by
        # (neighbor, relation, direction) so BFS tie-breaking is deterministic.
        adjacency: dict[int, list[tuple[int, int, int, Triple]]] = {}
        for tr in self.train:
            h, r, t = tr
            adjacency.setdefault(h, []).append((t, r, 0, tr))
            if t != h:
                adjacency.setdefault(t, []).append((h, r, 1, tr))
        self._adjacency = {k: tuple(sorted(v)) for k, v in adjacency.items()}

        # Known-true maps over all splits (filtered evaluation).
        true_tails: dict[tuple[int, int], set[int]] = {}
        true_heads: dict[tuple[int, int], set[int]] = {}
        for split in (self.train, self.valid, self.test):
            for h, r, t in split:
                true_tails.setdefault((h, r), set()).add(t)
                true_heads.setdefault((t, r), set()).add(h)
        self._true_tails = {k: frozenset(v) for k, v in true_tails.items()}
        self._true_heads = {k: frozenset(v) for k, v in true_heads.items()}

        # Entities/relations that never occur in train (kept, but flagged:
        # they only carry information in the inductive evaluation).
        seen_ent = {e for h, _, t in self.train for e in (h, t)}
        seen_rel = {r for _, r, _ in self.train}
        self.unseen_entities = frozenset(range(n_ent)) - frozenset(seen_ent)
        self.unseen_relations = frozenset(range(n_rel)) - frozenset(seen_rel)

    # -- basic accessors ---------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self.entity_keys)

    @property
    def num_relations(self) -> int:
        return len(self.relation_keys)

    def split(self, name: str) -> list[Triple]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def entity_label(self, entity: int) -> str:
        return self.entity_labels[entity]

    def relation_label(self, rel: int) -> str:
        return self.relation_labels[rel]

    def resolve_relation(self, token: str) -> int:
        """Map a relation key or display label to its id."""
        try:
            return self.relation_keys.index(token)
        except ValueError:
            pass
        try:
            return self.relation_labels.index(token)
        except ValueError:
            raise KeyError(f"unknown relation {token!r}") from None

    def resolve_entity(self, token: str) -> int:
        try:
            return self.entity_keys.index(token)
        except ValueError:
            pass
        try:
            return self.entity_labels.index(token)
        except ValueError:
            raise KeyError(f"unknown entity {token!r}") from None

    def in_train(self, h: int, r: int, t: int) -> bool:
        return (h, r, t) in self._train_set

    def tails_of(self, h: int, r: int) -> tuple[int, ...]:
        return self._by_head_rel.get((h, r), ())

    def heads_of(self, t: int, r: int) -> tuple[int, ...]:
        return self._by_tail_rel.get((t, r), ())

    def incident(self, entity: int) -> tuple[Triple, ...]:
        return self._incident.get(entity, ())

    def adjacency(self, entity: int) -> tuple[tuple[int, int, int, Triple], ...]:
        """Undirected train neighbors as (other, rel, direction, triple)."""
        return self._adjacency.get(entity, ())

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write the binary graph cache (versioned header + tables + splits)."""
        meta = {
            "entities": [
                [k, l, d]
                for k, l, d in zip(self.entity_keys, self.entity_labels, self.entity_descriptions)
            ],
            "relations": [[k, l] for k, l in zip(self.relation_keys, self.relation_labels)],
            "duplicate_counts": self.duplicate_counts,
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(struct.pack("<I", _CACHE_VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for split in (self.train, self.valid, self.test):
                arr = np.asarray(split, dtype=np.int64).reshape(len(split), 3)
                fh.write(struct.pack("<Q", len(split)))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        with open(path, "rb") as fh:
            if fh.read(4) != _CACHE_MAGIC:
                raise ParseError(f"{path}: not a graph cache")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != _CACHE_VERSION:
                raise ParseError(f"{path}: unsupported cache version {version}")
            (blob_len,) = struct.unpack("<Q", fh.read(8))
            meta = json.loads(fh.read(blob_len).decode("utf-8"))
            splits = []
            for _ in range(3):
                (n,) = struct.unpack("<Q", fh.read(8))
                arr = np.frombuffer(fh.read(n * 3 * 8), dtype=np.int64).reshape(n, 3)
                splits.append([tuple(int(x) for x in row) for row in arr])
        entities = meta["entities"]
        relations = meta["relations"]
        return cls(
            entity_keys=[e[0] for e in entities],
            relation_keys=[r[0] for r in relations],
            train=splits[0],
            valid=splits[1],
            test=splits[2],
            entity_labels=[e[1] for e in entities],
            entity_descriptions=[e[2] for e in entities],
            relation_labels=[r[1] for r in relations],
            duplicate_counts=meta.get("duplicate_counts", {}),
        )


def _read_triple_file(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected head<TAB>rel<TAB>tail, got {line!r}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def _read_label_file(path: str | Path) -> dict[str, tuple[str, Optional[str]]]:
    out: dict[str, tuple[str, Optional[str]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError(f"{path}:{lineno}: expected id<TAB>label[<TAB>description]")
            out[parts[0]] = (parts[1], parts[2] if len(parts) == 3 else None)
    return out


def build_graph(
    train: Iterable[tuple[str, str, str]],
    valid: Iterable[tuple[str, str, str]] = (),
    test: Iterable[tuple[str, str, str]] = (),
    entity_labels: Optional[dict[str, tuple[str, Optional[str]]]] = None,
    relation_labels: Optional[dict[str, tuple[str, Optional[str]]]] = None,
) -> KnowledgeGraph:
    """Build a graph from token triples, assigning dense ids in first-seen order."""
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}

    def ent(tok: str) -> int:
        if tok not in ent_ids:
            ent_ids[tok] = len(ent_ids)
        return ent_ids[tok]

    def rel(tok: str) -> int:
        if tok not in rel_ids:
            rel_ids[tok] = len(rel_ids)
        return rel_ids[tok]

    splits: dict[str, list[Triple]] = {}
    dup_counts: dict[str, int] = {}
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        seen: set[Triple] = set()
        kept: list[Triple] = []
        dups = 0
        for h_tok, r_tok, t_tok in rows:
            tr = (ent(h_tok), rel(r_tok), ent(t_tok))
            if tr in seen:
                dups += 1
                continue
            seen.add(tr)
            kept.append(tr)
        splits[name] = kept
        dup_counts[name] = dups
        if dups:
            logger.warning("%s split: dropped %d duplicate triples", name, dups)

    keys = list(ent_ids)
    rkeys = list(rel_ids)
    e_labels = e_descs = None
    if entity_labels is not None:
        e_labels = [entity_labels.get(k, (k, None))[0] for k in keys]
        e_descs = [entity_labels.get(k, (k, None))[1] for k in keys]
    r_labels = None
    if relation_labels is not None:
        r_labels = [relation_labels.get(k, (k, None))[0] for k in rkeys]
    return KnowledgeGraph(
        entity_keys=keys,
        relation_keys=rkeys,
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        entity_labels=e_labels,
        entity_descriptions=e_descs,
        relation_labels=r_labels,
        duplicate_counts=dup_counts,
    )


def load_kg(
    train_path: str | Path,
    valid_path: Optional[str | Path] = None,
    test_path: Optional[str | Path] = None,
    entity_labels_path: Optional[str | Path] = None,
    relation_labels_path: Optional[str | Path] = None,
) -> KnowledgeGraph:
    """Load TSV triple files into a fully indexed graph.

    Entities/relations appearing only in valid/test are retained and exposed
    via ``unseen_entities`` / ``unseen_relations``. Label files are optional;
    without them labels fall back to the raw identifier strings.
    """
    train = _read_triple_file(train_path)
    valid = _read_triple_file(valid_path) if valid_path else []
    test = _read_triple_file(test_path) if test_path else []
    ent_labels = _read_label_file(entity_labels_path) if entity_labels_path else None
    rel_labels = _read_label_file(relation_labels_path) if relation_labels_path else None
    return build_graph(train, valid, test, ent_labels, rel_labels)


def shortest_path(
    kg: KnowledgeGraph, src: int, dst: int, max_len: int
) -> Optional[list[Triple]]:
    """One shortest undirected path over train triples, or None.

    The search treats every train triple as traversable in both directions.
    Ties are broken per BFS depth by the smallest
    (neighbor entity, relation, direction, parent) tuple, so the result is
    deterministic. ``src == dst`` yields the empty path.
    """
    n = kg.num_entities
    if not (0 <= src < n and 0 <= dst < n):
        raise ValueError(f"entity ids out of range: {src}, {dst}")
    if src == dst:
        return []
    parents: dict[int, tuple[int, Triple]] = {src: (src, (src, -1, src))}
    frontier = [src]
    for _ in range(max_len):
        edges: list[tuple[int, int, int, int, Triple]] = []
        for u in frontier:
            for v, r, d, tr in kg.adjacency(u):
                if v not in parents:
                    edges.append((v, r, d, u, tr))
        edges.sort(key=lambda e: e[:4])
        nxt = []
        for v, _r, _d, u, tr in edges:
            if v in parents:
                continue
            parents[v] = (u, tr)
            nxt.append(v)
        if dst in parents:
            path = []
            cur = dst
            while cur != src:
                u, tr = parents[cur]
                path.append(tr)
                cur = u
            path.reverse()
            return path
        if not nxt:
            return None
        frontier = nxt
    return None


def known_true_answers(kg: KnowledgeGraph, query: CompletionQuery) -> frozenset[int]:
    """All entities completing the query to a triple found in any split."""
    if query.direction == HEAD:
        return kg._true_heads.get((query.known_entity, query.rel), frozenset())
    return kg._true_tails.get((query.known_entity, query.rel), frozenset())


def queries_for_triple(triple: Triple) -> tuple[CompletionQuery, CompletionQuery]:
    """The head and tail prediction queries for one evaluation triple."""
    h, r, t = triple
    return (
        CompletionQuery(direction=HEAD, known_entity=t, rel=r, gold=h),
        CompletionQuery(direction=TAIL, known_entity=h, rel=r, gold=t),
    )
