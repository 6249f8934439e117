import os
import random

import pytest

from kgcomplete.errors import ParseError
from kgcomplete.graph import (
    HEAD,
    TAIL,
    CompletionQuery,
    KnowledgeGraph,
    build_graph,
    known_true_answers,
    load_kg,
    queries_for_triple,
    shortest_path,
)

from .conftest import T1_TRAIN
from .oracles import bfs_distances, random_kg


def ids(kg, *tokens):
    return tuple(kg.resolve_entity(t) for t in tokens)


def test_t1_counts(t1):
    assert t1.num_entities == 5
    assert t1.num_relations == 3
    assert len(t1.train) == 5
    assert len(t1.test) == 1
    assert len(t1.valid) == 0


def test_first_seen_id_assignment(t1):
    assert t1.entity_keys == ["A", "B", "C", "D", "E"]
    assert t1.relation_keys == ["r1", "r2", "r3"]


def test_load_kg_from_files(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in T1_TRAIN), encoding="utf-8")
    test = tmp_path / "test.tsv"
    test.write_text("A\tr3\tC\n", encoding="utf-8")
    labels = tmp_path / "labels.tsv"
    labels.write_text("A\talpha\tfirst letter\nB\tbeta\n", encoding="utf-8")
    kg = load_kg(train, test_path=test, entity_labels_path=labels)
    assert kg.num_entities == 5 and len(kg.train) == 5 and len(kg.test) == 1
    assert kg.entity_label(0) == "alpha"
    assert kg.entity_descriptions[0] == "first letter"
    assert kg.entity_label(2) == "C"  # fallback to the raw token


def test_load_empty_train(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("", encoding="utf-8")
    kg = load_kg(train)
    assert kg.num_entities == 0 and len(kg.train) == 0


def test_malformed_line_reports_lineno(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("A\tr1\tB\nbroken line\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":2"):
        load_kg(train)


def test_duplicates_dropped_with_count():
    kg = build_graph(T1_TRAIN + [("A", "r1", "B")])
    assert len(kg.train) == 5
    assert kg.duplicate_counts["train"] == 1


def test_split_overlap_rejected():
    with pytest.raises(ParseError, match="disjoint"):
        build_graph(T1_TRAIN, test=[T1_TRAIN[0]])


def test_unseen_entities_flagged():
    kg = build_graph(T1_TRAIN, test=[("F", "r1", "B")])
    f = kg.resolve_entity("F")
    assert f in kg.unseen_entities
    assert not kg.unseen_relations


def test_shortest_path_t1(t1):
    a, b, c = ids(t1, "A", "B", "C")
    r1, r2 = t1.resolve_relation("r1"), t1.resolve_relation("r2")
    assert shortest_path(t1, a, c, 3) == [(a, r1, b), (b, r2, c)]


def test_shortest_path_same_node(t1):
    assert shortest_path(t1, 0, 0, 3) == []


def test_shortest_path_disconnected():
    kg = build_graph(T1_TRAIN, valid=[("X", "r1", "Y")])
    a, x = kg.resolve_entity("A"), kg.resolve_entity("X")
    assert shortest_path(kg, a, x, 5) is None


def test_shortest_path_respects_max_len(t1):
    a, e = ids(t1, "A", "E")
    assert shortest_path(t1, a, e, 1) is None
    assert shortest_path(t1, a, e, 2) is not None


def test_shortest_path_invalid_ids(t1):
    with pytest.raises(ValueError):
        shortest_path(t1, 0, 99, 3)


def test_shortest_path_matches_bfs_oracle():
    rng = random.Random(13)
    for _ in range(20):
        kg = random_kg(rng, max_entities=200, max_relations=5, max_train=300)
        src = rng.randrange(kg.num_entities)
        dist = bfs_distances(kg, src)
        for dst in range(kg.num_entities):
            path = shortest_path(kg, src, dst, kg.num_entities)
            if dst not in dist:
                assert path is None
            else:
                assert path is not None and len(path) == dist[dst]
                # each step must be a train triple chaining src -> dst
                cur = src
                for h, r, t in path:
                    assert kg.in_train(h, r, t)
                    assert cur in (h, t)
                    cur = t if cur == h else h
                assert cur == dst


def test_known_true_answers_t1(t1):
    b, c, e, a = ids(t1, "B", "C", "E", "A")
    r2, r3 = t1.resolve_relation("r2"), t1.resolve_relation("r3")
    assert known_true_answers(t1, CompletionQuery(TAIL, b, r2)) == {c, e}
    assert known_true_answers(t1, CompletionQuery(HEAD, c, r3)) == {a}
    assert known_true_answers(t1, CompletionQuery(TAIL, c, r3)) == frozenset()


def test_known_true_contains_gold():
    rng = random.Random(5)
    for _ in range(10):
        kg = random_kg(rng)
        for triple in kg.test:
            for query in queries_for_triple(triple):
                assert query.gold in known_true_answers(kg, query)


def test_index_consistency():
    rng = random.Random(3)
    for _ in range(10):
        kg = random_kg(rng)
        for h, r, t in kg.train:
            assert t in kg.tails_of(h, r)
            assert h in kg.heads_of(t, r)
        for e in range(kg.num_entities):
            for tr in kg.incident(e):
                assert e in (tr[0], tr[2])
                assert kg.in_train(*tr)


def test_cache_round_trip(tmp_path, t1):
    path = tmp_path / "graph.kgc"
    t1.save(path)
    loaded = KnowledgeGraph.load(path)
    assert loaded.entity_keys == t1.entity_keys
    assert loaded.relation_keys == t1.relation_keys
    assert loaded.train == t1.train
    assert loaded.valid == t1.valid
    assert loaded.test == t1.test
    assert loaded.entity_labels == t1.entity_labels


def test_cache_rejects_garbage(tmp_path):
    path = tmp_path / "bad.kgc"
    path.write_bytes(b"not a cache")
    with pytest.raises(ParseError):
        KnowledgeGraph.load(path)


@pytest.mark.skipif(
    "KGC_WN18RR_DIR" not in os.environ, reason="set KGC_WN18RR_DIR to run on the real dataset"
)
def test_wn18rr_statistics():
    base = os.environ["KGC_WN18RR_DIR"]
    kg = load_kg(f"{base}/train.txt", f"{base}/valid.txt", f"{base}/test.txt")
    assert kg.num_entities == 40943
    assert kg.num_relations == 11
    assert len(kg.train) == 86835
