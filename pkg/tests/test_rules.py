import random

import pytest

from kgcomplete.errors import ConfigError, ParseError
from kgcomplete.graph import build_graph
from kgcomplete.rules import (
    Rule,
    RuleSet,
    ground_rule,
    load_rules,
    mine_rules,
    postprocess,
    save_rules,
)

from .oracles import matrix_confidence, random_kg


def t1_rule(t1):
    r1, r2, r3 = (t1.resolve_relation(x) for x in ("r1", "r2", "r3"))
    return Rule(r3, ((r1, False), (r2, False)), confidence=0.25, support=1)


def test_mine_t1_composition_rule(t1):
    rules = mine_rules(t1, max_len=3, min_support=1, samples_per_rel=100, seed=0)
    r1, r2, r3 = (t1.resolve_relation(x) for x in ("r1", "r2", "r3"))
    match = [r for r in rules.for_head(r3) if r.body == ((r1, False), (r2, False))]
    assert len(match) == 1
    assert match[0].confidence == 0.25
    assert match[0].support == 1


def test_mine_single_triple_graph_empty():
    kg = build_graph([("A", "r1", "B")])
    rules = mine_rules(kg, max_len=3, min_support=1, samples_per_rel=10, seed=0)
    assert len(rules) == 0


def test_mine_rejects_bad_config(t1):
    with pytest.raises(ConfigError):
        mine_rules(t1, max_len=0)


def test_default_max_rule_length_is_three(t1):
    rules = mine_rules(t1)
    assert rules.max_len == 3
    assert all(len(r.body) <= 3 for r in rules)


def test_mined_confidence_matches_matrix_oracle():
    rng = random.Random(21)
    for _ in range(6):
        kg = random_kg(rng, max_entities=40, max_relations=3, max_train=80)
        rules = mine_rules(kg, max_len=3, min_support=1, samples_per_rel=10**9, seed=0)
        assert len(rules) > 0
        for rule in rules:
            support, body_count = matrix_confidence(kg, rule.head_rel, rule.body)
            assert rule.support == support
            assert rule.confidence == support / body_count


def test_rule_validation():
    with pytest.raises(ValueError):
        Rule(0, (), confidence=0.5)
    with pytest.raises(ValueError):
        Rule(0, ((0, False),), confidence=1.5)


def test_ruleset_orders_by_confidence():
    rules = RuleSet(
        [
            Rule(0, ((1, False),), 0.2),
            Rule(0, ((2, False),), 0.9),
            Rule(1, ((0, False),), 0.5),
        ]
    )
    group = rules.for_head(0)
    assert [r.confidence for r in group] == [0.9, 0.2]
    assert rules.body_relations(0) == {1, 2}


def test_postprocess_conflict_resolution():
    body = ((0, False), (1, False))
    rules = RuleSet([Rule(2, body, 0.9), Rule(3, body, 0.4)])
    kept = list(postprocess(rules))
    assert len(kept) == 1
    assert kept[0].head_rel == 2


def test_postprocess_conflict_tie_keeps_lowest_head():
    body = ((0, False),)
    kept = list(postprocess(RuleSet([Rule(3, body, 0.5), Rule(1, body, 0.5)])))
    assert len(kept) == 1 and kept[0].head_rel == 1


def test_postprocess_redundancy_elimination():
    shorter = Rule(2, ((0, False),), 0.8)
    longer = Rule(2, ((0, False), (1, False)), 0.5)
    kept = list(postprocess(RuleSet([shorter, longer])))
    assert kept == [shorter]


def test_postprocess_redundancy_requires_higher_confidence():
    shorter = Rule(2, ((0, False),), 0.4)
    longer = Rule(2, ((0, False), (1, False)), 0.5)
    kept = set(postprocess(RuleSet([shorter, longer])))
    assert kept == {shorter, longer}


def test_postprocess_multiset_ignores_order():
    a = Rule(2, ((0, False), (1, False)), 0.9)
    b = Rule(2, ((1, False), (0, False), (0, False)), 0.3)  # multiset superset of a
    assert list(postprocess(RuleSet([a, b]))) == [a]
    # subsequence mode is order-sensitive: (0,f),(1,f) is not a subsequence
    # of (1,f),(0,f),(0,f)
    kept = set(postprocess(RuleSet([a, b]), subset_mode="subsequence"))
    assert kept == {a, b}


def test_postprocess_empty():
    assert len(postprocess(RuleSet([]))) == 0


def test_postprocess_idempotent_random():
    rng = random.Random(4)
    for _ in range(50):
        rules = []
        for _ in range(rng.randint(0, 12)):
            body = tuple(
                (rng.randrange(4), rng.random() < 0.5) for _ in range(rng.randint(1, 3))
            )
            rules.append(Rule(rng.randrange(3), body, round(rng.random(), 3)))
        once = postprocess(RuleSet(rules))
        twice = postprocess(once)
        assert once == twice


def test_ground_rule_t1(t1):
    rule = t1_rule(t1)
    a, b, c, d, e = range(5)
    r1, r2 = 0, 1
    assert ground_rule(t1, rule, a, c) == [[(a, r1, b), (b, r2, c)]]
    assert ground_rule(t1, rule, d, e) == [[(d, r1, b), (b, r2, e)]]
    assert ground_rule(t1, rule, a, e) == [[(a, r1, b), (b, r2, e)]]


def test_ground_rule_empty_graph():
    kg = build_graph([("A", "r1", "B")])
    rule = Rule(0, ((0, False), (0, False)), 0.5)
    assert ground_rule(kg, rule, 0, 1) == []


def test_ground_rule_respects_limit_and_validity():
    rng = random.Random(17)
    for _ in range(10):
        kg = random_kg(rng, max_entities=15, max_relations=3, max_train=45)
        rules = mine_rules(kg, max_len=2, min_support=1, samples_per_rel=10**9, seed=0)
        for rule in list(rules)[:5]:
            for h, _, t in kg.train[:5]:
                groundings = ground_rule(kg, rule, h, t, limit=4)
                assert len(groundings) <= 4
                for grounding in groundings:
                    cur = h
                    for (rel, inverted), tr in zip(rule.body, grounding):
                        assert kg.in_train(*tr)
                        assert tr[1] == rel
                        if inverted:
                            assert tr[2] == cur
                            cur = tr[0]
                        else:
                            assert tr[0] == cur
                            cur = tr[2]
                    assert cur == t


def test_rule_file_round_trip(tmp_path, t1):
    rules = RuleSet([t1_rule(t1)])
    path = tmp_path / "rules.jsonl"
    save_rules(rules, path, t1)
    loaded = load_rules(path, t1)
    assert list(loaded) == [t1_rule(t1)]


def test_load_rules_json_line(tmp_path, t1):
    path = tmp_path / "rules.jsonl"
    path.write_text(
        '{"head": "r3", "body": [{"rel": "r1", "inv": false}, {"rel": "r2", "inv": false}], "conf": 0.25}\n',
        encoding="utf-8",
    )
    loaded = list(load_rules(path, t1))
    assert loaded[0].head_rel == t1.resolve_relation("r3")
    assert loaded[0].body == ((0, False), (1, False))
    assert loaded[0].confidence == 0.25


def test_load_rules_empty_file(tmp_path, t1):
    path = tmp_path / "rules.jsonl"
    path.write_text("", encoding="utf-8")
    assert len(load_rules(path, t1)) == 0


def test_load_rules_rejects_bad_confidence(tmp_path, t1):
    path = tmp_path / "rules.jsonl"
    path.write_text('{"head": "r3", "body": [{"rel": "r1"}], "conf": 1.5}\n', encoding="utf-8")
    with pytest.raises(ParseError, match="1.5"):
        load_rules(path, t1)


def test_load_rules_rejects_unknown_relation(tmp_path, t1):
    path = tmp_path / "rules.jsonl"
    path.write_text('{"head": "r99", "body": [{"rel": "r1"}], "conf": 0.5}\n', encoding="utf-8")
    with pytest.raises(ParseError):
        load_rules(path, t1)


def test_filter_confidence():
    rules = RuleSet([Rule(0, ((1, False),), 0.9), Rule(0, ((2, False),), 0.3)])
    assert [r.confidence for r in rules.filter_confidence(0.5)] == [0.9]
