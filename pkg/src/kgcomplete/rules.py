"""Relation-path rules: mining, post-processing, grounding, file ingestion.

A rule ``head_rel(x, z) <- b1 ^ ... ^ bm`` has a body of (relation, inverted)
steps; an inverted step traverses a train triple tail-to-head. Confidence is
the standard support ratio: of all entity pairs the body connects in the
train graph, the fraction whose completed head triple is also a train fact.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

from .errors import ConfigError, ParseError
from .graph import KnowledgeGraph, Triple

BodyStep = tuple[int, bool]  # (relation, inverted)


@dataclass(frozen=True)
class Rule:
    head_rel: int
    body: tuple[BodyStep, ...]
    confidence: float
    support: int = 0

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError("rule body must have at least one step")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")


class RuleSet:
    """Rules grouped by head relation, each group sorted by confidence desc.

    Within a group ties break on the body tuple so iteration order is
    deterministic. Immutable after construction.
    """

    def __init__(self, rules: list[Rule], max_len: Optional[int] = None) -> None:
        groups: dict[int, list[Rule]] = {}
        for rule in rules:
            groups.setdefault(rule.head_rel, []).append(rule)
        self._groups = {
            head: tuple(sorted(g, key=lambda r: (-r.confidence, r.body)))
            for head, g in sorted(groups.items())
        }
        observed = max((len(r.body) for r in rules), default=3)
        self.max_len = max_len if max_len is not None else max(observed, 1)

    def for_head(self, rel: int) -> tuple[Rule, ...]:
        return self._groups.get(rel, ())

    def filter_confidence(self, min_confidence: float) -> "RuleSet":
        """Drop rules below the confidence floor (retrieval-quality knob)."""
        return RuleSet(
            [r for r in self if r.confidence >= min_confidence], max_len=self.max_len
        )

    def body_relations(self, rel: int) -> set[int]:
        return {step[0] for rule in self.for_head(rel) for step in rule.body}

    def __iter__(self) -> Iterator[Rule]:
        for group in self._groups.values():
            yield from group

    def __len__(self) -> int:
        return sum(len(g) for g in self._groups.values())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RuleSet) and self._groups == other._groups


# -- grounding -----------------------------------------------------------------

StepLookup = Callable[[int, int, bool], tuple[tuple[int, Triple], ...]]


def kg_step_lookup(kg: KnowledgeGraph) -> StepLookup:
    def lookup(entity: int, rel: int, inverted: bool) -> tuple[tuple[int, Triple], ...]:
        if inverted:
            return tuple((h, (h, rel, entity)) for h in kg.heads_of(entity, rel))
        return tuple((t, (entity, rel, t)) for t in kg.tails_of(entity, rel))

    return lookup


def triples_step_lookup(triples: list[Triple]) -> StepLookup:
    """Step lookup over an explicit triple list (e.g. a retrieved subgraph)."""
    out: dict[tuple[int, int], list[int]] = {}
    inv: dict[tuple[int, int], list[int]] = {}
    for h, r, t in triples:
        out.setdefault((h, r), []).append(t)
        inv.setdefault((t, r), []).append(h)
    out_s = {k: tuple(sorted(v)) for k, v in out.items()}
    inv_s = {k: tuple(sorted(v)) for k, v in inv.items()}

    def lookup(entity: int, rel: int, inverted: bool) -> tuple[tuple[int, Triple], ...]:
        if inverted:
            return tuple((h, (h, rel, entity)) for h in inv_s.get((entity, rel), ()))
        return tuple((t, (entity, rel, t)) for t in out_s.get((entity, rel), ()))

    return lookup


def ground_body(
    lookup: StepLookup,
    body: tuple[BodyStep, ...],
    start: int,
    end: int,
    limit: Optional[int] = None,
) -> list[list[Triple]]:
    """Enumerate realizations of the body from start to end.

    Depth-first with ascending intermediate entity ids, so enumeration order
    is deterministic. ``limit`` of None enumerates everything.
    """
    results: list[list[Triple]] = []
    path: list[Triple] = []

    def walk(node: int, step_idx: int) -> bool:
        if limit is not None and len(results) >= limit:
            return True
        if step_idx == len(body):
            if node == end:
                results.append(list(path))
                return limit is not None and len(results) >= limit
            return False
        rel, inverted = body[step_idx]
        for nxt, triple in lookup(node, rel, inverted):
            path.append(triple)
            stop = walk(nxt, step_idx + 1)
            path.pop()
            if stop:
                return True
        return False

    walk(start, 0)
    return results


def ground_rule(
    kg: KnowledgeGraph, rule: Rule, start: int, end: int, limit: Optional[int] = None
) -> list[list[Triple]]:
    """Groundings of the rule body between two entities over train triples."""
    return ground_body(kg_step_lookup(kg), rule.body, start, end, limit=limit)


# -- mining ---------------------------------------------------------------------


def _body_pairs(kg: KnowledgeGraph, body: tuple[BodyStep, ...]) -> set[tuple[int, int]]:
    """All (start, end) pairs the body connects in the train graph."""
    reach: dict[int, set[int]] = {e: {e} for e in range(kg.num_entities)}
    for rel, inverted in body:
        nxt: dict[int, set[int]] = {}
        for start, frontier in reach.items():
            acc: set[int] = set()
            for v in frontier:
                acc.update(kg.heads_of(v, rel) if inverted else kg.tails_of(v, rel))
            if acc:
                nxt[start] = acc
        reach = nxt
        if not reach:
            break
    return {(s, e) for s, ends in reach.items() for e in ends}


def _simple_path_bodies(
    kg: KnowledgeGraph, src: int, dst: int, max_len: int
) -> set[tuple[BodyStep, ...]]:
    """Body patterns of all simple paths src -> dst with length <= max_len."""
    bodies: set[tuple[BodyStep, ...]] = set()
    steps: list[BodyStep] = []
    visited = {src}

    def walk(node: int) -> None:
        if len(steps) == max_len:
            return
        for other, rel, direction, _tr in kg.adjacency(node):
            if other == dst:
                bodies.add(tuple(steps) + ((rel, direction == 1),))
                continue
            if other in visited:
                continue
            steps.append((rel, direction == 1))
            visited.add(other)
            walk(other)
            visited.discard(other)
            steps.pop()

    if src != dst:
        walk(src)
    return bodies


def mine_rules(
    kg: KnowledgeGraph,
    max_len: int = 3,
    min_support: int = 1,
    samples_per_rel: int = 1000,
    seed: int = 0,
) -> RuleSet:
    """Mine path rules by sampling train triples per relation.

    Sampling only limits which triples seed body discovery; confidence and
    support are always computed exhaustively over the train graph, so full
    sampling gives exact support ratios. The trivial length-1 body equal to
    the head relation is skipped. Rules below ``min_support`` are dropped.
    """
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    if min_support < 0 or samples_per_rel < 1:
        raise ConfigError("min_support must be >= 0 and samples_per_rel >= 1")
    rng = random.Random(seed)
    by_rel: dict[int, list[Triple]] = {}
    for tr in kg.train:
        by_rel.setdefault(tr[1], []).append(tr)

    rules: list[Rule] = []
    for rel in sorted(by_rel):
        triples = by_rel[rel]
        if len(triples) > samples_per_rel:
            sampled = rng.sample(triples, samples_per_rel)
        else:
            sampled = triples
        bodies: set[tuple[BodyStep, ...]] = set()
        for h, _, t in sampled:
            bodies.update(_simple_path_bodies(kg, h, t, max_len))
        bodies.discard(((rel, False),))
        for body in sorted(bodies):
            pairs = _body_pairs(kg, body)
            if not pairs:
                continue
            support = sum(1 for x, z in pairs if kg.in_train(x, rel, z))
            if support < min_support:
                continue
            rules.append(Rule(rel, body, confidence=support / len(pairs), support=support))
    return RuleSet(rules, max_len=max_len)


# -- post-processing --------------------------------------------------------------


def _multiset_strict_subset(a: tuple[BodyStep, ...], b: tuple[BodyStep, ...]) -> bool:
    if len(a) >= len(b):
        return False
    remaining = list(b)
    for step in a:
        if step in remaining:
            remaining.remove(step)
        else:
            return False
    return True


def _subsequence_strict_subset(a: tuple[BodyStep, ...], b: tuple[BodyStep, ...]) -> bool:
    if len(a) >= len(b):
        return False
    it = iter(b)
    return all(step in it for step in a)


def postprocess(rules: RuleSet, subset_mode: str = "multiset") -> RuleSet:
    """Conflict resolution then redundancy elimination.

    1. Rules sharing an identical body: keep only the highest-confidence one
       (ties keep the lowest head relation id).
    2. Among rules sharing a head, drop any rule whose body is a strict
       superset of a strictly-more-confident rule's body. ``subset_mode``
       picks the subset semantics: "multiset" (order-insensitive, default)
       or "subsequence" (order-sensitive).
    """
    if subset_mode == "multiset":
        subset = _multiset_strict_subset
    elif subset_mode == "subsequence":
        subset = _subsequence_strict_subset
    else:
        raise ConfigError(f"unknown subset_mode {subset_mode!r}")

    by_body: dict[tuple[BodyStep, ...], Rule] = {}
    for rule in rules:
        best = by_body.get(rule.body)
        if best is None or (rule.confidence, -rule.head_rel) > (best.confidence, -best.head_rel):
            by_body[rule.body] = rule
    resolved = list(by_body.values())

    by_head: dict[int, list[Rule]] = {}
    for rule in resolved:
        by_head.setdefault(rule.head_rel, []).append(rule)
    kept: list[Rule] = []
    for group in by_head.values():
        for rule in group:
            dominated = any(
                other.confidence > rule.confidence and subset(other.body, rule.body)
                for other in group
            )
            if not dominated:
                kept.append(rule)
    return RuleSet(kept, max_len=rules.max_len)


# -- file interface ----------------------------------------------------------------


def load_rules(path: str | Path, kg: KnowledgeGraph) -> RuleSet:
    """Read rules from JSONL; validation only, no post-processing."""
    rules: list[Rule] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                head = kg.resolve_relation(rec["head"])
                body = tuple(
                    (kg.resolve_relation(step["rel"]), bool(step.get("inv", False)))
                    for step in rec["body"]
                )
                conf = float(rec["conf"])
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if not (0.0 <= conf <= 1.0):
                raise ParseError(f"{path}:{lineno}: confidence {conf} outside [0,1]")
            if not body:
                raise ParseError(f"{path}:{lineno}: empty rule body")
            rules.append(Rule(head, body, conf, support=int(rec.get("support", 0))))
    return RuleSet(rules)


def save_rules(rules: RuleSet, path: str | Path, kg: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rule in rules:
            rec = {
                "head": kg.relation_label(rule.head_rel),
                "body": [
                    {"rel": kg.relation_label(rel), "inv": inv} for rel, inv in rule.body
                ],
                "conf": rule.confidence,
                "support": rule.support,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
