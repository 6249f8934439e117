"""Bottom-up query-specific subgraph retrieval.

Three phases build the subgraph for one query over train triples:

1. connectivity: one shortest undirected path from every candidate to the
   query's known entity (the anchor). Runs to completion even past the
   triple budget tau - candidate inclusion takes priority.
2. rule groundings: rules for the query relation in confidence-descending
   order; groundings are added atomically, a grounding that would push the
   count past tau is skipped and enumeration continues. The phase stops the
   moment the count reaches tau. Skipped entirely in the no-rules ablation.
3. augmentation: breadth-first admission of train triples reachable from the
   anchor and candidates whose relation is the query relation or occurs in a
   rule body, one at a time in (entity, relation) order, stopping exactly at
   tau or exhaustion.

The final subgraph never exceeds max(tau, phase-1 size).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .embeddings import CandidateSet
from .errors import ConfigError
from .graph import HEAD, CompletionQuery, KnowledgeGraph, Triple, shortest_path
from .rules import Rule, RuleSet, ground_body, ground_rule, triples_step_lookup

PHASE_PATH = "shortest-path"
PHASE_RULE = "rule-grounding"
PHASE_AUG = "augmentation"


@dataclass
class GroundingEvent:
    """One phase-2 decision, kept for invariant replay and debugging."""

    rule_pos: int
    rule: Rule
    candidate: int
    grounding: tuple[Triple, ...]
    outcome: str  # "added" | "overflow"


@dataclass
class Subgraph:
    anchor: int
    candidates: CandidateSet
    triples: list[Triple]
    provenance: list[tuple[str, Optional[int]]]  # (phase, rule position or None)
    tau: int
    trace: list[GroundingEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triples)

    def phase_counts(self) -> dict[str, int]:
        counts = {PHASE_PATH: 0, PHASE_RULE: 0, PHASE_AUG: 0}
        for phase, _ in self.provenance:
            counts[phase] += 1
        return counts

    def entities(self) -> set[int]:
        ents = {self.anchor}
        for h, _, t in self.triples:
            ents.add(h)
            ents.add(t)
        return ents

    def to_json(self, kg: Optional[KnowledgeGraph] = None) -> str:
        def name(e: int) -> object:
            return kg.entity_label(e) if kg else e

        payload = {
            "anchor": name(self.anchor),
            "candidates": [name(e) for e in self.candidates.entities],
            "triples": [
                {
                    "h": name(h),
                    "r": kg.relation_label(r) if kg else r,
                    "t": name(t),
                    "phase": phase if rule_pos is None else f"{phase}:{rule_pos}",
                }
                for (h, r, t), (phase, rule_pos) in zip(self.triples, self.provenance)
            ],
        }
        return json.dumps(payload, sort_keys=True)

    def dump(self, path: str | Path, kg: Optional[KnowledgeGraph] = None) -> None:
        Path(path).write_text(self.to_json(kg) + "\n", encoding="utf-8")


def _grounding_endpoints(query_direction: str, anchor: int, candidate: int) -> tuple[int, int]:
    # Rule bodies run head-side to tail-side. For a head query the candidate
    # plays the head, for a tail query the anchor does.
    if query_direction == HEAD:
        return candidate, anchor
    return anchor, candidate


def retrieve_subgraph(
    kg: KnowledgeGraph,
    query: CompletionQuery,
    cands: CandidateSet,
    rules: Optional[RuleSet],
    tau: int,
    use_rules: bool = True,
    path_cap: Optional[int] = None,
) -> Subgraph:
    """Build the subgraph for one query; deterministic in all inputs."""
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    anchor = query.known_entity
    cap = path_cap if path_cap is not None else (rules.max_len if rules is not None else 3)

    triples: list[Triple] = []
    provenance: list[tuple[str, Optional[int]]] = []
    present: set[Triple] = set()

    def add(triple: Triple, phase: str, rule_pos: Optional[int] = None) -> None:
        present.add(triple)
        triples.append(triple)
        provenance.append((phase, rule_pos))

    # Phase 1: connectivity, may overshoot tau.
    for cand in cands.entities:
        path = shortest_path(kg, cand, anchor, cap)
        if not path:
            continue
        for tr in path:
            if tr not in present:
                add(tr, PHASE_PATH)

    trace: list[GroundingEvent] = []
    head_rules: tuple[Rule, ...] = ()
    if use_rules and rules is not None:
        head_rules = rules.for_head(query.rel)

    # Phase 2: confidence-ordered groundings, atomic per grounding.
    done = len(present) >= tau
    for pos, rule in enumerate(head_rules):
        if done:
            break
        for cand in cands.entities:
            if done:
                break
            start, end = _grounding_endpoints(query.direction, anchor, cand)
            for grounding in ground_rule(kg, rule, start, end):
                # a grounding may traverse one triple twice (self-loops, back
                # and forth steps): dedupe before budgeting
                new = list(dict.fromkeys(tr for tr in grounding if tr not in present))
                if len(present) + len(new) > tau:
                    trace.append(GroundingEvent(pos, rule, cand, tuple(grounding), "overflow"))
                    continue
                for tr in new:
                    add(tr, PHASE_RULE, pos)
                trace.append(GroundingEvent(pos, rule, cand, tuple(grounding), "added"))
                if len(present) >= tau:
                    done = True
                    break

    # Phase 3: relation-guided augmentation up to exactly tau.
    if len(present) < tau:
        allowed = {query.rel}
        if use_rules and rules is not None:
            allowed.update(rules.body_relations(query.rel))
        queue: list[int] = []
        queued = set()
        for e in [anchor] + list(cands.entities):
            if e not in queued:
                queued.add(e)
                queue.append(e)
        qi = 0
        while qi < len(queue) and len(present) < tau:
            node = queue[qi]
            qi += 1
            neighbors = sorted(
                (other, rel, direction, tr)
                for other, rel, direction, tr in kg.adjacency(node)
                if rel in allowed
            )
            for other, rel, _direction, tr in neighbors:
                if tr not in present:
                    add(tr, PHASE_AUG)
                    if len(present) >= tau:
                        break
                if other not in queued:
                    queued.add(other)
                    queue.append(other)

    return Subgraph(
        anchor=anchor,
        candidates=cands,
        triples=triples,
        provenance=provenance,
        tau=tau,
        trace=trace,
    )


@dataclass
class SubgraphReport:
    size: int
    phase_counts: dict[str, int]
    connected_fraction: float
    gold_grounding_present: bool


def _connected_to_anchor(g: Subgraph) -> set[int]:
    adj: dict[int, set[int]] = {}
    for h, _, t in g.triples:
        adj.setdefault(h, set()).add(t)
        adj.setdefault(t, set()).add(h)
    seen = {g.anchor}
    stack = [g.anchor]
    while stack:
        node = stack.pop()
        for other in adj.get(node, ()):
            if other not in seen:
                seen.add(other)
                stack.append(other)
    return seen


def gold_grounding_present(g: Subgraph, rules: Optional[RuleSet]) -> bool:
    """True iff a rule grounding connects the gold entity to the anchor using
    only triples inside the subgraph. Vacuously false without rules or gold."""
    gold = g.candidates.query.gold
    if rules is None or gold is None:
        return False
    lookup = triples_step_lookup(g.triples)
    start, end = _grounding_endpoints(g.candidates.query.direction, g.anchor, gold)
    for rule in rules.for_head(g.candidates.query.rel):
        if ground_body(lookup, rule.body, start, end, limit=1):
            return True
    return False


def subgraph_report(g: Subgraph, rules: Optional[RuleSet] = None) -> SubgraphReport:
    reachable = _connected_to_anchor(g)
    cands = g.candidates.entities
    connected = sum(1 for e in cands if e in reachable)
    return SubgraphReport(
        size=len(g.triples),
        phase_counts=g.phase_counts(),
        connected_fraction=connected / len(cands) if cands else 0.0,
        gold_grounding_present=gold_grounding_present(g, rules),
    )
