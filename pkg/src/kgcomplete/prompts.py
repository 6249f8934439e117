"""Question generation from per-relation templates and prompt assembly.

The lexicon file is a JSON object mapping relation labels to a pair of
templates, each with exactly one "{}" placeholder:

    {"produces": {"head": "What produces {}?", "tail": "What does {} produce?"}}

The head template asks for the missing head given the tail, and vice versa.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .embeddings import CandidateSet
from .errors import ParseError
from .graph import HEAD, CompletionQuery, KnowledgeGraph

PLACEHOLDER = "[Placeholder]"

ROLE_NAMES = {"general": "linguist", "biomedical": "biomedical scientist"}

_STRIP_CHARS = string.whitespace + string.punctuation + "\"'`“”‘’"


@dataclass
class Lexicon:
    head_templates: dict[int, str]
    tail_templates: dict[int, str]

    def template(self, rel: int, direction: str) -> str:
        table = self.head_templates if direction == HEAD else self.tail_templates
        if rel not in table:
            raise KeyError(f"no {direction} template for relation {rel}")
        return table[rel]


def load_lexicon(path: str | Path, kg: KnowledgeGraph) -> Lexicon:
    """Load and validate a template lexicon against the graph's relations.

    Every relation must have both templates; unknown relation labels and
    templates without exactly one "{}" are errors.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: lexicon must be a JSON object")
    head: dict[int, str] = {}
    tail: dict[int, str] = {}
    for label, pair in raw.items():
        try:
            rel = kg.resolve_relation(label)
        except KeyError:
            raise ParseError(f"{path}: unknown relation label {label!r}") from None
        if not isinstance(pair, dict) or set(pair) != {"head", "tail"}:
            raise ParseError(f"{path}: relation {label!r} needs 'head' and 'tail' templates")
        for direction, template in pair.items():
            if template.count("{}") != 1:
                raise ParseError(
                    f"{path}: template for {label!r}/{direction} must contain exactly one '{{}}'"
                )
        head[rel] = pair["head"]
        tail[rel] = pair["tail"]
    missing = [kg.relation_label(r) for r in range(kg.num_relations) if r not in head]
    if missing:
        raise ParseError(f"{path}: relations missing templates: {missing}")
    return Lexicon(head_templates=head, tail_templates=tail)


def generate_question(lex: Lexicon, query: CompletionQuery, kg: KnowledgeGraph) -> str:
    """Substitute the known entity's label into the query relation's template."""
    template = lex.template(query.rel, query.direction)
    return template.replace("{}", kg.entity_label(query.known_entity), 1)


@dataclass
class Prompt:
    role_line: str
    instruction: str
    candidate_labels: list[str]
    slots: list[tuple[str, int]]  # (slot name, entity id); query entity first
    question: str

    def render(self) -> str:
        embeddings = ", ".join(f"'{name}': {PLACEHOLDER}" for name, _ in self.slots)
        return (
            f"{self.role_line} {self.instruction}\n"
            f"You can refer to the entity embeddings: {embeddings}.\n"
            f"Question: {self.question}\n"
            f"Answer:"
        )

    def slots_json(self) -> str:
        return json.dumps(
            [{"slot": name, "entity": entity} for name, entity in self.slots], sort_keys=True
        )

    def dump(self, path: str | Path) -> None:
        """Plain-text prompt plus a JSON sidecar recording the slot entities."""
        base = Path(path)
        base.write_text(self.render() + "\n", encoding="utf-8")
        base.with_suffix(base.suffix + ".slots.json").write_text(
            self.slots_json() + "\n", encoding="utf-8"
        )


def build_prompt(
    question: str,
    cands: CandidateSet,
    query: CompletionQuery,
    role: str,
    kg: KnowledgeGraph,
) -> Prompt:
    """Assemble the full prompt: role line, instruction with the quoted
    candidate labels in rank order, one embedding slot per entity (query
    entity first), the question, and a trailing answer cue."""
    if not cands.entities:
        raise ValueError("cannot build a prompt without candidates")
    if role not in ROLE_NAMES:
        raise ValueError(f"role must be one of {sorted(ROLE_NAMES)}, got {role!r}")
    labels = [kg.entity_label(e) for e in cands.entities]
    quoted = ", ".join(f"'{label}'" for label in labels)
    instruction = (
        "The task is to predict the answer based on the given question, and you "
        f"only need to answer one entity. The answer must be in ({quoted})."
    )
    slots = [("query entity", query.known_entity)] + list(zip(labels, cands.entities))
    return Prompt(
        role_line=f"You are an excellent {ROLE_NAMES[role]}.",
        instruction=instruction,
        candidate_labels=labels,
        slots=slots,
        question=question,
    )


def _normalize(text: str) -> str:
    return text.strip(_STRIP_CHARS).casefold()


def parse_answer(
    text: str, cands: CandidateSet, kg: KnowledgeGraph
) -> Optional[int]:
    """Map model output text back to a candidate entity.

    Exact match on the normalized label wins (first in rank order); otherwise
    a unique-substring match. Ambiguity or no match returns None.
    """
    norm = _normalize(text)
    if not norm:
        return None
    labels = [(e, _normalize(kg.entity_label(e))) for e in cands.entities]
    for entity, label in labels:
        if label and label == norm:
            return entity
    substring = [entity for entity, label in labels if label and label in norm]
    if len(substring) == 1:
        return substring[0]
    return None
