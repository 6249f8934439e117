import json

import pytest
from hypothesis import given, strategies as st

from kgcomplete.embeddings import CandidateSet
from kgcomplete.errors import ParseError
from kgcomplete.graph import HEAD, TAIL, CompletionQuery, build_graph
from kgcomplete.prompts import (
    PLACEHOLDER,
    Lexicon,
    build_prompt,
    generate_question,
    load_lexicon,
    parse_answer,
)


def lexicon_file(tmp_path, payload):
    path = tmp_path / "lexicon.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def t1_lexicon(tmp_path, t1):
    payload = {
        "r1": {"head": "What connects via r1 to {}?", "tail": "What does {} connect to via r1?"},
        "r2": {"head": "What connects via r2 to {}?", "tail": "What does {} connect to via r2?"},
        "r3": {"head": "Who relates via r3 to {}?", "tail": "Whom does {} relate to via r3?"},
    }
    return load_lexicon(lexicon_file(tmp_path, payload), t1)


def test_load_lexicon_valid(tmp_path, t1):
    lex = t1_lexicon(tmp_path, t1)
    assert set(lex.head_templates) == {0, 1, 2}


def test_load_lexicon_missing_relation(tmp_path, t1):
    payload = {"r1": {"head": "a {}?", "tail": "b {}?"}}
    with pytest.raises(ParseError, match="r2"):
        load_lexicon(lexicon_file(tmp_path, payload), t1)


def test_load_lexicon_unknown_relation(tmp_path, t1):
    payload = {
        "r1": {"head": "a {}?", "tail": "b {}?"},
        "r2": {"head": "a {}?", "tail": "b {}?"},
        "r3": {"head": "a {}?", "tail": "b {}?"},
        "r9": {"head": "a {}?", "tail": "b {}?"},
    }
    with pytest.raises(ParseError, match="r9"):
        load_lexicon(lexicon_file(tmp_path, payload), t1)


def test_load_lexicon_placeholder_count(tmp_path, t1):
    payload = {
        "r1": {"head": "no placeholder?", "tail": "b {}?"},
        "r2": {"head": "a {}?", "tail": "b {}?"},
        "r3": {"head": "a {}?", "tail": "b {}?"},
    }
    with pytest.raises(ParseError, match="exactly one"):
        load_lexicon(lexicon_file(tmp_path, payload), t1)
    payload["r1"] = {"head": "{} and {}?", "tail": "b {}?"}
    with pytest.raises(ParseError, match="exactly one"):
        load_lexicon(lexicon_file(tmp_path, payload), t1)


def test_empty_lexicon_over_empty_relations(tmp_path):
    kg = build_graph([])
    lex = load_lexicon(lexicon_file(tmp_path, {}), kg)
    assert lex.head_templates == {} and lex.tail_templates == {}


def test_generate_question_substitution(tmp_path, t1):
    lex = t1_lexicon(tmp_path, t1)
    q = CompletionQuery(HEAD, known_entity=t1.resolve_entity("C"), rel=t1.resolve_relation("r3"))
    assert generate_question(lex, q, t1) == "Who relates via r3 to C?"
    qt = CompletionQuery(TAIL, known_entity=t1.resolve_entity("B"), rel=t1.resolve_relation("r2"))
    assert generate_question(lex, qt, t1) == "What does B connect to via r2?"


def test_generate_question_bare_placeholder(t1):
    lex = Lexicon(head_templates={0: "{}"}, tail_templates={0: "{}"})
    q = CompletionQuery(HEAD, known_entity=t1.resolve_entity("A"), rel=0)
    assert generate_question(lex, q, t1) == "A"


def test_generate_question_no_residual_braces(tmp_path, t1):
    lex = t1_lexicon(tmp_path, t1)
    q = CompletionQuery(HEAD, known_entity=0, rel=2)
    rendered = generate_question(lex, q, t1)
    assert "{}" not in rendered
    assert rendered.count(t1.entity_label(0)) == 1


def make_candidates(t1, names):
    q = CompletionQuery(HEAD, known_entity=t1.resolve_entity("C"), rel=2, gold=None)
    ents = [t1.resolve_entity(n) for n in names]
    return q, CandidateSet(query=q, entities=ents, scores=list(range(len(ents), 0, -1)))


def test_build_prompt_layout(t1):
    q, cands = make_candidates(t1, ["A", "D"])
    prompt = build_prompt("Who relates via r3 to C?", cands, q, "general", t1)
    text = prompt.render()
    assert text.startswith("You are an excellent linguist.")
    assert "('A', 'D')" in text
    assert "Who relates via r3 to C?" in text
    assert text.rstrip().endswith("Answer:")
    assert text.count(PLACEHOLDER) == 3  # query entity + 2 candidates
    assert prompt.slots[0] == ("query entity", t1.resolve_entity("C"))
    assert [e for _, e in prompt.slots[1:]] == cands.entities


def test_build_prompt_biomedical_role(t1):
    q, cands = make_candidates(t1, ["A"])
    prompt = build_prompt("q?", cands, q, "biomedical", t1)
    assert prompt.role_line == "You are an excellent biomedical scientist."
    assert len(prompt.slots) == 2  # minimal prompt: query entity + 1 candidate


def test_build_prompt_twenty_candidates():
    rows = [(f"e{i}", "r", f"e{i+1}") for i in range(25)]
    kg = build_graph(rows)
    q = CompletionQuery(HEAD, known_entity=0, rel=0)
    ents = list(range(1, 21))
    cands = CandidateSet(query=q, entities=ents, scores=[float(-i) for i in range(20)])
    prompt = build_prompt("q?", cands, q, "general", kg)
    assert prompt.render().count(PLACEHOLDER) == 21


def test_build_prompt_candidate_labels_once(t1):
    q, cands = make_candidates(t1, ["A", "D", "E"])
    prompt = build_prompt("q?", cands, q, "general", t1)
    answer_clause = prompt.instruction
    for label in prompt.candidate_labels:
        assert answer_clause.count(f"'{label}'") == 1


def test_build_prompt_rejects_empty(t1):
    q = CompletionQuery(HEAD, known_entity=0, rel=0)
    with pytest.raises(ValueError):
        build_prompt("q?", CandidateSet(query=q, entities=[], scores=[]), q, "general", t1)
    _, cands = make_candidates(t1, ["A"])
    with pytest.raises(ValueError):
        build_prompt("q?", cands, q, "botanist", t1)


def test_prompt_dump_with_sidecar(tmp_path, t1):
    q, cands = make_candidates(t1, ["A"])
    prompt = build_prompt("q?", cands, q, "general", t1)
    out = tmp_path / "prompt.txt"
    prompt.dump(out)
    assert out.read_text(encoding="utf-8").count(PLACEHOLDER) == 2
    sidecar = json.loads((tmp_path / "prompt.txt.slots.json").read_text(encoding="utf-8"))
    assert sidecar[0] == {"slot": "query entity", "entity": t1.resolve_entity("C")}


def test_parse_answer_exact_with_quotes_and_spacing():
    kg = build_graph([("Enzalutamide", "treats", "cancer"), ("Vitamin A", "treats", "cancer")])
    q = CompletionQuery(HEAD, known_entity=kg.resolve_entity("cancer"), rel=0)
    cands = CandidateSet(
        query=q,
        entities=[kg.resolve_entity("Enzalutamide"), kg.resolve_entity("Vitamin A")],
        scores=[2.0, 1.0],
    )
    assert parse_answer("  'Enzalutamide' ", cands, kg) == kg.resolve_entity("Enzalutamide")
    assert parse_answer("vitamin a.", cands, kg) == kg.resolve_entity("Vitamin A")


def test_parse_answer_empty_none(t1):
    _, cands = make_candidates(t1, ["A"])
    assert parse_answer("", cands, t1) is None
    assert parse_answer("   ", cands, t1) is None


def test_parse_answer_exact_beats_substring():
    kg = build_graph([("car", "r", "x"), ("carbon", "r", "x")])
    q = CompletionQuery(HEAD, known_entity=kg.resolve_entity("x"), rel=0)
    cands = CandidateSet(
        query=q, entities=[kg.resolve_entity("car"), kg.resolve_entity("carbon")], scores=[2.0, 1.0]
    )
    assert parse_answer("car", cands, kg) == kg.resolve_entity("car")
    assert parse_answer("carbon", cands, kg) == kg.resolve_entity("carbon")


def test_parse_answer_unique_substring():
    kg = build_graph([("Enzalutamide", "r", "x"), ("Gefitinib", "r", "x")])
    q = CompletionQuery(HEAD, known_entity=kg.resolve_entity("x"), rel=0)
    cands = CandidateSet(
        query=q,
        entities=[kg.resolve_entity("Enzalutamide"), kg.resolve_entity("Gefitinib")],
        scores=[2.0, 1.0],
    )
    assert parse_answer("The answer is Enzalutamide.", cands, kg) == kg.resolve_entity("Enzalutamide")
    assert parse_answer("either Enzalutamide or Gefitinib", cands, kg) is None  # ambiguous
    assert parse_answer("Aspirin", cands, kg) is None


@given(st.lists(st.text(alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd")), min_size=1, max_size=12), min_size=1, max_size=6, unique=True))
def test_parse_answer_round_trip(labels):
    rows = [(label, "r", "sink") for label in labels]
    kg = build_graph(rows)
    q = CompletionQuery(HEAD, known_entity=kg.resolve_entity("sink"), rel=0)
    ents = [kg.resolve_entity(label) for label in labels]
    cands = CandidateSet(query=q, entities=ents, scores=[float(-i) for i in range(len(ents))])
    for label, entity in zip(labels, ents):
        parsed = parse_answer(label, cands, kg)
        # a label may normalize identically to an earlier candidate's label;
        # exact matching then returns the first one in rank order
        first = next(e for e, l in zip(ents, labels) if l.casefold() == label.casefold())
        assert parsed == first
