"""Synthetic composition benchmark for end-to-end checks.

A 200-entity layered graph: sources connect to hubs ("feeds"), hubs connect
to sinks ("yields"), and "produces" holds exactly for the composed
source->sink pairs, split 90/5/5 into train/valid/test. Held-out pairs also
get a "linked_to" train shortcut so that plain shortest paths differ from
rule groundings - without it every shortest path would itself realize the
composition rule and retrieval ablations would be indistinguishable.
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

from .graph import KnowledgeGraph, build_graph

REL_STEP_A = "feeds"
REL_STEP_B = "yields"
REL_COMPOSED = "produces"
REL_SHORTCUT = "linked_to"

TokenTriple = tuple[str, str, str]


def composition_tokens(
    seed: int = 7,
    n_src: int = 80,
    n_hub: int = 40,
    n_sink: int = 80,
    hub_fanout: int = 3,
) -> tuple[list[TokenTriple], list[TokenTriple], list[TokenTriple]]:
    """Token triples (train, valid, test) for the composition graph."""
    rng = random.Random(seed)
    src = [f"x{i:02d}" for i in range(n_src)]
    hub = [f"y{i:02d}" for i in range(n_hub)]
    sink = [f"z{i:02d}" for i in range(n_sink)]

    step_a = [(s, REL_STEP_A, hub[rng.randrange(n_hub)]) for s in src]
    # Deal sinks out so every sink is hit at least once (keeps the entity
    # table at exactly n_src + n_hub + n_sink).
    slots: list[str] = []
    while len(slots) < n_hub * hub_fanout:
        deck = list(sink)
        rng.shuffle(deck)
        slots.extend(deck)
    step_b: list[TokenTriple] = []
    hub_targets: dict[str, list[str]] = {}
    for i, h in enumerate(hub):
        targets = []
        for t in slots[i * hub_fanout : (i + 1) * hub_fanout]:
            if t not in targets:
                targets.append(t)
        hub_targets[h] = targets
        step_b.extend((h, REL_STEP_B, t) for t in targets)

    composed: list[TokenTriple] = []
    for s, _, h in step_a:
        composed.extend((s, REL_COMPOSED, t) for t in hub_targets[h])
    rng.shuffle(composed)
    n = len(composed)
    n_valid = n_test = max(1, n // 20)
    valid = composed[:n_valid]
    test = composed[n_valid : n_valid + n_test]
    train_composed = composed[n_valid + n_test :]

    shortcuts = [(s, REL_SHORTCUT, t) for s, _, t in valid + test]
    train = step_a + step_b + train_composed + shortcuts
    return train, valid, test


def composition_graph(seed: int = 7, **kwargs) -> KnowledgeGraph:
    train, valid, test = composition_tokens(seed=seed, **kwargs)
    return build_graph(train, valid, test)


def fixture_lexicon() -> dict[str, dict[str, str]]:
    return {
        REL_STEP_A: {"head": "What feeds {}?", "tail": "What does {} feed?"},
        REL_STEP_B: {"head": "What yields {}?", "tail": "What does {} yield?"},
        REL_COMPOSED: {"head": "What produces {}?", "tail": "What does {} produce?"},
        REL_SHORTCUT: {"head": "What is linked to {}?", "tail": "What is {} linked to?"},
    }


_CONFIG_TEMPLATE = """\
[data]
train = "{dir}/train.tsv"
valid = "{dir}/valid.tsv"
test = "{dir}/test.tsv"

[output]
dir = "{dir}/run"

[embeddings]
model_kind = "transe"
dim = 32
epochs = 800
lr = 0.2
negatives = 8
margin = 2.0
batch_size = 128
seed = 7

[rules]
max_len = 3
min_support = 1
min_confidence = 0.85
samples_per_rel = 1000
seed = 7

[retrieval]
k = 20
tau = 100

[adapter]
d_gcn = 64
d_out = 32
layers = 1
lr = 0.01
epochs = 150
seed = 7

[selector]
mode = "surrogate"

[prompts]
lexicon = "{dir}/lexicon.json"
role = "general"
"""


def write_fixture(directory: str | Path, seed: int = 7, **kwargs) -> Path:
    """Write TSV splits, a lexicon, and a ready-to-run config under `directory`."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    train, valid, test = composition_tokens(seed=seed, **kwargs)
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for h, r, t in rows:
                fh.write(f"{h}\t{r}\t{t}\n")
    (out / "lexicon.json").write_text(
        json.dumps(fixture_lexicon(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    config_path = out / "config.toml"
    config_path.write_text(_CONFIG_TEMPLATE.format(dir=str(out)), encoding="utf-8")
    return config_path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write the synthetic composition fixture.")
    parser.add_argument("directory", help="output directory for the TSVs, lexicon and config")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    config = write_fixture(args.directory, seed=args.seed)
    print(f"fixture written; config at {config}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
