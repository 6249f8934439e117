import pytest

from kgcomplete.config import (
    PipelineConfig,
    RetrievalConfig,
    RuleMiningConfig,
)
from kgcomplete.embeddings import EmbeddingConfig, train_global
from kgcomplete.evaluation import Pipeline, split_queries
from kgcomplete.gcn import AdapterConfig, train_adapter
from kgcomplete.graph import build_graph
from kgcomplete.rules import mine_rules, postprocess
from kgcomplete.synthetic import composition_graph

T1_TRAIN = [
    ("A", "r1", "B"),
    ("B", "r2", "C"),
    ("D", "r1", "B"),
    ("B", "r2", "E"),
    ("D", "r3", "E"),
]
T1_TEST = [("A", "r3", "C")]


@pytest.fixture()
def t1():
    return build_graph(T1_TRAIN, test=T1_TEST)


def fixture_config() -> PipelineConfig:
    return PipelineConfig(
        embeddings=EmbeddingConfig(
            model_kind="transe",
            dim=32,
            epochs=800,
            lr=0.2,
            negatives=8,
            margin=2.0,
            batch_size=128,
            seed=7,
        ),
        rules=RuleMiningConfig(
            max_len=3, min_support=1, min_confidence=0.85, samples_per_rel=1000, seed=7
        ),
        retrieval=RetrievalConfig(k=20, tau=100),
        adapter=AdapterConfig(d_gcn=64, d_out=32, layers=1, lr=0.01, epochs=150, seed=7),
    )


@pytest.fixture(scope="session")
def comp_kg():
    return composition_graph(seed=7)


@pytest.fixture(scope="session")
def comp_cfg():
    return fixture_config()


@pytest.fixture(scope="session")
def comp_emb(comp_kg, comp_cfg):
    return train_global(comp_kg, comp_cfg.embeddings)


@pytest.fixture(scope="session")
def comp_rules(comp_kg, comp_cfg):
    mined = mine_rules(
        comp_kg,
        max_len=comp_cfg.rules.max_len,
        min_support=comp_cfg.rules.min_support,
        samples_per_rel=comp_cfg.rules.samples_per_rel,
        seed=comp_cfg.rules.seed,
    )
    return postprocess(mined).filter_confidence(comp_cfg.rules.min_confidence)


@pytest.fixture(scope="session")
def comp_adapter(comp_kg, comp_emb, comp_rules, comp_cfg):
    queries = split_queries(comp_kg, "valid")
    return train_adapter(comp_kg, comp_emb, comp_rules, queries, comp_cfg.adapter)


@pytest.fixture(scope="session")
def comp_pipeline(comp_emb, comp_rules, comp_adapter):
    return Pipeline(
        emb=comp_emb,
        rules=comp_rules,
        adapter=comp_adapter.model,
        selector="surrogate",
        k=20,
        tau=100,
    )
