"""Knowledge-graph completion toolkit.

Pipeline: train lightweight structural embeddings, mine relation-path rules,
retrieve a rule-guided subgraph per query, enhance entity embeddings with a
relational GCN adapter, and re-rank the top-k candidates.
"""

from .config import PipelineConfig, load_config
from .embeddings import (
    CandidateSet,
    EmbeddingConfig,
    GlobalEmbeddings,
    collect_candidates,
    load_external_rankings,
    rank_entities,
    score_triple,
    train_global,
)
from .errors import ConfigError, ParseError
from .evaluation import (
    ExperimentReport,
    Metrics,
    Pipeline,
    build_pipeline,
    evaluate,
    inductive_subset,
    inject_noise,
    run_grid,
)
from .gcn import AdapterConfig, AdapterModel, EnhancedEmbedding, gcn_forward, score_candidates, train_adapter
from .graph import (
    HEAD,
    TAIL,
    CompletionQuery,
    KnowledgeGraph,
    Triple,
    known_true_answers,
    load_kg,
    shortest_path,
)
from .prompts import Lexicon, Prompt, build_prompt, generate_question, load_lexicon, parse_answer
from .retrieval import Subgraph, retrieve_subgraph, subgraph_report
from .rules import Rule, RuleSet, ground_rule, load_rules, mine_rules, postprocess, save_rules
from .selector import Endpoint, Selection, rerank, select_external, select_surrogate

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterModel",
    "CandidateSet",
    "CompletionQuery",
    "ConfigError",
    "EmbeddingConfig",
    "Endpoint",
    "EnhancedEmbedding",
    "ExperimentReport",
    "GlobalEmbeddings",
    "HEAD",
    "KnowledgeGraph",
    "Lexicon",
    "Metrics",
    "ParseError",
    "Pipeline",
    "PipelineConfig",
    "Prompt",
    "Rule",
    "RuleSet",
    "Selection",
    "Subgraph",
    "TAIL",
    "Triple",
    "build_pipeline",
    "build_prompt",
    "collect_candidates",
    "evaluate",
    "gcn_forward",
    "generate_question",
    "ground_rule",
    "inductive_subset",
    "inject_noise",
    "known_true_answers",
    "load_config",
    "load_external_rankings",
    "load_kg",
    "load_lexicon",
    "load_rules",
    "mine_rules",
    "parse_answer",
    "postprocess",
    "rank_entities",
    "rerank",
    "retrieve_subgraph",
    "run_grid",
    "save_rules",
    "score_candidates",
    "score_triple",
    "select_external",
    "select_surrogate",
    "shortest_path",
    "subgraph_report",
    "train_adapter",
    "train_global",
]
