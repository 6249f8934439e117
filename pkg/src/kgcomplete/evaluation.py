"""Filtered ranking evaluation and the experiment harness.

For every evaluation triple both the head and the tail query are scored.
The gold entity's base rank is its 1-based position in the filtered ranking
(known-true competitors from any split removed, gold retained). A selector,
when configured, may promote one candidate; the re-ranking semantics live in
``selector.rerank``. Metrics are MRR and Hits@{1,3,10}.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Optional, Union

from .config import PipelineConfig
from .embeddings import (
    CandidateSet,
    ExternalRankings,
    GlobalEmbeddings,
    rank_from_scores,
    score_against_all,
    train_global,
)
from .errors import ConfigError
from .gcn import AdapterModel, train_adapter
from .graph import (
    HEAD,
    TAIL,
    CompletionQuery,
    KnowledgeGraph,
    queries_for_triple,
)
from .prompts import Lexicon, build_prompt, generate_question, load_lexicon
from .retrieval import gold_grounding_present, retrieve_subgraph
from .rules import RuleSet, mine_rules, postprocess
from .selector import (
    SOURCE_FALLBACK,
    Endpoint,
    Selection,
    rerank,
    select_external,
    select_surrogate,
)

SelectorFn = Callable[[CompletionQuery, CandidateSet], Optional[Selection]]


@dataclass
class Metrics:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    query_count: int
    skipped: int = 0
    per_direction: Optional[dict[str, "Metrics"]] = None

    @classmethod
    def from_ranks(cls, ranks: list[int], skipped: int = 0) -> "Metrics":
        n = len(ranks)
        if n == 0:
            return cls(0.0, 0.0, 0.0, 0.0, 0, skipped)
        return cls(
            mrr=sum(1.0 / r for r in ranks) / n,
            hits1=sum(1 for r in ranks if r <= 1) / n,
            hits3=sum(1 for r in ranks if r <= 3) / n,
            hits10=sum(1 for r in ranks if r <= 10) / n,
            query_count=n,
            skipped=skipped,
        )

    def to_dict(self) -> dict:
        out = {
            "mrr": self.mrr,
            "hits1": self.hits1,
            "hits3": self.hits3,
            "hits10": self.hits10,
            "query_count": self.query_count,
            "skipped": self.skipped,
        }
        if self.per_direction is not None:
            out["per_direction"] = {k: m.to_dict() for k, m in self.per_direction.items()}
        return out


@dataclass
class Pipeline:
    """Everything needed to answer queries: ranker, rules, adapter, selector.

    ``selector`` may be "surrogate", "external", "none", or a callable
    ``(query, candidates) -> Selection | None`` for custom policies.
    Ablation flags: ``use_rules`` skips retrieval phase 2 and restricts phase
    3 to the query relation, ``use_local`` zeroes local embeddings,
    ``use_embeddings`` bypasses the surrogate scorer (ranker order decides),
    ``use_templates`` swaps questions for a bare completion instruction.
    """

    emb: Optional[GlobalEmbeddings] = None
    rules: Optional[RuleSet] = None
    adapter: Optional[AdapterModel] = None
    selector: Union[str, SelectorFn, None] = "surrogate"
    external_rankings: Optional[ExternalRankings] = None
    endpoint: Optional[Endpoint] = None
    lexicon: Optional[Lexicon] = None
    role: str = "general"
    k: int = 20
    tau: int = 100
    path_cap: Optional[int] = None
    use_rules: bool = True
    use_local: bool = True
    use_embeddings: bool = True
    use_templates: bool = True
    displace: bool = True

    def with_flags(self, **kwargs) -> "Pipeline":
        return replace(self, **kwargs)


@dataclass
class QueryResult:
    query: CompletionQuery
    base_rank: int
    final_rank: int
    candidates: CandidateSet
    selection: Optional[Selection]

    @property
    def gold_in_candidates(self) -> bool:
        return self.query.gold in self.candidates.entities


def _query_scores(kg: KnowledgeGraph, pipeline: Pipeline, query: CompletionQuery):
    if pipeline.external_rankings is not None:
        return pipeline.external_rankings.scores_for(kg, query)
    if pipeline.emb is None:
        raise ConfigError("pipeline has neither embeddings nor external rankings")
    return score_against_all(pipeline.emb, query)


def _bare_question(kg: KnowledgeGraph, query: CompletionQuery) -> str:
    rel = kg.relation_label(query.rel)
    known = kg.entity_label(query.known_entity)
    if query.direction == HEAD:
        return f"Complete the fact: (?, {rel}, {known})."
    return f"Complete the fact: ({known}, {rel}, ?)."


def _select(
    kg: KnowledgeGraph, pipeline: Pipeline, query: CompletionQuery, cands: CandidateSet
) -> Optional[Selection]:
    sel = pipeline.selector
    if sel is None or sel == "none" or not cands.entities:
        return None
    if callable(sel):
        return sel(query, cands)
    if sel == "surrogate":
        if not pipeline.use_embeddings:
            return Selection(chosen=cands.entities[0], source=SOURCE_FALLBACK)
        if pipeline.adapter is None:
            raise ConfigError("surrogate selector requires a trained adapter")
        return select_surrogate(
            pipeline.adapter,
            kg,
            pipeline.emb,
            pipeline.rules,
            query,
            cands,
            pipeline.tau,
            use_rules=pipeline.use_rules,
            use_local=pipeline.use_local,
            path_cap=pipeline.path_cap,
        )
    if sel == "external":
        if pipeline.endpoint is None:
            raise ConfigError("external selector requires an endpoint")
        if pipeline.use_templates and pipeline.lexicon is not None:
            question = generate_question(pipeline.lexicon, query, kg)
        else:
            question = _bare_question(kg, query)
        prompt = build_prompt(question, cands, query, pipeline.role, kg)
        return select_external(prompt, pipeline.endpoint, cands, cands.entities[0], kg)
    raise ConfigError(f"unknown selector {sel!r}")


def evaluate_query(
    kg: KnowledgeGraph, pipeline: Pipeline, query: CompletionQuery
) -> Optional[QueryResult]:
    """One query end to end; None when the gold answer cannot be ranked."""
    gold = query.gold
    if gold is None or not (0 <= gold < kg.num_entities):
        return None
    scores = _query_scores(kg, pipeline, query)
    if scores is None:
        return None
    filtered = rank_from_scores(kg, query, scores, filtered=True)
    base_rank = next((i + 1 for i, (e, _) in enumerate(filtered) if e == gold), None)
    if base_rank is None:
        return None
    raw = rank_from_scores(kg, query, scores, filtered=False)[: pipeline.k]
    cands = CandidateSet(query=query, entities=[e for e, _ in raw], scores=[s for _, s in raw])
    selection = _select(kg, pipeline, query, cands)
    if selection is None:
        final = base_rank
    else:
        chosen_rank = next(
            (i + 1 for i, (e, _) in enumerate(filtered) if e == selection.chosen), None
        )
        gold_better = chosen_rank is not None and base_rank < chosen_rank
        final = rerank(base_rank, gold, selection, gold_better, displace=pipeline.displace)
    return QueryResult(
        query=query, base_rank=base_rank, final_rank=final, candidates=cands, selection=selection
    )


def split_queries(kg: KnowledgeGraph, split: str) -> list[CompletionQuery]:
    queries: list[CompletionQuery] = []
    for triple in kg.split(split):
        queries.extend(queries_for_triple(triple))
    return queries


def iter_query_results(
    kg: KnowledgeGraph, pipeline: Pipeline, queries: Iterable[CompletionQuery]
) -> Iterator[Optional[QueryResult]]:
    for query in queries:
        yield evaluate_query(kg, pipeline, query)


def evaluate(
    kg: KnowledgeGraph,
    pipeline: Pipeline,
    split: str = "test",
    queries: Optional[list[CompletionQuery]] = None,
) -> Metrics:
    """Filtered metrics over head and tail queries of a split (or query list)."""
    if queries is None:
        queries = split_queries(kg, split)
    ranks: dict[str, list[int]] = {HEAD: [], TAIL: []}
    skipped = 0
    for query, result in zip(queries, iter_query_results(kg, pipeline, queries)):
        if result is None:
            skipped += 1
            continue
        ranks[query.direction].append(result.final_rank)
    overall = Metrics.from_ranks(ranks[HEAD] + ranks[TAIL], skipped=skipped)
    overall.per_direction = {
        HEAD: Metrics.from_ranks(ranks[HEAD]),
        TAIL: Metrics.from_ranks(ranks[TAIL]),
    }
    return overall


# -- extra measurements -----------------------------------------------------


def candidate_recall(
    kg: KnowledgeGraph, pipeline: Pipeline, queries: list[CompletionQuery]
) -> float:
    """Fraction of rankable queries whose gold lands in the top-k candidates."""
    hits = total = 0
    for result in iter_query_results(kg, pipeline, queries):
        if result is None:
            continue
        total += 1
        hits += result.gold_in_candidates
    return hits / total if total else 0.0


def grounding_coverage(
    kg: KnowledgeGraph,
    pipeline: Pipeline,
    queries: list[CompletionQuery],
    measure_rules: Optional[RuleSet] = None,
) -> float:
    """Fraction of queries whose retrieved subgraph contains a rule grounding
    of the gold entity. Measured against ``measure_rules`` (default: the
    pipeline's rules) so retrieval ablations stay comparable."""
    rules = measure_rules if measure_rules is not None else pipeline.rules
    ranker_only = pipeline.with_flags(selector=None)
    present = total = 0
    for query in queries:
        result = evaluate_query(kg, ranker_only, query)
        if result is None:
            continue
        g = retrieve_subgraph(
            kg,
            query,
            result.candidates,
            pipeline.rules,
            pipeline.tau,
            use_rules=pipeline.use_rules,
            path_cap=pipeline.path_cap,
        )
        total += 1
        present += gold_grounding_present(g, rules)
    return present / total if total else 0.0


# -- robustness experiments ----------------------------------------------------


def inject_noise(kg: KnowledgeGraph, proportion: float, seed: int = 0) -> KnowledgeGraph:
    """Replace a fixed share of train triples with uniform random negatives.

    Negatives never collide with any split, the kept train triples, or each
    other; entity and relation tables are untouched. Deterministic per seed.
    """
    if not (0.0 <= proportion <= 1.0):
        raise ConfigError(f"proportion must be in [0,1], got {proportion}")
    import random as _random

    n_replace = int(proportion * len(kg.train))
    if n_replace == 0:
        return KnowledgeGraph(
            entity_keys=kg.entity_keys,
            relation_keys=kg.relation_keys,
            train=list(kg.train),
            valid=list(kg.valid),
            test=list(kg.test),
            entity_labels=kg.entity_labels,
            entity_descriptions=kg.entity_descriptions,
            relation_labels=kg.relation_labels,
            duplicate_counts=kg.duplicate_counts,
        )
    rng = _random.Random(seed)
    replace_positions = set(rng.sample(range(len(kg.train)), n_replace))
    forbidden = set(kg.train) | set(kg.valid) | set(kg.test)
    new_train = list(kg.train)
    attempts_left = 1000 * n_replace + 1000
    for pos in sorted(replace_positions):
        while True:
            attempts_left -= 1
            if attempts_left < 0:
                raise ValueError("graph too dense to sample fresh negative triples")
            cand = (
                rng.randrange(kg.num_entities),
                rng.randrange(kg.num_relations),
                rng.randrange(kg.num_entities),
            )
            if cand not in forbidden:
                forbidden.add(cand)
                new_train[pos] = cand
                break
    return KnowledgeGraph(
        entity_keys=kg.entity_keys,
        relation_keys=kg.relation_keys,
        train=new_train,
        valid=list(kg.valid),
        test=list(kg.test),
        entity_labels=kg.entity_labels,
        entity_descriptions=kg.entity_descriptions,
        relation_labels=kg.relation_labels,
        duplicate_counts=kg.duplicate_counts,
    )


def inductive_subset(kg: KnowledgeGraph) -> list[CompletionQuery]:
    """Queries from test triples touching an entity or relation unseen in train."""
    queries: list[CompletionQuery] = []
    for h, r, t in kg.test:
        if (
            h in kg.unseen_entities
            or t in kg.unseen_entities
            or r in kg.unseen_relations
        ):
            queries.extend(queries_for_triple((h, r, t)))
    return queries


# -- pipeline assembly -------------------------------------------------------------


def build_pipeline(
    kg: KnowledgeGraph,
    cfg: PipelineConfig,
    emb: Optional[GlobalEmbeddings] = None,
    rules: Optional[RuleSet] = None,
    adapter: Optional[AdapterModel] = None,
) -> Pipeline:
    """Train every component the config asks for that was not passed in.

    Adapter training queries come from both prediction directions of the
    validation split.
    """
    if emb is None:
        emb = train_global(kg, cfg.embeddings)
    if rules is None:
        mined = mine_rules(
            kg,
            max_len=cfg.rules.max_len,
            min_support=cfg.rules.min_support,
            samples_per_rel=cfg.rules.samples_per_rel,
            seed=cfg.rules.seed,
        )
        rules = postprocess(mined, subset_mode=cfg.rules.subset_mode)
        if cfg.rules.min_confidence > 0.0:
            rules = rules.filter_confidence(cfg.rules.min_confidence)
    if adapter is None and cfg.selector.mode == "surrogate":
        adapter = train_adapter(kg, emb, rules, split_queries(kg, "valid"), cfg.adapter).model
    lexicon = None
    if cfg.prompts.lexicon:
        lexicon = load_lexicon(cfg.prompts.lexicon, kg)
    endpoint = None
    if cfg.selector.mode == "external":
        endpoint = Endpoint(
            url=cfg.selector.url,
            model_name=cfg.selector.model_name,
            timeout=cfg.selector.timeout,
            max_retries=cfg.selector.max_retries,
        )
    return Pipeline(
        emb=emb,
        rules=rules,
        adapter=adapter,
        selector=cfg.selector.mode,
        endpoint=endpoint,
        lexicon=lexicon,
        role=cfg.prompts.role,
        k=cfg.retrieval.k,
        tau=cfg.retrieval.tau,
        use_rules=cfg.flags.use_rules,
        use_local=cfg.flags.use_local,
        use_embeddings=cfg.flags.use_embeddings,
        use_templates=cfg.flags.use_templates,
        displace=cfg.selector.displace,
    )


# -- grids -----------------------------------------------------------------------


@dataclass
class Condition:
    label: str
    metrics: Metrics
    wall_clock: float
    extras: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    axis: str
    conditions: list[Condition]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "config": self.config,
            "conditions": [
                {
                    "label": c.label,
                    "metrics": c.metrics.to_dict(),
                    "wall_clock": c.wall_clock,
                    "extras": c.extras,
                }
                for c in self.conditions
            ],
        }

    def to_csv(self) -> str:
        lines = ["label,mrr,hits1,hits3,hits10,query_count,wall_clock"]
        for c in self.conditions:
            m = c.metrics
            lines.append(
                f"{c.label},{m.mrr},{m.hits1},{m.hits3},{m.hits10},{m.query_count},{c.wall_clock}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = f"{'condition':>14} {'MRR':>8} {'H@1':>8} {'H@3':>8} {'H@10':>8} {'n':>6} {'sec':>8}"
        rows = [header]
        for c in self.conditions:
            m = c.metrics
            rows.append(
                f"{c.label:>14} {m.mrr:8.4f} {m.hits1:8.4f} {m.hits3:8.4f} "
                f"{m.hits10:8.4f} {m.query_count:6d} {c.wall_clock:8.2f}"
            )
        return "\n".join(rows) + "\n"


class GridError(RuntimeError):
    def __init__(self, message: str, partial: ExperimentReport) -> None:
        super().__init__(message)
        self.partial = partial


def time_retrieval(
    kg: KnowledgeGraph,
    pipeline: Pipeline,
    queries: list[CompletionQuery],
    taus: Optional[list[int]] = None,
    repeats: int = 5,
) -> dict[int, float]:
    """Wall-clock seconds of one retrieval pass over the queries, per tau.

    Samples are interleaved round-robin across the tau values and each tau
    keeps its best round, so transient scheduler noise hits every condition
    alike instead of poisoning one of them.
    """
    if taus is None:
        taus = [pipeline.tau]
    prepared = []
    for query in queries:
        result = evaluate_query(kg, pipeline.with_flags(selector=None), query)
        if result is not None:
            prepared.append((query, result.candidates))

    def one_pass(tau: int) -> None:
        for query, cands in prepared:
            retrieve_subgraph(
                kg,
                query,
                cands,
                pipeline.rules,
                tau,
                use_rules=pipeline.use_rules,
                path_cap=pipeline.path_cap,
            )

    for tau in taus:
        one_pass(tau)  # warm-up
    times: dict[int, list[float]] = {tau: [] for tau in taus}
    for _ in range(repeats):
        for tau in taus:
            start = time.perf_counter()
            one_pass(tau)
            times[tau].append(time.perf_counter() - start)
    return {tau: min(samples) for tau, samples in times.items()}


def run_grid(
    kg: KnowledgeGraph,
    base: Pipeline,
    axis: str,
    values: list,
    split: str = "test",
    rebuild: Optional[Callable[[KnowledgeGraph], Pipeline]] = None,
    config_snapshot: Optional[dict] = None,
) -> ExperimentReport:
    """One evaluation per axis value, everything else held fixed.

    Axes: "tau" (retrieval budget; also times retrieval), "noise"
    (train-noise proportion; requires ``rebuild`` to retrain on the noisy
    graph), "ablation" (values are {flag: bool} dicts). A failing condition
    aborts the grid; partial results ride on the raised GridError.
    """
    if not values:
        raise ConfigError("grid axis needs at least one value")
    report = ExperimentReport(axis=axis, conditions=[], config=config_snapshot or {})
    retrieval_times: dict[int, float] = {}
    if axis == "tau":
        retrieval_times = time_retrieval(
            kg, base, split_queries(kg, split), taus=[int(v) for v in values]
        )
    for value in values:
        started = time.perf_counter()
        try:
            extras: dict = {}
            if axis == "tau":
                pipeline = base.with_flags(tau=int(value))
                extras["retrieval_seconds"] = retrieval_times[int(value)]
                metrics = evaluate(kg, pipeline, split=split)
                label = f"tau={value}"
            elif axis == "noise":
                if rebuild is None:
                    raise ConfigError("noise axis requires a rebuild function")
                noisy = inject_noise(kg, float(value), seed=0)
                pipeline = rebuild(noisy)
                metrics = evaluate(noisy, pipeline, split=split)
                label = f"noise={value}"
            elif axis == "ablation":
                flags = dict(value)
                pipeline = base.with_flags(**flags)
                metrics = evaluate(kg, pipeline, split=split)
                queries = split_queries(kg, split)
                extras["grounding_coverage"] = grounding_coverage(
                    kg, pipeline, queries, measure_rules=base.rules
                )
                label = ",".join(f"{k}={v}" for k, v in sorted(flags.items())) or "baseline"
            else:
                raise ConfigError(f"unknown grid axis {axis!r}")
        except Exception as exc:
            raise GridError(f"grid condition {value!r} failed: {exc}", partial=report) from exc
        report.conditions.append(
            Condition(
                label=label,
                metrics=metrics,
                wall_clock=time.perf_counter() - started,
                extras=extras,
            )
        )
    return report
