"""Candidate selection and re-ranking semantics.

The default selector scores candidates with the trained GCN adapter over the
query's retrieved subgraph. The external selector posts the rendered prompt
to a chat-completions endpoint and maps the reply back to a candidate,
falling back to the ranker's top candidate on any failure - evaluation stays
total either way.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .embeddings import CandidateSet, GlobalEmbeddings
from .gcn import AdapterModel, gcn_forward, score_candidates
from .graph import CompletionQuery, KnowledgeGraph
from .prompts import Prompt, parse_answer
from .retrieval import retrieve_subgraph
from .rules import RuleSet

logger = logging.getLogger(__name__)

TOKEN_ENV_VAR = "KGCOMPLETE_API_TOKEN"

SOURCE_SURROGATE = "surrogate"
SOURCE_EXTERNAL = "external"
SOURCE_FALLBACK = "fallback"


@dataclass
class Selection:
    chosen: int
    source: str
    raw_text: Optional[str] = None


def select_surrogate(
    model: AdapterModel,
    kg: KnowledgeGraph,
    emb: GlobalEmbeddings,
    rules: Optional[RuleSet],
    query: CompletionQuery,
    cands: CandidateSet,
    tau: int,
    use_rules: bool = True,
    use_local: bool = True,
    path_cap: Optional[int] = None,
) -> Selection:
    """Retrieve, embed, score, argmax; ties go to the better-ranked candidate."""
    g = retrieve_subgraph(kg, query, cands, rules, tau, use_rules=use_rules, path_cap=path_cap)
    enhanced = gcn_forward(
        model, g, emb, [query.known_entity] + list(cands.entities), use_local=use_local
    )
    scores = score_candidates(model, query, cands, enhanced)
    best = int(np.argmax(scores))  # argmax returns the first maximum
    return Selection(chosen=cands.entities[best], source=SOURCE_SURROGATE)


@dataclass
class Endpoint:
    url: str
    model_name: str
    timeout: float = 30.0
    max_retries: int = 2


def _post_chat(endpoint: Endpoint, prompt_text: str) -> str:
    payload = json.dumps(
        {
            "model": endpoint.model_name,
            "messages": [{"role": "user", "content": prompt_text}],
            "temperature": 0,
        }
    ).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(TOKEN_ENV_VAR)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    request = urllib.request.Request(endpoint.url, data=payload, headers=headers, method="POST")
    with urllib.request.urlopen(request, timeout=endpoint.timeout) as response:
        data = json.loads(response.read().decode("utf-8"))
    choice = data["choices"][0]
    if "message" in choice:
        return choice["message"]["content"]
    return choice["text"]


def select_external(
    prompt: Prompt,
    endpoint: Endpoint,
    cands: CandidateSet,
    ranker_top: int,
    kg: KnowledgeGraph,
) -> Selection:
    """Query the endpoint; fall back to the ranker's top pick on any failure.

    Embedding slots travel as literal placeholder tokens - a text transport
    cannot carry vectors, so external mode is best-effort by design.
    """
    text: Optional[str] = None
    for attempt in range(endpoint.max_retries + 1):
        try:
            text = _post_chat(endpoint, prompt.render())
            break
        except (urllib.error.URLError, OSError, KeyError, IndexError, ValueError) as exc:
            logger.warning("external selector attempt %d failed: %s", attempt + 1, exc)
    if text is not None:
        chosen = parse_answer(text, cands, kg)
        if chosen is not None:
            return Selection(chosen=chosen, source=SOURCE_EXTERNAL, raw_text=text)
        logger.warning("external reply %r does not name a candidate; falling back", text[:80])
    return Selection(chosen=ranker_top, source=SOURCE_FALLBACK, raw_text=text)


def rerank(
    base_rank: int,
    gold: int,
    selection: Selection,
    gold_base_better_than_chosen: bool,
    displace: bool = True,
) -> int:
    """Final filtered rank of gold after one candidate is promoted to the top.

    Choosing gold yields rank 1. Promoting a worse-ranked entity over gold
    pushes gold down one position; promoting an entity that already out-ranked
    gold (or one absent from the filtered ranking) leaves gold's rank alone.
    With ``displace`` off, gold keeps its base rank on any wrong selection
    (sensitivity-analysis alternative).
    """
    if base_rank < 1:
        raise ValueError(f"base rank must be >= 1, got {base_rank}")
    if selection.chosen == gold:
        return 1
    if displace and gold_base_better_than_chosen:
        return base_rank + 1
    return base_rank
