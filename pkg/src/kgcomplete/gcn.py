"""Relational GCN over retrieved subgraphs plus the projection adapter.

Per subgraph, node states start from a projection of the global embeddings
and are updated by relation-typed mean aggregation:

    h^{l+1}_v = ReLU( W_self h^l_v
                      + sum_r (1/|Nf_r(v)|) sum_{u in Nf_r(v)} W_r     h^l_u
                      + sum_r (1/|Ni_r(v)|) sum_{u in Ni_r(v)} W_r_inv h^l_u )

where Nf/Ni are forward (u,r,v) and inverse (v,r,u) neighbor sets. The final
state is the entity's local embedding; entities outside the subgraph get a
zero local vector. The enhanced embedding is [global; local], projected by
an affine adapter, and candidates are scored bilinearly against the anchor
with a per-relation weight vector.

Everything is float64 numpy with hand-written backprop, so gradients can be
validated against finite differences exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .embeddings import CandidateSet, GlobalEmbeddings, collect_candidates
from .errors import ConfigError, ParseError
from .graph import CompletionQuery, KnowledgeGraph
from .retrieval import Subgraph, retrieve_subgraph
from .rules import RuleSet

_ADAPTER_MAGIC = b"ADPX"
_ADAPTER_VERSION = 1


@dataclass
class AdapterConfig:
    d_gcn: int = 128
    d_out: int = 64
    layers: int = 1
    lr: float = 0.05
    epochs: int = 100
    tau: int = 100
    k: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.d_gcn < 1 or self.d_out < 1:
            raise ConfigError("d_gcn and d_out must be >= 1")
        if self.layers not in (1, 2):
            raise ConfigError(f"layers must be 1 or 2, got {self.layers}")
        if self.epochs < 0 or self.tau < 1 or self.k < 1:
            raise ConfigError("epochs must be >= 0, tau and k >= 1")


@dataclass
class AdapterModel:
    """Named parameter tensors plus the shape metadata needed to rebuild them.

    Tensors: in_w/in_b (input projection), per layer self_w{l}, fwd_w{l} and
    inv_w{l} (the latter two are (|R|, d_gcn, d_gcn) stacks), out_w/out_b
    (the adapter), rel_w ((|R|, d_out) score vectors).
    """

    d_global: int
    d_gcn: int
    d_out: int
    layers: int
    n_rel: int
    params: dict[str, np.ndarray]
    seed: int = 0

    def copy(self) -> "AdapterModel":
        return AdapterModel(
            self.d_global,
            self.d_gcn,
            self.d_out,
            self.layers,
            self.n_rel,
            {k: v.copy() for k, v in self.params.items()},
            self.seed,
        )

    def check_finite(self) -> None:
        for name, tensor in self.params.items():
            if not np.isfinite(tensor).all():
                raise ValueError(f"adapter parameter {name} contains non-finite entries")

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_ADAPTER_MAGIC)
            fh.write(
                struct.pack(
                    "<IQQQQQQ",
                    _ADAPTER_VERSION,
                    self.d_global,
                    self.d_gcn,
                    self.d_out,
                    self.layers,
                    self.n_rel,
                    self.seed,
                )
            )
            for name in sorted(self.params):
                fh.write(np.ascontiguousarray(self.params[name], dtype=np.float64).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "AdapterModel":
        with open(path, "rb") as fh:
            if fh.read(4) != _ADAPTER_MAGIC:
                raise ParseError(f"{path}: not an adapter checkpoint")
            version, d_global, d_gcn, d_out, layers, n_rel, seed = struct.unpack(
                "<IQQQQQQ", fh.read(4 + 6 * 8)
            )
            if version != _ADAPTER_VERSION:
                raise ParseError(f"{path}: unsupported checkpoint version {version}")
            model = init_adapter(n_rel, d_global, AdapterConfig(d_gcn=d_gcn, d_out=d_out, layers=layers, seed=seed))
            for name in sorted(model.params):
                shape = model.params[name].shape
                count = int(np.prod(shape))
                model.params[name] = (
                    np.frombuffer(fh.read(count * 8), dtype=np.float64).reshape(shape).copy()
                )
        return model


def init_adapter(n_rel: int, d_global: int, config: AdapterConfig) -> AdapterModel:
    """Seeded structured initialization with a relation-composition prior.

    Node states carry two coordinate blocks. At init, inverse-direction
    messages copy their payload into the upper block and forward-direction
    messages into the lower block, the adapter reads the block difference,
    and the relation score vectors start at -1: candidates whose inbound
    neighborhood matches the anchor's outbound neighborhood score high.
    Training reshapes all of it; small seeded noise breaks symmetry.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dg, do = config.d_gcn, config.d_out
    half = max(1, dg // 2)
    low = dg - half

    def block(rows: int, cols: int, r0: int, c0: int, size: int, sign: float = 1.0) -> np.ndarray:
        out = np.zeros((rows, cols))
        m = min(size, rows - r0, cols - c0)
        out[r0 : r0 + m, c0 : c0 + m] = sign * np.eye(m)
        return out

    up = block(dg, dg, 0, 0, half)
    down = block(dg, dg, half, 0, low)
    out_w = block(do, d_global + dg, 0, d_global, half) + block(
        do, d_global + dg, 0, d_global + half, low, sign=-1.0
    )
    params: dict[str, np.ndarray] = {
        "in_w": block(dg, d_global, 0, 0, half),
        "in_b": np.zeros(dg),
        "out_w": out_w,
        "out_b": np.zeros(do),
        "rel_w": -np.ones((n_rel, do)),
    }
    for layer in range(config.layers):
        params[f"self_w{layer}"] = np.zeros((dg, dg))
        params[f"fwd_w{layer}"] = np.stack([down.copy() for _ in range(n_rel)])
        params[f"inv_w{layer}"] = np.stack([up.copy() for _ in range(n_rel)])
    for name, tensor in params.items():
        params[name] = tensor + 0.01 * rng.normal(size=tensor.shape)
    return AdapterModel(d_global, dg, do, config.layers, n_rel, params, config.seed)


@dataclass
class EnhancedEmbedding:
    entity: int
    global_vec: np.ndarray
    local_vec: np.ndarray
    enhanced: np.ndarray  # [global; local]
    projected: np.ndarray


class SubgraphTensors:
    """Dense per-subgraph structures reused across forward/backward passes."""

    def __init__(self, g: Subgraph, emb: GlobalEmbeddings) -> None:
        self.nodes: list[int] = sorted({e for h, _, t in g.triples for e in (h, t)})
        self.index = {e: i for i, e in enumerate(self.nodes)}
        n = len(self.nodes)
        self.x = emb.entity_vecs[self.nodes] if n else np.zeros((0, emb.d_global))
        # Mean-normalized aggregation matrices per (relation, direction).
        groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for h, r, t in g.triples:
            groups.setdefault((r, 0), []).append((self.index[t], self.index[h]))  # msg h -> t
            groups.setdefault((r, 1), []).append((self.index[h], self.index[t]))  # msg t -> h
        self.agg: list[tuple[int, int, np.ndarray]] = []
        for (rel, direction), edges in sorted(groups.items()):
            a = np.zeros((n, n))
            for dst, src in edges:
                a[dst, src] += 1.0
            row_sums = a.sum(axis=1, keepdims=True)
            np.divide(a, row_sums, out=a, where=row_sums > 0)
            self.agg.append((rel, direction, a))

    def __len__(self) -> int:
        return len(self.nodes)


def _gcn_states(model: AdapterModel, st: SubgraphTensors) -> dict:
    """All layer activations; cached for backprop."""
    h0 = st.x @ model.params["in_w"].T + model.params["in_b"]
    hs = [h0]
    zs = []
    aggregated = []  # per layer: list of A @ H_prev aligned with st.agg
    for layer in range(model.layers):
        h_prev = hs[-1]
        z = h_prev @ model.params[f"self_w{layer}"].T
        per_rel = []
        for rel, direction, a in st.agg:
            m = a @ h_prev
            per_rel.append(m)
            w = model.params[f"fwd_w{layer}"][rel] if direction == 0 else model.params[f"inv_w{layer}"][rel]
            z = z + m @ w.T
        zs.append(z)
        aggregated.append(per_rel)
        hs.append(np.maximum(z, 0.0))
    return {"hs": hs, "zs": zs, "agg": aggregated}


def _project(model: AdapterModel, enhanced: np.ndarray) -> np.ndarray:
    return enhanced @ model.params["out_w"].T + model.params["out_b"]


def gcn_forward(
    model: AdapterModel,
    g: Subgraph,
    emb: GlobalEmbeddings,
    entities: list[int],
    use_local: bool = True,
) -> list[EnhancedEmbedding]:
    """Enhanced embeddings for the requested entities.

    Entities absent from the subgraph get a zero local vector; with
    ``use_local`` off every local vector is zeroed (global-only ablation).
    """
    st = SubgraphTensors(g, emb)
    h_final = _gcn_states(model, st)["hs"][-1] if len(st) else np.zeros((0, model.d_gcn))
    out = []
    for e in entities:
        global_vec = emb.entity_vecs[e]
        if use_local and e in st.index:
            local = h_final[st.index[e]].copy()
        else:
            local = np.zeros(model.d_gcn)
        enhanced = np.concatenate([global_vec, local])
        out.append(
            EnhancedEmbedding(
                entity=e,
                global_vec=global_vec,
                local_vec=local,
                enhanced=enhanced,
                projected=_project(model, enhanced),
            )
        )
    return out


def score_candidates(
    model: AdapterModel,
    query: CompletionQuery,
    cands: CandidateSet,
    enhanced: list[EnhancedEmbedding],
) -> np.ndarray:
    """Bilinear candidate scores against the anchor's projected embedding."""
    table = {e.entity: e.projected for e in enhanced}
    anchor = query.known_entity
    if anchor not in table:
        raise ValueError("anchor embedding missing from the enhanced list")
    missing = [e for e in cands.entities if e not in table]
    if missing:
        raise ValueError(f"candidate embeddings missing: {missing}")
    w = model.params["rel_w"][query.rel]
    p_anchor = table[anchor]
    return np.array([float(((table[e] * w) * p_anchor).sum()) for e in cands.entities])


# -- training ------------------------------------------------------------------


@dataclass
class TrainingItem:
    query: CompletionQuery
    cands: CandidateSet
    st: SubgraphTensors
    gold_index: int
    global_rows: dict[int, np.ndarray]


def forward_scores(model: AdapterModel, item: TrainingItem) -> tuple[np.ndarray, dict]:
    st = item.st
    cache: dict = {"states": None}
    if len(st):
        cache["states"] = _gcn_states(model, st)
        h_final = cache["states"]["hs"][-1]
    else:
        h_final = np.zeros((0, model.d_gcn))
    anchor = item.query.known_entity
    ids = [anchor] + list(item.cands.entities)
    e_mat = np.zeros((len(ids), model.d_global + model.d_gcn))
    for row, e in enumerate(ids):
        e_mat[row, : model.d_global] = item.global_rows[e]
        if e in st.index:
            e_mat[row, model.d_global :] = h_final[st.index[e]]
    p = e_mat @ model.params["out_w"].T + model.params["out_b"]
    w = model.params["rel_w"][item.query.rel]
    scores = ((p[1:] * w) * p[0]).sum(axis=1)
    cache.update({"e_mat": e_mat, "p": p, "ids": ids})
    return scores, cache


def loss_and_grads(model: AdapterModel, item: TrainingItem) -> tuple[float, dict[str, np.ndarray]]:
    """Softmax cross-entropy of the gold candidate, with full backprop.

    Global embeddings are inputs, not parameters: no gradient flows to them.
    """
    scores, cache = forward_scores(model, item)
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    loss = -float(np.log(probs[item.gold_index]))

    dscores = probs.copy()
    dscores[item.gold_index] -= 1.0

    p = cache["p"]
    w = model.params["rel_w"][item.query.rel]
    dp = np.zeros_like(p)
    dp[1:] = dscores[:, None] * (w[None, :] * p[0][None, :])
    dp[0] = (dscores[:, None] * (w[None, :] * p[1:])).sum(axis=0)
    dw_rel = (dscores[:, None] * (p[1:] * p[0][None, :])).sum(axis=0)

    grads: dict[str, np.ndarray] = {name: np.zeros_like(t) for name, t in model.params.items()}
    grads["rel_w"][item.query.rel] = dw_rel
    e_mat = cache["e_mat"]
    grads["out_w"] += dp.T @ e_mat
    grads["out_b"] += dp.sum(axis=0)
    de = dp @ model.params["out_w"]

    st = item.st
    if len(st) and cache["states"] is not None:
        states = cache["states"]
        dh = np.zeros((len(st), model.d_gcn))
        for row, e in enumerate(cache["ids"]):
            if e in st.index:
                dh[st.index[e]] += de[row, model.d_global :]
        for layer in range(model.layers - 1, -1, -1):
            z = states["zs"][layer]
            h_prev = states["hs"][layer]
            dz = dh * (z > 0)
            grads[f"self_w{layer}"] += dz.T @ h_prev
            dh = dz @ model.params[f"self_w{layer}"]
            for (rel, direction, a), m in zip(st.agg, states["agg"][layer]):
                name = f"fwd_w{layer}" if direction == 0 else f"inv_w{layer}"
                grads[name][rel] += dz.T @ m
                dh += a.T @ (dz @ model.params[name][rel])
        grads["in_w"] += dh.T @ st.x
        grads["in_b"] += dh.sum(axis=0)

    return loss, grads


def build_training_items(
    kg: KnowledgeGraph,
    emb: GlobalEmbeddings,
    rules: Optional[RuleSet],
    queries: list[CompletionQuery],
    config: AdapterConfig,
    use_rules: bool = True,
) -> tuple[list[TrainingItem], int]:
    """Candidates + subgraph tensors per query; queries whose gold is missing
    from the candidate set (or unset) are skipped and counted."""
    items: list[TrainingItem] = []
    skipped = 0
    for query in queries:
        if query.gold is None:
            skipped += 1
            continue
        cands = collect_candidates(kg, emb, query, config.k)
        if query.gold not in cands.entities:
            skipped += 1
            continue
        g = retrieve_subgraph(kg, query, cands, rules, config.tau, use_rules=use_rules)
        items.append(
            TrainingItem(
                query=query,
                cands=cands,
                st=SubgraphTensors(g, emb),
                gold_index=cands.entities.index(query.gold),
                global_rows={
                    e: emb.entity_vecs[e] for e in [query.known_entity] + cands.entities
                },
            )
        )
    return items, skipped


@dataclass
class AdapterTraining:
    model: AdapterModel
    losses: list[float]
    skipped: int


def train_adapter(
    kg: KnowledgeGraph,
    emb: GlobalEmbeddings,
    rules: Optional[RuleSet],
    queries: list[CompletionQuery],
    config: AdapterConfig,
) -> AdapterTraining:
    """SGD on per-query softmax cross-entropy; deterministic under the seed."""
    config.validate()
    items, skipped = build_training_items(kg, emb, rules, queries, config)
    if not items:
        raise ValueError("no usable training queries (gold missing from every candidate set)")
    model = init_adapter(kg.num_relations, emb.d_global, config)
    rng = np.random.default_rng(config.seed + 1)
    losses: list[float] = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in rng.permutation(len(items)):
            loss, grads = loss_and_grads(model, items[idx])
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite adapter loss at epoch {epoch + 1}")
            total += loss
            for name, grad in grads.items():
                model.params[name] -= config.lr * grad
        losses.append(total / len(items))
    model.check_finite()
    return AdapterTraining(model=model, losses=losses, skipped=skipped)
