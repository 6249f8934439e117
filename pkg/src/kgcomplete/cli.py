"""Command-line entry point wiring the pipeline stages.

Each stage writes its artifact plus a manifest recording the relevant config
sections and the content hashes of every input it read. A rerun whose
manifest would be identical is a no-op unless --force is given. A lock file
in the output directory prevents concurrent writers.

Stages: load, train-embeddings, mine-rules, retrieve, train-adapter,
predict, evaluate, grid.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import PipelineConfig, load_config
from .embeddings import GlobalEmbeddings, train_global
from .errors import ConfigError, ParseError
from .evaluation import (
    GridError,
    Pipeline,
    build_pipeline,
    evaluate,
    evaluate_query,
    inductive_subset,
    run_grid,
    split_queries,
)
from .gcn import AdapterModel, train_adapter
from .graph import KnowledgeGraph, load_kg
from .retrieval import retrieve_subgraph
from .rules import load_rules, mine_rules, postprocess, save_rules

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "load": "graph.kgc",
    "train-embeddings": "embeddings.bin",
    "mine-rules": "rules.jsonl",
    "retrieve": "subgraphs.jsonl",
    "train-adapter": "adapter.bin",
    "predict": "selections.jsonl",
    "evaluate": "metrics.json",
    "grid": "grid.json",
}

_STAGE_FOR_ARTIFACT = {v: k for k, v in ARTIFACTS.items()}


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require(out_dir: Path, name: str, config_path: str) -> Path:
    path = out_dir / name
    if not path.exists():
        stage = _STAGE_FOR_ARTIFACT.get(name, name)
        raise SystemExit(
            f"error: missing {path} - run `kgcomplete {stage} --config {config_path}` first"
        )
    return path


class StageRunner:
    def __init__(self, cfg: PipelineConfig, config_path: str, force: bool) -> None:
        self.cfg = cfg
        self.config_path = config_path
        self.force = force
        self.out_dir = Path(cfg.output.dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def manifest_path(self, stage: str) -> Path:
        return self.out_dir / f"{stage}.manifest.json"

    def manifest(self, stage: str, sections: tuple[str, ...], inputs: list[Path]) -> dict:
        return {
            "stage": stage,
            "config": self.cfg.section_dict(*sections),
            "inputs": {str(p): _sha256(p) for p in sorted(inputs)},
            "outputs": [ARTIFACTS[stage]],
        }

    def up_to_date(self, stage: str, manifest: dict) -> bool:
        if self.force:
            return False
        path = self.manifest_path(stage)
        artifact = self.out_dir / ARTIFACTS[stage]
        if not (path.exists() and artifact.exists()):
            return False
        try:
            return json.loads(path.read_text(encoding="utf-8")) == manifest
        except json.JSONDecodeError:
            return False

    def write_manifest(self, stage: str, manifest: dict) -> None:
        self.manifest_path(stage).write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    # -- stages ------------------------------------------------------------

    def load(self) -> Path:
        out = self.out_dir / ARTIFACTS["load"]
        inputs = [Path(self.cfg.data.train)]
        for attr in ("valid", "test", "entity_labels", "relation_labels"):
            value = getattr(self.cfg.data, attr)
            if value:
                inputs.append(Path(value))
        manifest = self.manifest("load", ("data",), inputs)
        if self.up_to_date("load", manifest):
            logger.info("load: up to date")
            return out
        kg = load_kg(
            self.cfg.data.train,
            self.cfg.data.valid or None,
            self.cfg.data.test or None,
            self.cfg.data.entity_labels or None,
            self.cfg.data.relation_labels or None,
        )
        kg.save(out)
        self.write_manifest("load", manifest)
        logger.info(
            "load: %d entities, %d relations, %d/%d/%d triples",
            kg.num_entities,
            kg.num_relations,
            len(kg.train),
            len(kg.valid),
            len(kg.test),
        )
        return out

    def _graph(self) -> KnowledgeGraph:
        return KnowledgeGraph.load(_require(self.out_dir, ARTIFACTS["load"], self.config_path))

    def train_embeddings(self) -> Path:
        graph_path = _require(self.out_dir, ARTIFACTS["load"], self.config_path)
        out = self.out_dir / ARTIFACTS["train-embeddings"]
        manifest = self.manifest("train-embeddings", ("embeddings",), [graph_path])
        if self.up_to_date("train-embeddings", manifest):
            logger.info("train-embeddings: up to date")
            return out
        kg = self._graph()
        emb = train_global(kg, self.cfg.embeddings)
        emb.save(out)
        (self.out_dir / "embeddings_loss.json").write_text(
            json.dumps({"loss_trace": emb.loss_trace}, sort_keys=True) + "\n", encoding="utf-8"
        )
        self.write_manifest("train-embeddings", manifest)
        logger.info("train-embeddings: %d epochs", len(emb.loss_trace))
        return out

    def mine_rules_stage(self) -> Path:
        graph_path = _require(self.out_dir, ARTIFACTS["load"], self.config_path)
        out = self.out_dir / ARTIFACTS["mine-rules"]
        manifest = self.manifest("mine-rules", ("rules",), [graph_path])
        if self.up_to_date("mine-rules", manifest):
            logger.info("mine-rules: up to date")
            return out
        kg = self._graph()
        mined = mine_rules(
            kg,
            max_len=self.cfg.rules.max_len,
            min_support=self.cfg.rules.min_support,
            samples_per_rel=self.cfg.rules.samples_per_rel,
            seed=self.cfg.rules.seed,
        )
        processed = postprocess(mined, subset_mode=self.cfg.rules.subset_mode)
        if self.cfg.rules.min_confidence > 0.0:
            processed = processed.filter_confidence(self.cfg.rules.min_confidence)
        save_rules(processed, out, kg)
        self.write_manifest("mine-rules", manifest)
        logger.info("mine-rules: %d rules kept (%d mined)", len(processed), len(mined))
        return out

    def _pipeline_inputs(self, need_adapter: bool) -> list[Path]:
        inputs = [
            _require(self.out_dir, ARTIFACTS["load"], self.config_path),
            _require(self.out_dir, ARTIFACTS["train-embeddings"], self.config_path),
        ]
        if self.cfg.flags.use_rules:
            inputs.append(_require(self.out_dir, ARTIFACTS["mine-rules"], self.config_path))
        if need_adapter and self.cfg.selector.mode == "surrogate":
            inputs.append(_require(self.out_dir, ARTIFACTS["train-adapter"], self.config_path))
        if self.cfg.prompts.lexicon:
            inputs.append(Path(self.cfg.prompts.lexicon))
        return inputs

    def _assemble(self, kg: KnowledgeGraph, need_adapter: bool) -> Pipeline:
        emb = GlobalEmbeddings.load(self.out_dir / ARTIFACTS["train-embeddings"])
        rules = None
        rules_path = self.out_dir / ARTIFACTS["mine-rules"]
        if rules_path.exists():
            rules = load_rules(rules_path, kg)
        adapter = None
        if need_adapter and self.cfg.selector.mode == "surrogate":
            adapter = AdapterModel.load(self.out_dir / ARTIFACTS["train-adapter"])
        return build_pipeline(kg, self.cfg, emb=emb, rules=rules, adapter=adapter)

    def retrieve(self, limit: int = 0) -> Path:
        inputs = self._pipeline_inputs(need_adapter=False)
        out = self.out_dir / ARTIFACTS["retrieve"]
        manifest = self.manifest("retrieve", ("retrieval", "flags", "eval"), inputs)
        manifest["limit"] = limit
        if self.up_to_date("retrieve", manifest):
            logger.info("retrieve: up to date")
            return out
        kg = self._graph()
        emb = GlobalEmbeddings.load(self.out_dir / ARTIFACTS["train-embeddings"])
        rules = None
        if self.cfg.flags.use_rules:
            rules = load_rules(self.out_dir / ARTIFACTS["mine-rules"], kg)
        pipeline = Pipeline(
            emb=emb,
            rules=rules,
            selector=None,
            k=self.cfg.retrieval.k,
            tau=self.cfg.retrieval.tau,
            use_rules=self.cfg.flags.use_rules,
        )
        queries = split_queries(kg, self.cfg.eval.split)
        if limit:
            queries = queries[:limit]
        written = 0
        with open(out, "w", encoding="utf-8") as fh:
            for query in queries:
                result = evaluate_query(kg, pipeline, query)
                if result is None:
                    continue
                g = retrieve_subgraph(
                    kg,
                    query,
                    result.candidates,
                    rules,
                    self.cfg.retrieval.tau,
                    use_rules=self.cfg.flags.use_rules,
                )
                fh.write(g.to_json(kg) + "\n")
                written += 1
        self.write_manifest("retrieve", manifest)
        logger.info("retrieve: %d subgraphs -> %s", written, out)
        return out

    def train_adapter_stage(self) -> Path:
        inputs = self._pipeline_inputs(need_adapter=False)
        out = self.out_dir / ARTIFACTS["train-adapter"]
        manifest = self.manifest("train-adapter", ("adapter", "retrieval", "flags"), inputs)
        if self.up_to_date("train-adapter", manifest):
            logger.info("train-adapter: up to date")
            return out
        kg = self._graph()
        emb = GlobalEmbeddings.load(self.out_dir / ARTIFACTS["train-embeddings"])
        rules = None
        if self.cfg.flags.use_rules:
            rules = load_rules(self.out_dir / ARTIFACTS["mine-rules"], kg)
        result = train_adapter(kg, emb, rules, split_queries(kg, "valid"), self.cfg.adapter)
        result.model.save(out)
        (self.out_dir / "adapter_train.json").write_text(
            json.dumps(
                {"loss_trace": result.losses, "skipped_queries": result.skipped}, sort_keys=True
            )
            + "\n",
            encoding="utf-8",
        )
        self.write_manifest("train-adapter", manifest)
        logger.info(
            "train-adapter: %d epochs, %d queries skipped", len(result.losses), result.skipped
        )
        return out

    def predict(self) -> Path:
        inputs = self._pipeline_inputs(need_adapter=True)
        out = self.out_dir / ARTIFACTS["predict"]
        manifest = self.manifest(
            "predict", ("retrieval", "selector", "prompts", "flags", "eval"), inputs
        )
        if self.up_to_date("predict", manifest):
            logger.info("predict: up to date")
            return out
        kg = self._graph()
        pipeline = self._assemble(kg, need_adapter=True)
        queries = split_queries(kg, self.cfg.eval.split)
        with open(out, "w", encoding="utf-8") as fh:
            for query in queries:
                result = evaluate_query(kg, pipeline, query)
                if result is None:
                    continue
                record = {
                    "direction": query.direction,
                    "known_entity": kg.entity_keys[query.known_entity],
                    "rel": kg.relation_keys[query.rel],
                    "gold": kg.entity_keys[query.gold] if query.gold is not None else None,
                    "chosen": (
                        kg.entity_keys[result.selection.chosen] if result.selection else None
                    ),
                    "source": result.selection.source if result.selection else None,
                    "base_rank": result.base_rank,
                    "final_rank": result.final_rank,
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.write_manifest("predict", manifest)
        logger.info("predict: selections -> %s", out)
        return out

    def evaluate_stage(self, inductive: bool = False) -> Path:
        inputs = self._pipeline_inputs(need_adapter=True)
        out = self.out_dir / ARTIFACTS["evaluate"]
        manifest = self.manifest(
            "evaluate", ("retrieval", "selector", "prompts", "flags", "eval"), inputs
        )
        manifest["inductive"] = inductive or self.cfg.eval.inductive
        if self.up_to_date("evaluate", manifest):
            logger.info("evaluate: up to date")
            return out
        kg = self._graph()
        pipeline = self._assemble(kg, need_adapter=True)
        started = time.perf_counter()
        if manifest["inductive"]:
            metrics = evaluate(kg, pipeline, queries=inductive_subset(kg))
        else:
            metrics = evaluate(kg, pipeline, split=self.cfg.eval.split)
        elapsed = time.perf_counter() - started
        payload = {"inductive": manifest["inductive"], "metrics": metrics.to_dict()}
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (self.out_dir / "report.txt").write_text(
            f"split={self.cfg.eval.split} inductive={manifest['inductive']}\n"
            f"mrr={metrics.mrr:.4f} hits1={metrics.hits1:.4f} hits3={metrics.hits3:.4f} "
            f"hits10={metrics.hits10:.4f} n={metrics.query_count} skipped={metrics.skipped}\n"
            f"wall_clock={elapsed:.2f}s\n",
            encoding="utf-8",
        )
        self.write_manifest("evaluate", manifest)
        logger.info("evaluate: mrr=%.4f hits1=%.4f", metrics.mrr, metrics.hits1)
        return out

    def grid(self, axis_spec: str) -> Path:
        axis, values = _parse_axis(axis_spec)
        inputs = self._pipeline_inputs(need_adapter=True)
        out = self.out_dir / ARTIFACTS["grid"]
        manifest = self.manifest(
            "grid", ("retrieval", "selector", "flags", "eval", "embeddings", "rules", "adapter"), inputs
        )
        manifest["axis"] = axis_spec
        if self.up_to_date("grid", manifest):
            logger.info("grid: up to date")
            return out
        kg = self._graph()
        pipeline = self._assemble(kg, need_adapter=True)
        try:
            report = run_grid(
                kg,
                pipeline,
                axis,
                values,
                split=self.cfg.eval.split,
                rebuild=lambda noisy: build_pipeline(noisy, self.cfg),
                config_snapshot=self.cfg.section_dict("retrieval", "flags", "eval"),
            )
        except GridError as exc:
            partial_path = self.out_dir / "grid_partial.json"
            partial_path.write_text(
                json.dumps(exc.partial.to_dict(), indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            raise SystemExit(f"error: {exc} (partial results in {partial_path})") from exc
        out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (self.out_dir / "grid.csv").write_text(report.to_csv(), encoding="utf-8")
        self.write_manifest("grid", manifest)
        print(report.to_text(), end="")
        return out


def _parse_axis(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"axis must look like name=v1,v2,..., got {spec!r}")
    name, raw = spec.split("=", 1)
    name = name.strip()
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"axis {name!r} has no values")
    if name == "tau":
        return name, [int(p) for p in parts]
    if name == "noise":
        return name, [float(p) for p in parts]
    if name == "ablation":
        return name, [{flag: False} for flag in parts]
    raise ConfigError(f"unknown axis {name!r} (expected tau, noise or ablation)")


class _Lock:
    """Exclusive advisory lock on the artifact directory."""

    def __init__(self, directory: Path) -> None:
        self.path = directory / ".lock"

    def __enter__(self) -> "_Lock":
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SystemExit(
                f"error: {self.path} exists - another run may be active "
                "(delete the lock file if it is stale)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info) -> None:
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull --section.key=value tokens out of argv before argparse sees them."""
    overrides, rest = [], []
    for token in argv:
        if token.startswith("--") and "=" in token and "." in token.split("=", 1)[0]:
            overrides.append(token[2:])
        else:
            rest.append(token)
    return overrides, rest


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides, argv = _split_overrides(argv)

    parser = argparse.ArgumentParser(
        prog="kgcomplete",
        description="Knowledge-graph completion pipeline.",
        epilog="Config values can be overridden with --section.key=value.",
    )
    parser.add_argument("--config", "-c", required=True, help="TOML config file")
    parser.add_argument("--force", action="store_true", help="rerun even if up to date")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def subparser(name: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name)
        # accepted after the subcommand too; SUPPRESS keeps the main parser's
        # value when the flag is absent
        p.add_argument("--force", action="store_true", default=argparse.SUPPRESS)
        p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
        return p

    for name in ("load", "train-embeddings", "mine-rules", "train-adapter", "predict"):
        subparser(name)
    retrieve_p = subparser("retrieve")
    retrieve_p.add_argument("--limit", type=int, default=0, help="max queries to dump (0 = all)")
    evaluate_p = subparser("evaluate")
    evaluate_p.add_argument("--inductive", action="store_true")
    grid_p = subparser("grid")
    grid_p.add_argument("--axis", required=True, help="tau=50,100,200 | noise=0,0.2 | ablation=use_rules")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, overrides)
        cfg.validate()
    except (ConfigError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    runner = StageRunner(cfg, args.config, args.force)
    with _Lock(runner.out_dir):
        try:
            if args.command == "load":
                runner.load()
            elif args.command == "train-embeddings":
                runner.train_embeddings()
            elif args.command == "mine-rules":
                runner.mine_rules_stage()
            elif args.command == "retrieve":
                runner.retrieve(limit=args.limit)
            elif args.command == "train-adapter":
                runner.train_adapter_stage()
            elif args.command == "predict":
                runner.predict()
            elif args.command == "evaluate":
                runner.evaluate_stage(inductive=args.inductive)
            elif args.command == "grid":
                runner.grid(args.axis)
        except (ConfigError, ParseError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
