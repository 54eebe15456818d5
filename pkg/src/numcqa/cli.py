"""Command line: synth, build, sample, train, eval, answer.

Every command takes ``--seed`` and ``--config`` (a JSON file of RunConfig
fields); explicit flags override the file. Relative default locations live
under ``$NUMCQA_DATA_DIR`` (or the working directory). Exit codes: 0 ok,
2 usage or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dsl import GENERAL_TYPE_NAMES, QueryError, parse
from .encoding import EncodingSpec
from .evaluate import evaluate
from .kg import (GraphFormatError, KnowledgeGraph, SplitGraphs, augment_numerical_edges, load_triples,
                 make_synthetic_kg, split_edges, write_triples)
from .model import ModelConfig, NumberReasoningNetwork, StateError
from .sampler import read_records, sample_dataset, save_dataset, search_answers
from .train import TrainConfig, Trainer, TrainingError, checkpoint_meta, load_checkpoint, save_checkpoint, save_trace

logger = logging.getLogger("numcqa")

DATA_DIR_ENV = "NUMCQA_DATA_DIR"
SPLITS = ("train", "val", "test")


class InputError(ValueError):
    """Bad user input; maps to exit code 2."""


@dataclass
class RunConfig:
    seed: int = 0
    dim: int = 16
    lr: float = 0.005
    batch_size: int = 128
    max_steps: int = 5000
    entity_steps: int = 1
    numeric_steps: int = 1
    encoding: str = "sinusoidal"
    value_mode: str = "nrn"
    anchor_var: float = 0.01
    cap_per_type: int = 4000
    numeric_root_ratio: float = 0.2
    shape_counts: dict = field(default_factory=lambda: {t: 1000 for t in GENERAL_TYPE_NAMES})
    eval_counts: dict = field(default_factory=lambda: {t: 100 for t in GENERAL_TYPE_NAMES})
    paths: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, encoding=self.encoding, value_mode=self.value_mode,
                           anchor_var=self.anchor_var, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_steps=self.max_steps,
                           entity_steps=self.entity_steps, numeric_steps=self.numeric_steps, seed=self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def parse_counts(text: str) -> dict:
    """``"100"`` gives every general type 100; ``"1p=50,2i=20"`` names types explicitly."""
    text = text.strip()
    if "=" not in text:
        n = int(text)
        return {t: n for t in GENERAL_TYPE_NAMES}
    out = {}
    for part in text.split(","):
        k, _, v = part.partition("=")
        k = k.strip()
        if k not in GENERAL_TYPE_NAMES:
            raise InputError(f"unknown general query type {k!r}")
        out[k] = int(v)
    return out


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    names = {f.name for f in fields(RunConfig)}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(str(path))
        doc = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(doc) - names
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        for k, v in doc.items():
            setattr(cfg, k, v)
    for k in names:
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_splits(graph_dir: Path) -> SplitGraphs:
    for s in SPLITS:
        if not (graph_dir / f"{s}.json").exists():
            raise FileNotFoundError(str(graph_dir / f"{s}.json"))
    return SplitGraphs(*(KnowledgeGraph.load(graph_dir / f"{s}.json") for s in SPLITS))


# -- commands ------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else data_dir() / "raw"
    out.mkdir(parents=True, exist_ok=True)
    g = make_synthetic_kg(args.entities, args.relations, args.attributes, args.values, args.density,
                          cfg.seed, n_clusters=args.clusters)
    write_triples(g, out / "relations.tsv", out / "attributes.tsv", out / "types.tsv")
    cfg.paths = {"out": str(out)}
    write_json(out / "synth.json", {"stats": g.stats(), "run_config": asdict(cfg),
                                    "params": {"entities": args.entities, "relations": args.relations,
                                               "attributes": args.attributes, "values": args.values,
                                               "density": args.density, "clusters": args.clusters}})
    print(json.dumps(g.stats(), sort_keys=True))
    return 0


def cmd_build(args, cfg: RunConfig) -> int:
    raw = Path(args.raw) if args.raw else data_dir() / "raw"
    rel = Path(args.relations) if args.relations else raw / "relations.tsv"
    attr = Path(args.attributes) if args.attributes else raw / "attributes.tsv"
    types = Path(args.types) if args.types else raw / "types.tsv"
    out = Path(args.out) if args.out else data_dir() / "graphs"
    g = load_triples(rel, attr, types)
    # numerical edges are added before splitting so they are split like every other edge class
    g = augment_numerical_edges(g, cfg.cap_per_type, cfg.seed)
    splits = split_edges(g, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    for name, sg in splits.as_dict().items():
        sg.save(out / f"{name}.json")
    cfg.paths = {"relations": str(rel), "attributes": str(attr), "types": str(types), "out": str(out)}
    manifest = {"stats": {name: sg.stats() for name, sg in splits.as_dict().items()},
                "value_types": list(g.value_types), "run_config": asdict(cfg)}
    write_json(out / "manifest.json", manifest)
    print(json.dumps(manifest["stats"], sort_keys=True))
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    graphs = Path(args.graphs) if args.graphs else data_dir() / "graphs"
    out = Path(args.out) if args.out else data_dir() / "queries"
    splits = load_splits(graphs)
    train, val, test, stats = sample_dataset(splits, cfg.shape_counts, cfg.seed, eval_counts=cfg.eval_counts,
                                             numeric_root_ratio=cfg.numeric_root_ratio)
    save_dataset(out, train, val, test)
    rates = {}
    for key, attempts in stats.attempts.items():
        dropped = stats.dropped_filter[key]
        considered = attempts - stats.dropped_duplicate[key]
        rates[key] = dropped / considered if considered else 0.0
    cfg.paths = {"graphs": str(graphs), "out": str(out)}
    report = {"counts": {"train": len(train), "val": len(val), "test": len(test)},
              "filter_drop_rate": rates, **stats.as_dict(), "run_config": asdict(cfg)}
    write_json(out / "sample_report.json", report)
    print(json.dumps(report["counts"], sort_keys=True))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    graphs = Path(args.graphs) if args.graphs else data_dir() / "graphs"
    queries = Path(args.queries) if args.queries else data_dir() / "queries"
    out = Path(args.out) if args.out else data_dir() / "model.ckpt"
    splits = load_splits(graphs)
    if not (queries / "train.jsonl").exists():
        raise FileNotFoundError(str(queries / "train.jsonl"))
    records = read_records(queries / "train.jsonl")
    spec = EncodingSpec.from_graph(cfg.encoding, cfg.dim, splits.train)
    # the test graph carries the shared vocabulary
    model = NumberReasoningNetwork(splits.test, cfg.model_config(), spec)
    trainer = Trainer(model, records, cfg.train_config())
    trainer.run()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, trainer)
    save_trace(out.with_suffix(".trace.tsv"), trainer.state.trace)
    cfg.paths = {"graphs": str(graphs), "queries": str(queries), "out": str(out)}
    Path(str(out) + ".run.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    last = trainer.state.trace[-1][2] if trainer.state.trace else None
    print(json.dumps({"steps": trainer.state.step, "last_loss": last,
                      "train_ms_per_query": trainer.train_ms_per_query}))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    queries = Path(args.queries) if args.queries else data_dir() / "queries"
    path = queries / f"{args.split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(str(path))
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(args.checkpoint)
    trainer = load_checkpoint(args.checkpoint)
    meta = checkpoint_meta(args.checkpoint)
    train_ms = 1000.0 * meta["train_seconds"] / meta["queries_seen"] if meta["queries_seen"] else None
    report = evaluate(read_records(path), trainer.model, args.split, train_ms_per_query=train_ms)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "ranks.tsv").write_text(report.rank_dump(), encoding="utf-8")
    return 0


def cmd_answer(args, cfg: RunConfig) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(args.checkpoint)
    model = load_checkpoint(args.checkpoint).model
    kg = model.kg
    q = parse(args.query, kg)
    (cand, scores), = model.score_candidates([q])
    order = np.lexsort((cand, -scores))[: args.top_k]

    def name(i):
        return kg.entity_names[i] if q.phase == "Entity" else kg.values[i][0]

    doc = {"query": str(q), "phase": q.phase,
           "neural_top_k": [{"answer": name(int(cand[j])), "score": float(scores[j])} for j in order]}
    if args.graph:
        g = KnowledgeGraph.load(args.graph)
        parse(args.query, g)
        doc["oracle"] = sorted(name(i) for i in search_answers(q, g))
    print(json.dumps(doc, indent=2))
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="JSON file of run settings; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="numcqa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic graph as triple files")
    s.add_argument("--entities", type=int, default=200)
    s.add_argument("--relations", type=int, default=4)
    s.add_argument("--attributes", type=int, default=6)
    s.add_argument("--values", type=int, default=300)
    s.add_argument("--density", type=float, default=0.03)
    s.add_argument("--clusters", type=int, default=16)
    s.add_argument("--out")

    s = sub.add_parser("build", parents=[common], help="load triples, add numerical edges, split")
    s.add_argument("--raw", help="directory with relations.tsv, attributes.tsv, types.tsv")
    s.add_argument("--relations")
    s.add_argument("--attributes")
    s.add_argument("--types")
    s.add_argument("--cap-per-type", dest="cap_per_type", type=int, default=None)
    s.add_argument("--out")

    s = sub.add_parser("sample", parents=[common], help="sample train/val/test queries")
    s.add_argument("--graphs")
    s.add_argument("--counts", dest="shape_counts", type=parse_counts, default=None)
    s.add_argument("--eval-counts", dest="eval_counts", type=parse_counts, default=None)
    s.add_argument("--numeric-root-ratio", dest="numeric_root_ratio", type=float, default=None)
    s.add_argument("--out")

    s = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    s.add_argument("--graphs")
    s.add_argument("--queries")
    s.add_argument("--out")
    s.add_argument("--dim", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    s.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    s.add_argument("--entity-steps", dest="entity_steps", type=int, default=None)
    s.add_argument("--numeric-steps", dest="numeric_steps", type=int, default=None)
    s.add_argument("--encoding", choices=("sinusoidal", "dice"), default=None)
    s.add_argument("--value-mode", dest="value_mode", choices=("nrn", "entity"), default=None)
    s.add_argument("--anchor-var", dest="anchor_var", type=float, default=None)

    s = sub.add_parser("eval", parents=[common], help="rank hard answers and report metrics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--queries")
    s.add_argument("--split", choices=("val", "test"), default="test")
    s.add_argument("--out", help="directory for report.json and ranks.tsv")

    s = sub.add_parser("answer", parents=[common], help="answer one query with the model (and the oracle)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--graph", help="graph JSON for exact answers")
    s.add_argument("--top-k", dest="top_k", type=int, default=10)
    return p


COMMANDS = {"synth": cmd_synth, "build": cmd_build, "sample": cmd_sample, "train": cmd_train,
            "eval": cmd_eval, "answer": cmd_answer}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as e:
        print(f"error: no such file: {e.filename or e.args[0]}", file=sys.stderr)
        return 2
    except (InputError, GraphFormatError, QueryError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, StateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001
        logger.debug("unhandled", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
