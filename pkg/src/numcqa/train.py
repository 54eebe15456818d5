"""Alternating-loss training loop, Adam, and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import math
import time
import zipfile
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsl import ENTITY, parse, skeleton
from .encoding import EncodingSpec
from .kg import KnowledgeGraph
from .model import ModelConfig, NumberReasoningNetwork

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "numcqa-ckpt/1"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 128
    max_steps: int = 5000
    entity_steps: int = 1   # L_E steps per cycle
    numeric_steps: int = 1  # L_A steps per cycle
    seed: int = 0
    log_every: int = 500


class Adam:
    def __init__(self, params: dict, lr=0.005, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad * p.grad
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainState:
    step: int = 0
    trace: list = field(default_factory=list)  # (step, kind, loss)
    train_seconds: float = 0.0
    queries_seen: int = 0


class Trainer:
    """Owns a model, its optimizer and the batch rng for one training run."""

    def __init__(self, model: NumberReasoningNetwork, records, config: TrainConfig):
        self.model = model
        self.config = config
        # one optimizer state per loss; the two objectives differ in scale by an order of magnitude
        self.optims = {ENTITY: Adam(model.params, lr=config.lr), "numeric": Adam(model.params, lr=config.lr)}
        self.rng = np.random.default_rng(config.seed)
        self.state = TrainState()
        self.buckets = {ENTITY: defaultdict(list), "numeric": defaultdict(list)}
        for rec in records:
            q = parse(rec.query)
            answers = sorted(rec.answers_train)
            if not answers:
                continue
            kind = ENTITY if q.phase == ENTITY else "numeric"
            self.buckets[kind][skeleton(q)].append((q, answers))
        # fixed iteration order so the batch sequence depends only on the rng
        self.buckets = {k: dict(sorted(b.items())) for k, b in self.buckets.items()}
        cycle = [ENTITY] * config.entity_steps + ["numeric"] * config.numeric_steps
        self.schedule = [k for k in cycle if self.buckets[k]] or [ENTITY]
        if not any(self.buckets.values()):
            raise TrainingError("no training records with answers")

    def _batch(self, kind):
        buckets = self.buckets[kind]
        names = list(buckets)
        sizes = np.array([len(buckets[n]) for n in names], dtype=np.float64)
        b = names[int(self.rng.choice(len(names), p=sizes / sizes.sum()))]
        pool = buckets[b]
        idx = self.rng.choice(len(pool), size=min(self.config.batch_size, len(pool)), replace=False)
        queries, answers = [], []
        for i in idx:
            q, ans = pool[int(i)]
            queries.append(q)
            answers.append(ans[int(self.rng.integers(len(ans)))])
        return queries, answers

    def step(self) -> float:
        kind = self.schedule[self.state.step % len(self.schedule)]
        t0 = time.perf_counter()
        queries, answers = self._batch(kind)
        self.model.zero_grad()
        if kind == ENTITY:
            loss = self.model.entity_loss(queries, answers)
        else:
            loss = self.model.numeric_loss(queries, answers)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {kind} loss at batch {self.state.step}")
        loss.backward()
        self.optims[kind].step()
        self.state.train_seconds += time.perf_counter() - t0
        self.state.queries_seen += len(queries)
        self.state.trace.append((self.state.step, kind, value))
        self.state.step += 1
        return value

    def run(self, steps: int | None = None):
        steps = self.config.max_steps - self.state.step if steps is None else steps
        for _ in range(max(0, steps)):
            loss = self.step()
            if self.config.log_every and self.state.step % self.config.log_every == 0:
                logger.info("step %d loss %.4f", self.state.step, loss)
        return self.state

    @property
    def train_ms_per_query(self) -> float:
        if not self.state.queries_seen:
            return float("nan")
        return 1000.0 * self.state.train_seconds / self.state.queries_seen


def train(records, kg: KnowledgeGraph, model_config: ModelConfig, train_config: TrainConfig,
          spec: EncodingSpec | None = None) -> Trainer:
    """Build a model for ``kg`` and train it on ``records``; returns the trainer."""
    model = NumberReasoningNetwork(kg, model_config, spec)
    trainer = Trainer(model, records, train_config)
    trainer.run()
    return trainer


# -- checkpoints ----------------------------------------------------------------

def _vocab_graph(kg: KnowledgeGraph) -> KnowledgeGraph:
    return kg.with_edges(rel_edges=frozenset(), attr_edges=frozenset(), num_edges=frozenset())


def save_checkpoint(path, trainer: Trainer) -> None:
    """Write every tensor, optimizer moments and metadata into one zip container.

    Entries are written with a fixed timestamp so identical runs give
    identical bytes.
    """
    model = trainer.model
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": asdict(trainer.config),
        "encoding": model.spec.to_dict(),
        "value_types": list(model.value_types),
        "step": trainer.state.step,
        "adam_t": {k: o.t for k, o in trainer.optims.items()},
        "rng_state": trainer.rng.bit_generator.state,
        "trace": trainer.state.trace,
        "train_seconds": trainer.state.train_seconds,
        "queries_seen": trainer.state.queries_seen,
        "vocab": json.loads(_vocab_graph(model.kg).to_json()),
    }
    arrays = {}
    for name, t in model.params.items():
        arrays[f"param/{name}"] = t.data
        for kind, o in trainer.optims.items():
            arrays[f"adam_m/{kind}/{name}"] = o.m[name]
            arrays[f"adam_v/{kind}/{name}"] = o.v[name]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path, records=(), kg: KnowledgeGraph | None = None) -> Trainer:
    """Restore a trainer (model, optimizer, rng, trace) from ``path``.

    ``kg`` supplies the graph used for symbol lookup; by default the
    vocabulary stored in the checkpoint is used.
    """
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    if kg is None:
        kg = KnowledgeGraph.from_json(json.dumps(meta["vocab"]))
    model = NumberReasoningNetwork(kg, ModelConfig(**meta["model_config"]), EncodingSpec.from_dict(meta["encoding"]))
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    trainer = Trainer.__new__(Trainer)
    trainer.model = model
    trainer.config = TrainConfig(**meta["train_config"])
    trainer.optims = {}
    for kind, t in meta["adam_t"].items():
        o = Adam(model.params, lr=trainer.config.lr)
        o.t = t
        for name in model.params:
            o.m[name] = arrays[f"adam_m/{kind}/{name}"].copy()
            o.v[name] = arrays[f"adam_v/{kind}/{name}"].copy()
        trainer.optims[kind] = o
    trainer.rng = np.random.default_rng()
    trainer.rng.bit_generator.state = meta["rng_state"]
    trainer.state = TrainState(meta["step"], [tuple(t) for t in meta["trace"]],
                               meta["train_seconds"], meta["queries_seen"])
    if records:
        fresh = Trainer(model, records, trainer.config)
        trainer.buckets, trainer.schedule = fresh.buckets, fresh.schedule
    else:
        trainer.buckets, trainer.schedule = {ENTITY: {}, "numeric": {}}, [ENTITY]
    return trainer


def checkpoint_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json"))


def save_trace(path, trace) -> None:
    Path(path).write_text("".join(f"{s}\t{k}\t{v!r}\n" for s, k, v in trace), encoding="utf-8")
