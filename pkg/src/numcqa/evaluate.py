"""Hit@K / MRR over hard answers, aggregated per general query type."""
from __future__ import annotations

import gc
import json
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .dsl import GENERAL_TYPE_NAMES, general_type_of, parse
from .model import NumberReasoningNetwork, filtered_ranks

METRICS = ("hit1", "hit3", "hit10", "mrr")


def metric_of_query(ranks, metric: str) -> float:
    """Mean of m(rank) over a query's hard answers; ``m`` is 1[r <= K] or 1/r."""
    ranks = np.asarray(list(ranks), dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("query has no hard answers")
    if metric == "mrr":
        return float(np.mean(1.0 / ranks))
    if metric.startswith("hit"):
        return float(np.mean(ranks <= int(metric[3:])))
    raise KeyError(f"unknown metric {metric!r}")


def hard_answers(record, split: str) -> tuple[frozenset, frozenset]:
    """``(hard, known)``: answers new to ``split`` and the split's full answer set."""
    if split == "val":
        return record.answers_val - record.answers_train, record.answers_val
    if split == "test":
        return record.answers_test - record.answers_val, record.answers_test
    raise ValueError(f"split must be 'val' or 'test', got {split!r}")


@dataclass
class EvalRecord:
    query_id: int
    query: str
    general_type: str
    ranks: dict  # hard answer id -> rank

    @property
    def n_hard(self) -> int:
        return len(self.ranks)


@dataclass
class Report:
    per_type: dict
    macro: dict
    micro: dict
    counts: dict
    train_ms_per_query: float | None = None
    infer_ms_per_query: float | None = None
    records: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"per_type": self.per_type, "macro": self.macro, "micro": self.micro,
                "counts": self.counts, "timing_ms_per_query": {
                    "training": self.train_ms_per_query, "inference": self.infer_ms_per_query}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'type':<8}{'n':>6}" + "".join(f"{m:>9}" for m in METRICS)
        lines = [head, "-" * len(head)]
        for t in GENERAL_TYPE_NAMES:
            if t in self.per_type:
                row = self.per_type[t]
                lines.append(f"{t:<8}{self.counts[t]:>6}" + "".join(f"{row[m]:>9.4f}" for m in METRICS))
        total = sum(self.counts.values())
        lines.append(f"{'macro':<8}{total:>6}" + "".join(f"{self.macro[m]:>9.4f}" for m in METRICS))
        lines.append(f"{'micro':<8}{total:>6}" + "".join(f"{self.micro[m]:>9.4f}" for m in METRICS))
        if self.train_ms_per_query is not None or self.infer_ms_per_query is not None:
            lines.append("")
            lines.append(f"{'Time (ms)':<12}{'Training':>10}{'Inference':>11}")
            fmt = lambda x: f"{x:.3f}" if x is not None else "-"  # noqa: E731
            lines.append(f"{'per query':<12}{fmt(self.train_ms_per_query):>10}{fmt(self.infer_ms_per_query):>11}")
        return "\n".join(lines)

    def rank_dump(self) -> str:
        return "".join(f"{r.query_id}\t{r.general_type}\t{v}\t{rank}\n"
                       for r in self.records for v, rank in sorted(r.ranks.items()))


def aggregate(records) -> tuple[dict, dict, dict, dict]:
    """Per-type means, macro mean over types, micro mean over queries, counts."""
    by_type = defaultdict(list)
    for r in records:
        by_type[r.general_type].append({m: metric_of_query(r.ranks.values(), m) for m in METRICS})
    per_type = {t: {m: float(np.mean([q[m] for q in qs])) for m in METRICS} for t, qs in by_type.items()}
    counts = {t: len(qs) for t, qs in by_type.items()}
    macro = {m: float(np.mean([per_type[t][m] for t in per_type])) if per_type else float("nan") for m in METRICS}
    flat = [q for qs in by_type.values() for q in qs]
    micro = {m: float(np.mean([q[m] for q in flat])) if flat else float("nan") for m in METRICS}
    return per_type, macro, micro, counts


def rank_records(records, model: NumberReasoningNetwork, split: str, timer: list | None = None) -> list[EvalRecord]:
    """Filtered ranks of every hard answer; queries without hard answers are skipped.

    If ``timer`` is a list, the seconds spent in the model (encoding and
    scoring, not rank bookkeeping) are appended to it.
    """
    items = []
    for i, rec in enumerate(records):
        hard, known = hard_answers(rec, split)
        if hard:
            items.append((i, rec, parse(rec.query), hard, known))
    out = []
    if timer is not None:
        # start the timed section with a clean heap so a full collection
        # owed to earlier work (training, loading) is not billed to inference
        gc.collect()
    for start in range(0, len(items), 1024):
        chunk = items[start:start + 1024]
        t0 = time.perf_counter()
        scored = model.score_candidates([q for _, _, q, _, _ in chunk])
        if timer is not None:
            timer.append(time.perf_counter() - t0)
        for (i, rec, q, hard, known), (cand, scores) in zip(chunk, scored):
            ranks = filtered_ranks(cand, scores, sorted(hard), known)
            out.append(EvalRecord(i, rec.query, general_type_of(q), ranks))
    out.sort(key=lambda r: r.query_id)
    return out


def evaluate(records, model: NumberReasoningNetwork, split: str = "test",
             train_ms_per_query: float | None = None) -> Report:
    timer = []
    ranked = rank_records(records, model, split, timer)
    per_type, macro, micro, counts = aggregate(ranked)
    infer = 1000.0 * sum(timer) / len(ranked) if ranked else None
    return Report(per_type, macro, micro, counts, train_ms_per_query, infer, ranked)


def random_expected_mrr(records, model: NumberReasoningNetwork, split: str = "test") -> float:
    """Closed-form MRR of a uniformly random ranking on the same filtered candidate pools.

    A target among ``n`` candidates has expected reciprocal rank
    ``H_n / n``; aggregation matches :func:`evaluate` (macro over types).
    """
    by_type = defaultdict(list)
    for rec in records:
        hard, known = hard_answers(rec, split)
        if not hard:
            continue
        q = parse(rec.query)
        n = len(model.candidates(q)) - (len(known) - 1)
        h = float(np.sum(1.0 / np.arange(1, n + 1)))
        by_type[general_type_of(q)].append(h / n)
    return float(np.mean([np.mean(v) for v in by_type.values()]))
