"""Query grounding, exact answering by graph search, and benchmark sampling."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsl import ENTITY, GENERAL_TYPE_NAMES, SHAPES, Node, general_type_of, parse
from .kg import NUM_RELATION_INDEX, NUM_RELATIONS, KnowledgeGraph, SplitGraphs

logger = logging.getLogger(__name__)

DEFAULT_RETRIES = 128


class DeadEnd(Exception):
    """A projection step found no in-edge; the caller should resample the seed."""


def _template(shape: str):
    toks = re.findall(r"[(),]|[a-z]+", shape)
    pos = 0

    def expr():
        nonlocal pos
        assert toks[pos] == "("
        op = toks[pos + 1]
        pos += 2
        kids = []
        while toks[pos] == ",":
            pos += 1
            kids.append(expr())
        pos += 1
        return (op, *kids)

    return expr()


TEMPLATES = {abbr: _template(shape) for abbr, shape in SHAPES.items()}


def anchor_for(g: KnowledgeGraph, node) -> Node:
    kind, i = node
    if kind == "e":
        return Node("e", label=g.entity_names[i])
    value, vtype = g.values[i]
    return Node("nv", value=value, vtype=vtype)


def _label_name(g: KnowledgeGraph, proj: str, label: int) -> str:
    if proj == "rp":
        return g.relation_names[label]
    if proj in ("ap", "rap"):
        return g.attribute_names[label]
    return NUM_RELATIONS[label]


def _random_node(g: KnowledgeGraph, kind: str, rng, value_type: str | None = None) -> tuple[str, int]:
    pool = g.active_entities() if kind == "e" else g.active_values()
    if value_type is not None:
        pool = [x for x in pool if g.values[x][1] == value_type]
    if not pool:
        raise DeadEnd(f"graph has no active {'entities' if kind == 'e' else 'values'}")
    return kind, pool[int(rng.integers(len(pool)))]


def _ground(t, v, g, rng) -> Node:
    op = t[0]
    if op == "e":
        return anchor_for(g, v)
    if op == "p":
        edges = g.in_edges(*v)
        if not edges:
            raise DeadEnd(f"no in-edges at {v}")
        proj, label, src_kind, src = edges[int(rng.integers(len(edges)))]
        child = _ground(t[1], (src_kind, src), g, rng)
        return Node(proj, label=_label_name(g, proj, label), children=(child,))
    if op == "i":
        return Node("i", children=tuple(_ground(c, v, g, rng) for c in t[1:]))
    if op == "u":
        # only the first disjunct has to contain v
        kids = [_ground(t[1], v, g, rng)]
        # disjuncts must agree on value type for the union to be well typed
        vtype = g.values[v[1]][1] if v[0] == "v" else None
        for c in t[2:]:
            kids.append(_ground(c, _random_node(g, v[0], rng, vtype), g, rng))
        return Node("u", children=tuple(kids))
    raise ValueError(f"bad template op {op!r}")


def ground_general_type(shape: str, v: tuple[str, int], g: KnowledgeGraph, rng) -> Node:
    """Ground a general query type backwards from seed node ``v``.

    ``v`` is ``("e", entity_id)`` or ``("v", value_id)``. Projection kinds
    follow the classes of the sampled in-edge's endpoints. Raises
    :class:`DeadEnd` when some projection step has nothing to follow.
    """
    if shape not in TEMPLATES:
        raise KeyError(f"unknown general query type {shape!r}")
    return _ground(TEMPLATES[shape], v, g, rng)


def search_answers(q: Node, g: KnowledgeGraph) -> frozenset:
    """Exact answer set of ``q`` on ``g`` by bottom-up set evaluation.

    Entity-rooted queries return entity ids, numeric-rooted ones value ids.
    """
    op = q.op
    if op == "e":
        return frozenset((g.entity_id(q.label),))
    if op == "nv":
        return frozenset((g.value_id(q.value, q.vtype),))
    if op == "i":
        sets = [search_answers(c, g) for c in q.children]
        return frozenset.intersection(*sets)
    if op == "u":
        return frozenset().union(*(search_answers(c, g) for c in q.children))
    src = search_answers(q.children[0], g)
    idx = g._lookup()
    if op == "rp":
        table, key = idx["rel_fwd"], g.relation_id(q.label)
    elif op == "ap":
        table, key = idx["attr_fwd"], g.attribute_id(q.label)
    elif op == "rap":
        table, key = idx["attr_rev"], g.attribute_id(q.label)
    else:
        table, key = idx["num_fwd"], NUM_RELATION_INDEX[q.label]
    out = set()
    for s in src:
        out.update(table.get((s, key), ()))
    return frozenset(out)


@dataclass
class QueryRecord:
    query: str
    answers_train: frozenset
    answers_val: frozenset | None = None
    answers_test: frozenset | None = None
    seed: tuple | None = field(default=None, compare=False)

    @property
    def graph(self) -> Node:
        return parse(self.query)

    @property
    def general_type(self) -> str:
        return general_type_of(self.graph)

    def to_json(self) -> str:
        doc = {"query": self.query, "answers_train": sorted(self.answers_train)}
        if self.answers_val is not None:
            doc["answers_val"] = sorted(self.answers_val)
        if self.answers_test is not None:
            doc["answers_test"] = sorted(self.answers_test)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, line: str) -> "QueryRecord":
        doc = json.loads(line)
        opt = lambda k: frozenset(doc[k]) if k in doc else None  # noqa: E731
        return cls(doc["query"], frozenset(doc["answers_train"]), opt("answers_val"), opt("answers_test"))


def write_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[QueryRecord]:
    with open(path, encoding="utf-8") as fh:
        return [QueryRecord.from_json(line) for line in fh if line.strip()]


def sample_seed(g: KnowledgeGraph, rng, numeric_root_ratio: float = 0.2) -> tuple[str, int]:
    kind = "v" if rng.random() < numeric_root_ratio else "e"
    if kind == "v" and not g.active_values():
        kind = "e"
    return _random_node(g, kind, rng)


def sample_query(shape: str, g: KnowledgeGraph, rng, numeric_root_ratio: float = 0.2,
                 max_retries: int = DEFAULT_RETRIES) -> tuple[Node, tuple]:
    """Draw a seed node and ground ``shape`` at it, resampling on dead ends."""
    for _ in range(max_retries):
        v = sample_seed(g, rng, numeric_root_ratio)
        try:
            return ground_general_type(shape, v, g, rng), v
        except DeadEnd:
            continue
    raise DeadEnd(f"no groundable seed for {shape} after {max_retries} retries")


@dataclass
class SamplingStats:
    attempts: dict = field(default_factory=dict)
    kept: dict = field(default_factory=dict)
    dropped_filter: dict = field(default_factory=dict)
    dropped_duplicate: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"attempts": self.attempts, "kept": self.kept,
                "dropped_filter": self.dropped_filter, "dropped_duplicate": self.dropped_duplicate}


def _sample_split(split: str, splits: SplitGraphs, counts: dict, rng, numeric_root_ratio,
                  max_retries, budget_factor, stats: SamplingStats):
    g = getattr(splits, split)
    out = []
    for shape in GENERAL_TYPE_NAMES:
        target = counts.get(shape, 0)
        if target <= 0:
            continue
        key = f"{split}/{shape}"
        seen, kept, attempts, dropped, dup = set(), [], 0, 0, 0
        budget = budget_factor * target + 100
        while len(kept) < target and attempts < budget:
            attempts += 1
            try:
                q, v = sample_query(shape, g, rng, numeric_root_ratio, max_retries)
            except DeadEnd:
                continue
            text = str(q)
            if text in seen:
                dup += 1
                continue
            seen.add(text)
            ans_train = search_answers(q, splits.train)
            if split == "train":
                kept.append(QueryRecord(text, ans_train, seed=v))
                continue
            ans_val = search_answers(q, splits.val)
            if split == "val":
                if len(ans_val) == len(ans_train):
                    dropped += 1
                    continue
                kept.append(QueryRecord(text, ans_train, ans_val, seed=v))
                continue
            ans_test = search_answers(q, splits.test)
            if len(ans_test) == len(ans_val):
                dropped += 1
                continue
            kept.append(QueryRecord(text, ans_train, ans_val, ans_test, seed=v))
        if len(kept) < target:
            logger.warning("%s: only %d of %d queries after %d attempts", key, len(kept), target, attempts)
        stats.attempts[key], stats.kept[key] = attempts, len(kept)
        stats.dropped_filter[key], stats.dropped_duplicate[key] = dropped, dup
        out.extend(kept)
    return out


def sample_dataset(splits: SplitGraphs, counts: dict, rng, eval_counts: dict | None = None,
                   numeric_root_ratio: float = 0.2, max_retries: int = DEFAULT_RETRIES,
                   budget_factor: int = 50):
    """Sample train/val/test query records.

    Each split is grounded on its own cumulative graph. Validation queries
    are kept only when their validation and training answer counts differ,
    test queries only when their test and validation answer counts differ.
    Returns ``(train, val, test, stats)``.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    eval_counts = counts if eval_counts is None else eval_counts
    stats = SamplingStats()
    train = _sample_split("train", splits, counts, rng, numeric_root_ratio, max_retries, budget_factor, stats)
    val = _sample_split("val", splits, eval_counts, rng, numeric_root_ratio, max_retries, budget_factor, stats)
    test = _sample_split("test", splits, eval_counts, rng, numeric_root_ratio, max_retries, budget_factor, stats)
    return train, val, test, stats


def save_dataset(out_dir, train, val, test) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(train, out_dir / "train.jsonl")
    write_records(val, out_dir / "val.jsonl")
    write_records(test, out_dir / "test.jsonl")


def root_is_entity(q: Node) -> bool:
    return q.phase == ENTITY
