"""Knowledge graphs with entity relations, numerical attributes and
value-to-value numerical relations.

Every graph in a split family shares one vocabulary (entity names, value
nodes, relation and attribute names); the edge sets are what differ.
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

NUM_RELATIONS = (
    "EqualTo",
    "SmallerThan",
    "GreaterThan",
    "TwiceEqualTo",
    "ThreeTimesEqualTo",
    "TwiceGreaterThan",
    "ThreeTimesGreaterThan",
)
NUM_RELATION_INDEX = {name: i for i, name in enumerate(NUM_RELATIONS)}

FORMAT_TAG = "numcqa-kg/1"


class GraphFormatError(ValueError):
    pass


def num_relation_holds(f: str, src: float, dst: float) -> bool:
    """Predicate of a numerical edge ``(src, f, dst)``."""
    if f == "EqualTo":
        return dst == src
    if f == "SmallerThan":
        return dst < src
    if f == "GreaterThan":
        return dst > src
    if f == "TwiceEqualTo":
        return dst == 2 * src
    if f == "ThreeTimesEqualTo":
        return dst == 3 * src
    if f == "TwiceGreaterThan":
        return dst > 2 * src
    if f == "ThreeTimesGreaterThan":
        return dst > 3 * src
    raise KeyError(f"unknown numerical relation {f!r}")


def canonical_value(x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise GraphFormatError(f"non-finite value {x!r}")
    # -0.0 and 0.0 must intern to the same node
    return x + 0.0


@dataclass(frozen=True)
class ValueNode:
    id: int
    value: float
    value_type: str


@dataclass(eq=False)
class KnowledgeGraph:
    """Immutable multi-relational graph with numerical attributes.

    Ids are dense indices into the vocabulary tuples. Relation edges are
    ``(head, rel, tail)``, attribute edges ``(entity, attr, value_id)`` and
    numerical edges ``(value_id, num_rel, value_id)`` where ``num_rel``
    indexes :data:`NUM_RELATIONS`.
    """

    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    attribute_names: tuple[str, ...]
    attribute_types: tuple[str, ...]
    values: tuple[tuple[float, str], ...]
    rel_edges: frozenset = frozenset()
    attr_edges: frozenset = frozenset()
    num_edges: frozenset = frozenset()
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.rel_edges = frozenset(self.rel_edges)
        self.attr_edges = frozenset(self.attr_edges)
        self.num_edges = frozenset(self.num_edges)
        if len(self.attribute_types) != len(self.attribute_names):
            raise GraphFormatError("every attribute needs exactly one value type")
        if len(set(self.values)) != len(self.values):
            raise GraphFormatError("duplicate (value, value_type) nodes")
        ne, nr, na, nv = len(self.entity_names), len(self.relation_names), len(self.attribute_names), len(self.values)
        for h, r, t in self.rel_edges:
            if not (0 <= h < ne and 0 <= t < ne and 0 <= r < nr):
                raise GraphFormatError(f"relation edge {(h, r, t)} out of range")
        for e, a, x in self.attr_edges:
            if not (0 <= e < ne and 0 <= a < na and 0 <= x < nv):
                raise GraphFormatError(f"attribute edge {(e, a, x)} out of range")
            if self.values[x][1] != self.attribute_types[a]:
                raise GraphFormatError(
                    f"attribute {self.attribute_names[a]!r} expects type {self.attribute_types[a]!r}, "
                    f"got value of type {self.values[x][1]!r}")
        for x, f, y in self.num_edges:
            if not (0 <= x < nv and 0 <= y < nv and 0 <= f < len(NUM_RELATIONS)):
                raise GraphFormatError(f"numerical edge {(x, f, y)} out of range")
            if self.values[x][1] != self.values[y][1]:
                raise GraphFormatError(f"numerical edge {(x, f, y)} joins different value types")

    # -- vocabulary -------------------------------------------------------

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_values(self) -> int:
        return len(self.values)

    @property
    def value_types(self) -> tuple[str, ...]:
        """Sorted registry of every value type used by attributes or values."""
        return tuple(sorted(set(self.attribute_types) | {t for _, t in self.values}))

    def value_node(self, i: int) -> ValueNode:
        v, t = self.values[i]
        return ValueNode(i, v, t)

    @property
    def vocab(self) -> dict:
        idx = self._lookup()
        return idx["vocab"]

    def entity_id(self, name: str) -> int:
        try:
            return self.vocab["entity"][name]
        except KeyError:
            raise KeyError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.vocab["relation"][name]
        except KeyError:
            raise KeyError(f"unknown relation {name!r}") from None

    def attribute_id(self, name: str) -> int:
        try:
            return self.vocab["attribute"][name]
        except KeyError:
            raise KeyError(f"unknown attribute {name!r}") from None

    def value_id(self, value: float, value_type: str) -> int:
        try:
            return self.vocab["value"][(canonical_value(value), value_type)]
        except KeyError:
            raise KeyError(f"unknown value {value!r}@{value_type}") from None

    # -- adjacency ----------------------------------------------------------

    def _lookup(self) -> dict:
        if self._index is not None:
            return self._index
        vocab = {
            "entity": {n: i for i, n in enumerate(self.entity_names)},
            "relation": {n: i for i, n in enumerate(self.relation_names)},
            "attribute": {n: i for i, n in enumerate(self.attribute_names)},
            "value": {v: i for i, v in enumerate(self.values)},
        }
        rel_fwd, rel_rev = defaultdict(set), defaultdict(set)
        attr_fwd, attr_rev = defaultdict(set), defaultdict(set)
        num_fwd, num_rev = defaultdict(set), defaultdict(set)
        for h, r, t in self.rel_edges:
            rel_fwd[h, r].add(t)
            rel_rev[t, r].add(h)
        for e, a, x in self.attr_edges:
            attr_fwd[e, a].add(x)
            attr_rev[x, a].add(e)
        for x, f, y in self.num_edges:
            num_fwd[x, f].add(y)
            num_rev[y, f].add(x)
        # in-edges for query grounding, keyed by ("e"|"v", id); sorted for determinism
        in_edges = defaultdict(list)
        for h, r, t in self.rel_edges:
            in_edges["e", t].append(("rp", r, "e", h))
        for e, a, x in self.attr_edges:
            in_edges["e", e].append(("rap", a, "v", x))
            in_edges["v", x].append(("ap", a, "e", e))
        for x, f, y in self.num_edges:
            in_edges["v", y].append(("np", f, "v", x))
        self._index = {
            "vocab": vocab,
            "rel_fwd": dict(rel_fwd), "rel_rev": dict(rel_rev),
            "attr_fwd": dict(attr_fwd), "attr_rev": dict(attr_rev),
            "num_fwd": dict(num_fwd), "num_rev": dict(num_rev),
            "in_edges": {k: tuple(sorted(v)) for k, v in in_edges.items()},
        }
        return self._index

    def tails(self, h: int, r: int) -> frozenset:
        return frozenset(self._lookup()["rel_fwd"].get((h, r), ()))

    def heads(self, t: int, r: int) -> frozenset:
        return frozenset(self._lookup()["rel_rev"].get((t, r), ()))

    def attr_values(self, e: int, a: int) -> frozenset:
        return frozenset(self._lookup()["attr_fwd"].get((e, a), ()))

    def attr_entities(self, x: int, a: int) -> frozenset:
        return frozenset(self._lookup()["attr_rev"].get((x, a), ()))

    def num_targets(self, x: int, f: int) -> frozenset:
        return frozenset(self._lookup()["num_fwd"].get((x, f), ()))

    def num_sources(self, y: int, f: int) -> frozenset:
        return frozenset(self._lookup()["num_rev"].get((y, f), ()))

    def in_edges(self, kind: str, node: int) -> tuple:
        """Edges ending at ``(kind, node)`` as ``(proj, label, src_kind, src)``."""
        return self._lookup()["in_edges"].get((kind, node), ())

    def active_entities(self) -> list[int]:
        """Entities touched by at least one edge, sorted."""
        idx = self._lookup()
        if "active_e" not in idx:
            ents = {h for h, _, _ in self.rel_edges} | {t for _, _, t in self.rel_edges}
            ents |= {e for e, _, _ in self.attr_edges}
            idx["active_e"] = sorted(ents)
        return list(idx["active_e"])

    def active_values(self) -> list[int]:
        idx = self._lookup()
        if "active_v" not in idx:
            vals = {x for _, _, x in self.attr_edges}
            vals |= {x for x, _, _ in self.num_edges} | {y for _, _, y in self.num_edges}
            idx["active_v"] = sorted(vals)
        return list(idx["active_v"])

    def values_of_type(self, value_type: str) -> list[int]:
        return [i for i, (_, t) in enumerate(self.values) if t == value_type]

    def with_edges(self, rel_edges=None, attr_edges=None, num_edges=None) -> "KnowledgeGraph":
        """Copy with some edge sets replaced; the vocabulary is shared."""
        return KnowledgeGraph(
            self.entity_names, self.relation_names, self.attribute_names,
            self.attribute_types, self.values,
            self.rel_edges if rel_edges is None else rel_edges,
            self.attr_edges if attr_edges is None else attr_edges,
            self.num_edges if num_edges is None else num_edges,
        )

    def stats(self) -> dict:
        return {
            "nodes": len(self.active_entities()) + len(self.active_values()),
            "relations": len(self.relation_names),
            "attributes": len(self.attribute_names),
            "rel_edges": len(self.rel_edges),
            "attr_edges": len(self.attr_edges),
            "num_edges": len(self.num_edges),
            "edges": len(self.rel_edges) + len(self.attr_edges) + len(self.num_edges),
        }

    # -- serialization --------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": FORMAT_TAG,
            "entities": list(self.entity_names),
            "relations": list(self.relation_names),
            "attributes": [[a, t] for a, t in zip(self.attribute_names, self.attribute_types)],
            "values": [[v, t] for v, t in self.values],
            "rel_edges": sorted(map(list, self.rel_edges)),
            "attr_edges": sorted(map(list, self.attr_edges)),
            "num_edges": sorted(map(list, self.num_edges)),
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "KnowledgeGraph":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_TAG:
            raise GraphFormatError(f"unsupported graph format {doc.get('format')!r}")
        return cls(
            tuple(doc["entities"]),
            tuple(doc["relations"]),
            tuple(a for a, _ in doc["attributes"]),
            tuple(t for _, t in doc["attributes"]),
            tuple((float(v), t) for v, t in doc["values"]),
            frozenset(map(tuple, doc["rel_edges"])),
            frozenset(map(tuple, doc["attr_edges"])),
            frozenset(map(tuple, doc["num_edges"])),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class SplitGraphs:
    train: KnowledgeGraph
    val: KnowledgeGraph
    test: KnowledgeGraph

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    def as_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


def _read_tsv(path: Path, ncols: int) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != ncols or any(not p for p in parts):
                raise GraphFormatError(f"{path}:{lineno}: expected {ncols} tab-separated fields")
            yield lineno, parts


def load_triples(rel_path, attr_path, type_map_path) -> KnowledgeGraph:
    """Read relation, attribute and attribute-type files into a graph.

    Values are interned by ``(value, value_type)``; duplicate lines collapse.
    """
    rel_path, attr_path, type_map_path = Path(rel_path), Path(attr_path), Path(type_map_path)
    for p in (rel_path, attr_path, type_map_path):
        if not p.exists():
            raise FileNotFoundError(str(p))

    type_map: dict[str, str] = {}
    for lineno, (attr, vtype) in _read_tsv(type_map_path, 2):
        if type_map.get(attr, vtype) != vtype:
            raise GraphFormatError(f"{type_map_path}:{lineno}: attribute {attr!r} has two value types")
        type_map[attr] = vtype

    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    attributes: dict[str, int] = {}
    values: dict[tuple[float, str], int] = {}

    def intern(table, key):
        if key not in table:
            table[key] = len(table)
        return table[key]

    rel_edges = set()
    for _, (h, r, t) in _read_tsv(rel_path, 3):
        rel_edges.add((intern(entities, h), intern(relations, r), intern(entities, t)))

    attr_edges = set()
    for lineno, (e, a, raw) in _read_tsv(attr_path, 3):
        try:
            x = canonical_value(float(raw))
        except (ValueError, GraphFormatError):
            raise GraphFormatError(f"{attr_path}:{lineno}: bad numeric literal {raw!r}") from None
        if a not in type_map:
            raise GraphFormatError(f"{attr_path}:{lineno}: no value type for attribute {a!r}")
        attr_edges.add((intern(entities, e), intern(attributes, a), intern(values, (x, type_map[a]))))

    attr_names = tuple(attributes)
    return KnowledgeGraph(
        tuple(entities), tuple(relations), attr_names,
        tuple(type_map[a] for a in attr_names), tuple(values),
        rel_edges, attr_edges, frozenset(),
    )


def write_triples(g: KnowledgeGraph, rel_path, attr_path, type_map_path) -> None:
    """Inverse of :func:`load_triples` for the relation and attribute edges (numerical edges are dropped)."""
    with open(rel_path, "w", encoding="utf-8") as fh:
        for h, r, t in sorted(g.rel_edges):
            fh.write(f"{g.entity_names[h]}\t{g.relation_names[r]}\t{g.entity_names[t]}\n")
    with open(attr_path, "w", encoding="utf-8") as fh:
        for e, a, x in sorted(g.attr_edges):
            fh.write(f"{g.entity_names[e]}\t{g.attribute_names[a]}\t{g.values[x][0]!r}\n")
    with open(type_map_path, "w", encoding="utf-8") as fh:
        for a, t in zip(g.attribute_names, g.attribute_types):
            fh.write(f"{a}\t{t}\n")


def _split_sizes(n: int, ratio) -> list[int]:
    """Largest-remainder apportionment of ``n`` items by ``ratio``."""
    total = sum(ratio)
    quotas = [n * r / total for r in ratio]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_edges(g: KnowledgeGraph, ratio=(8, 1, 1), seed: int = 0) -> SplitGraphs:
    """Partition every edge class by ``ratio`` and build cumulative graphs."""
    if not (g.rel_edges or g.attr_edges or g.num_edges):
        raise ValueError("cannot split an empty graph")
    rng = np.random.default_rng(seed)
    parts = {}
    for name in ("rel_edges", "attr_edges", "num_edges"):
        edges = sorted(getattr(g, name))
        perm = rng.permutation(len(edges))
        sizes = _split_sizes(len(edges), ratio)
        chunks, start = [], 0
        for s in sizes:
            chunks.append({edges[i] for i in perm[start:start + s]})
            start += s
        parts[name] = chunks

    def cumulative(k):
        return g.with_edges(**{name: frozenset().union(*chunks[: k + 1]) for name, chunks in parts.items()})

    return SplitGraphs(cumulative(0), cumulative(1), cumulative(2))


def augment_numerical_edges(g: KnowledgeGraph, cap_per_type: int = 4000, seed: int = 0) -> KnowledgeGraph:
    """Add sampled numerical edges between values of one type.

    For each relation, all ordered value pairs satisfying its predicate are
    enumerated and up to ``cap_per_type`` of them are drawn without
    replacement.
    """
    rng = np.random.default_rng(seed)
    by_type = defaultdict(list)
    for i, (v, t) in enumerate(g.values):
        by_type[t].append(i)
    new = set(g.num_edges)
    for f_id, f in enumerate(NUM_RELATIONS):
        pairs = []
        for t in sorted(by_type):
            ids = by_type[t]
            vals = np.array([g.values[i][0] for i in ids])
            src, dst = vals[:, None], vals[None, :]
            if f == "EqualTo":
                mask = dst == src
            elif f == "SmallerThan":
                mask = dst < src
            elif f == "GreaterThan":
                mask = dst > src
            elif f == "TwiceEqualTo":
                mask = dst == 2 * src
            elif f == "ThreeTimesEqualTo":
                mask = dst == 3 * src
            elif f == "TwiceGreaterThan":
                mask = dst > 2 * src
            else:
                mask = dst > 3 * src
            ii, jj = np.nonzero(mask)
            pairs.extend((ids[a], f_id, ids[b]) for a, b in zip(ii.tolist(), jj.tolist()))
        if len(pairs) > cap_per_type:
            pick = rng.choice(len(pairs), size=cap_per_type, replace=False)
            pairs = [pairs[i] for i in sorted(pick.tolist())]
        new.update(pairs)
    logger.info("numerical edges: %d -> %d", len(g.num_edges), len(new))
    return g.with_edges(num_edges=frozenset(new))


def make_synthetic_kg(n_entities: int, n_relations: int, n_attr_types: int, n_values: int,
                      density: float, seed: int, n_clusters: int = 8, structure: float = 0.8) -> KnowledgeGraph:
    """Deterministic random graph with latent cluster structure.

    Entities fall into ``n_clusters`` groups. A fraction ``structure`` of
    relation ``r``'s edges links cluster ``c`` to cluster
    ``(c + r + 1) mod n_clusters``; the rest are uniform noise, and the
    expected edge count per relation stays ``density * n_entities**2``.
    Attribute ``a`` takes value type ``type{a mod 3}`` (round robin over at
    most three types) and its values track the entity's cluster, so held-out
    edges are predictable from the rest of the graph.
    """
    if min(n_entities, n_relations, n_attr_types, n_values) <= 0:
        raise ValueError("all counts must be positive")
    rng = np.random.default_rng(seed)
    n_clusters = max(1, min(n_clusters, n_entities))
    cluster = np.arange(n_entities) % n_clusters
    rng.shuffle(cluster)

    n_types = min(3, n_attr_types)
    type_names = [f"type{i}" for i in range(n_types)]
    # values split round-robin over types; each type gets an integer grid
    values = []
    for i in range(n_values):
        t = i % n_types
        values.append((float(10 * (t + 1) + i // n_types), type_names[t]))
    by_type = defaultdict(list)
    for i, (_, t) in enumerate(values):
        by_type[t].append(i)

    rel_edges = set()
    if n_clusters > 1:
        frac_hi = 1.0 / n_clusters
        p_hi = min(1.0, structure * density / frac_hi)
        p_lo = max(0.0, (density - frac_hi * p_hi) / (1 - frac_hi))
    else:
        p_hi = p_lo = density
    for r in range(n_relations):
        target = (cluster + r + 1) % n_clusters
        prob = np.where(cluster[None, :] == target[:, None], p_hi, p_lo)
        hit = rng.random((n_entities, n_entities)) < prob
        for h, t in zip(*np.nonzero(hit)):
            rel_edges.add((int(h), r, int(t)))

    attr_names = [f"attr{a}" for a in range(n_attr_types)]
    attr_types = [type_names[a % n_types] for a in range(n_attr_types)]
    attr_edges = set()
    for a in range(n_attr_types):
        pool = by_type[attr_types[a]]
        rank = rng.permutation(n_clusters)
        spread = max(1.0, len(pool) / (8 * n_clusters))
        for e in range(n_entities):
            if rng.random() >= 0.5:
                continue
            # center on a cluster-dependent slice of the sorted value grid
            center = (rank[cluster[e]] + 0.5) * len(pool) / n_clusters
            j = int(np.clip(round(center + rng.normal(0, spread)), 0, len(pool) - 1))
            attr_edges.add((e, a, pool[j]))

    return KnowledgeGraph(
        tuple(f"ent{i}" for i in range(n_entities)),
        tuple(f"rel{r}" for r in range(n_relations)),
        tuple(attr_names), tuple(attr_types), tuple(values),
        rel_edges, attr_edges, frozenset(),
    )
