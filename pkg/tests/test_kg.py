import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from numcqa.kg import (NUM_RELATIONS, GraphFormatError, KnowledgeGraph, _split_sizes, augment_numerical_edges,
                       load_triples, make_synthetic_kg, num_relation_holds, split_edges, write_triples)


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _files(tmp_path, rel, attr, types):
    return (_write(tmp_path / "rel.tsv", rel), _write(tmp_path / "attr.tsv", attr),
            _write(tmp_path / "types.tsv", types))


def test_load_counts(tmp_path):
    g = load_triples(*_files(tmp_path, ["a\tr\tb", "b\tr\tc"], ["a\tlat\t1.5"], ["lat\tDegree"]))
    assert len(g.rel_edges) == 2 and len(g.attr_edges) == 1
    assert g.values == ((1.5, "Degree"),)


def test_empty_attribute_file(tmp_path):
    g = load_triples(*_files(tmp_path, ["a\tr\tb"], [], ["lat\tDegree"]))
    assert g.n_values == 0 and not g.num_edges
    assert not augment_numerical_edges(g).num_edges


def test_duplicate_lines_match_line_dedup(tmp_path):
    rng = np.random.default_rng(0)
    rel = [f"e{rng.integers(6)}\tr{rng.integers(2)}\te{rng.integers(6)}" for _ in range(60)]
    attr = [f"e{rng.integers(6)}\ta{rng.integers(2)}\t{rng.integers(4)}.0" for _ in range(30)]
    g = load_triples(*_files(tmp_path, rel, attr, ["a0\tYear", "a1\tYear"]))
    # independent count: distinct raw lines
    assert len(g.rel_edges) == len(set(rel))
    assert len(g.attr_edges) == len(set(attr))


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(GraphFormatError, match=r"rel.tsv:2"):
        load_triples(*_files(tmp_path, ["a\tr\tb", "oops"], [], ["lat\tDegree"]))
    with pytest.raises(GraphFormatError, match=r"attr.tsv:1.*bad numeric"):
        load_triples(*_files(tmp_path, ["a\tr\tb"], ["a\tlat\tnorth"], ["lat\tDegree"]))


def test_unknown_value_type_names_attribute(tmp_path):
    with pytest.raises(GraphFormatError, match="'height'"):
        load_triples(*_files(tmp_path, ["a\tr\tb"], ["a\theight\t3"], ["lat\tDegree"]))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_triples(tmp_path / "nope.tsv", tmp_path / "a", tmp_path / "b")


def test_same_number_two_types_are_two_nodes(tmp_path):
    g = load_triples(*_files(tmp_path, ["a\tr\tb"], ["a\tx\t5", "a\ty\t5"], ["x\tYear", "y\tDegree"]))
    assert set(g.values) == {(5.0, "Year"), (5.0, "Degree")}


@pytest.mark.parametrize("n,expected", [(100, [80, 10, 10]), (101, [81, 10, 10]), (0, [0, 0, 0]),
                                        (9, [7, 1, 1]), (1, [1, 0, 0])])
def test_largest_remainder(n, expected):
    # 101: quotas 80.8/10.1/10.1 -> floors 80/10/10, leftover 1 to the largest remainder (0.8)
    assert _split_sizes(n, (8, 1, 1)) == expected


def test_split_sizes_and_cumulative(small_kg):
    sp = split_edges(small_kg, seed=5)
    for name in ("rel_edges", "attr_edges", "num_edges"):
        tr, va, te = (getattr(g, name) for g in sp)
        assert tr <= va <= te == getattr(small_kg, name)
        sizes = [len(tr), len(va - tr), len(te - va)]
        assert sizes == _split_sizes(len(te), (8, 1, 1))


def test_split_deterministic(small_kg):
    a = split_edges(small_kg, seed=9)
    b = split_edges(small_kg, seed=9)
    assert all(x.to_json() == y.to_json() for x, y in zip(a, b))
    c = split_edges(small_kg, seed=10)
    assert a.train.to_json() != c.train.to_json()


def test_split_empty_graph_rejected():
    g = KnowledgeGraph(("a",), (), (), (), (), frozenset(), frozenset(), frozenset())
    with pytest.raises(ValueError):
        split_edges(g)


def _values_graph(vals, vtype="T"):
    values = tuple((float(v), vtype) for v in vals)
    return KnowledgeGraph(("e",), (), ("a",), (vtype,), values, frozenset(), frozenset(), frozenset())


def test_augment_two_values():
    g = augment_numerical_edges(_values_graph([1, 2]))
    named = {(g.values[a][0], NUM_RELATIONS[f], g.values[b][0]) for a, f, b in g.num_edges}
    assert (1.0, "GreaterThan", 2.0) in named
    assert (1.0, "TwiceEqualTo", 2.0) in named
    assert [e for e in named if e[1] == "GreaterThan"] == [(1.0, "GreaterThan", 2.0)]
    # self pairs for EqualTo
    assert {e for e in named if e[1] == "EqualTo"} == {(1.0, "EqualTo", 1.0), (2.0, "EqualTo", 2.0)}


def test_augment_single_value_smaller_than():
    g = augment_numerical_edges(_values_graph([5]))
    assert not [e for e in g.num_edges if NUM_RELATIONS[e[1]] == "SmallerThan"]


def test_augment_matches_pair_enumeration():
    vals = [1, 2, 3, 4, 6, 9, 12, 12.5]
    g = augment_numerical_edges(_values_graph(vals), cap_per_type=10**6)
    got = {(g.values[a][0], NUM_RELATIONS[f], g.values[b][0]) for a, f, b in g.num_edges}
    want = set()
    for x, y in itertools.product(vals, vals):
        want.update((float(x), f, float(y)) for f in NUM_RELATIONS if num_relation_holds(f, x, y))
    assert got == want


def test_augment_cap_and_types():
    g = make_synthetic_kg(30, 2, 3, 60, 0.05, 0)
    aug = augment_numerical_edges(g, cap_per_type=25, seed=1)
    per = np.bincount([f for _, f, _ in aug.num_edges], minlength=7)
    assert per.max() <= 25
    for a, f, b in aug.num_edges:
        assert aug.values[a][1] == aug.values[b][1]
        assert num_relation_holds(NUM_RELATIONS[f], aug.values[a][0], aug.values[b][0])
    assert augment_numerical_edges(g, 25, 1).to_json() == aug.to_json()


def test_synthetic_determinism():
    a = make_synthetic_kg(10, 2, 1, 5, 0.3, 7)
    assert a.to_json() == make_synthetic_kg(10, 2, 1, 5, 0.3, 7).to_json()


def test_synthetic_zero_density():
    assert not make_synthetic_kg(20, 2, 1, 5, 0.0, 0).rel_edges


def test_synthetic_edge_counts_binomial():
    g = make_synthetic_kg(200, 5, 3, 100, 0.05, 1)
    counts = np.bincount([r for _, r, _ in g.rel_edges], minlength=5)
    expected = 0.05 * 200 ** 2
    assert np.all(np.abs(counts - expected) <= 0.1 * expected), counts


def test_synthetic_value_types_round_robin():
    g = make_synthetic_kg(10, 1, 4, 9, 0.1, 0)
    assert g.attribute_types == ("type0", "type1", "type2", "type0")


def test_json_roundtrip_and_field_order(small_kg):
    text = small_kg.to_json()
    assert KnowledgeGraph.from_json(text).to_json() == text
    keys = list(json.loads(text))
    assert keys == ["format", "entities", "relations", "attributes", "values", "rel_edges", "attr_edges",
                    "num_edges"]


def test_write_then_load_triples(tmp_path, small_kg):
    paths = tmp_path / "r.tsv", tmp_path / "a.tsv", tmp_path / "t.tsv"
    write_triples(small_kg, *paths)
    g = load_triples(*paths)
    name = lambda kg, edges: {(kg.entity_names[h], kg.relation_names[r], kg.entity_names[t])  # noqa: E731
                              for h, r, t in edges}
    assert name(g, g.rel_edges) == name(small_kg, small_kg.rel_edges)
    assert len(g.attr_edges) == len(small_kg.attr_edges)


def test_reverse_indices_are_exact_inverses(small_kg):
    g = small_kg
    for (h, r, t) in g.rel_edges:
        assert t in g.tails(h, r) and h in g.heads(t, r)
    for t in range(g.n_entities):
        for r in range(len(g.relation_names)):
            assert g.heads(t, r) == {u for u, rr, v in g.rel_edges if rr == r and v == t}
    for y in range(g.n_values):
        for f in range(7):
            assert g.num_sources(y, f) == {x for x, ff, yy in g.num_edges if ff == f and yy == y}
    for x in range(g.n_values):
        for a in range(len(g.attribute_names)):
            assert g.attr_entities(x, a) == {e for e, aa, v in g.attr_edges if aa == a and v == x}


def test_num_edges_must_share_type():
    values = ((1.0, "A"), (2.0, "B"))
    with pytest.raises(ValueError):
        KnowledgeGraph(("e",), (), ("a", "b"), ("A", "B"), values, frozenset(), frozenset(),
                       frozenset({(0, 2, 1)}))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=12, unique=True), st.integers(0, 2**16))
def test_augmented_edges_satisfy_predicates(vals, seed):
    g = augment_numerical_edges(_values_graph(vals), cap_per_type=7, seed=seed)
    for a, f, b in g.num_edges:
        assert num_relation_holds(NUM_RELATIONS[f], g.values[a][0], g.values[b][0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16))
def test_split_cumulative_property(seed):
    g = make_synthetic_kg(15, 2, 2, 8, 0.1, seed % 50)
    g = augment_numerical_edges(g, 20, seed)
    if not (g.rel_edges or g.attr_edges or g.num_edges):
        return
    tr, va, te = split_edges(g, seed=seed)
    assert tr.rel_edges <= va.rel_edges <= te.rel_edges
    assert tr.attr_edges <= va.attr_edges <= te.attr_edges
    assert tr.num_edges <= va.num_edges <= te.num_edges
