"""S-expression query language and phase-typed computation graphs.

Grammar::

    expr := "(" head ("," expr)+ ")" | leaf
    head := ("rp" | "ap" | "rap" | "np") "#" ident | "i" | "u"
    leaf := "(" ("e" "#" ident | "nv" "#" number "@" ident) ")"

Whitespace is insignificant. Example: ``(rap#lat, (np#GreaterThan, (nv#40.0@Degree)))``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .kg import NUM_RELATIONS

ENTITY = "Entity"
NUMERIC = "Numeric"

PROJECTIONS = {
    # op: (input phase, output phase)
    "rp": (ENTITY, ENTITY),
    "ap": (ENTITY, NUMERIC),
    "rap": (NUMERIC, ENTITY),
    "np": (NUMERIC, NUMERIC),
}
LOGIC_ARITY = {"i": (2, 3), "u": (2, 2)}

GENERAL_TYPES = {
    "(p,(e))": "1p",
    "(p,(p,(e)))": "2p",
    "(i,(p,(e)),(p,(e)))": "2i",
    "(i,(p,(e)),(p,(e)),(p,(e)))": "3i",
    "(p,(i,(p,(e)),(p,(e))))": "ip",
    "(i,(p,(e)),(p,(p,(e))))": "pi",
    "(u,(p,(e)),(p,(e)))": "2u",
    "(p,(u,(p,(e)),(p,(e))))": "up",
}
SHAPES = {abbr: shape for shape, abbr in GENERAL_TYPES.items()}
GENERAL_TYPE_NAMES = tuple(GENERAL_TYPES.values())


class QueryError(ValueError):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, msg, pos):
        super().__init__(f"{msg} at position {pos}")
        self.pos = pos


class PhaseError(QueryError):
    pass


class UnknownSymbolError(QueryError):
    pass


@dataclass(frozen=True)
class Node:
    """One computation-graph node; construction validates phase typing."""

    op: str
    label: str | None = None
    value: float | None = None
    vtype: str | None = None
    children: tuple = ()
    phase: str = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(self, "phase", infer_phase(self))

    @property
    def is_anchor(self) -> bool:
        return self.op in ("e", "nv")

    def walk(self):
        """Post-order traversal."""
        for c in self.children:
            yield from c.walk()
        yield self

    def __str__(self):
        return serialize(self)


def infer_phase(node: Node) -> str:
    """Phase of ``node`` from its children's stored phases; raises PhaseError."""
    op, kids = node.op, node.children
    if op == "e":
        if kids or not node.label:
            raise QueryError("entity anchor takes an identifier and no children")
        return ENTITY
    if op == "nv":
        if kids or node.value is None or not node.vtype:
            raise QueryError("value anchor takes number@type and no children")
        if not math.isfinite(node.value):
            raise QueryError(f"anchor value {node.value!r} is not finite")
        return NUMERIC
    if op in PROJECTIONS:
        if len(kids) != 1:
            raise QueryError(f"{op} takes exactly one child, got {len(kids)}")
        if not node.label:
            raise QueryError(f"{op} needs an edge label")
        want, out = PROJECTIONS[op]
        if kids[0].phase != want:
            raise PhaseError(f"{op}#{node.label} needs a {want} child, got {kids[0].phase}")
        if op == "np" and node.label not in NUM_RELATIONS:
            raise UnknownSymbolError(f"unknown numerical relation {node.label!r}")
        return out
    if op in LOGIC_ARITY:
        lo, hi = LOGIC_ARITY[op]
        if not lo <= len(kids) <= hi:
            raise QueryError(f"{op} takes {lo}..{hi} children, got {len(kids)}")
        phases = {k.phase for k in kids}
        if len(phases) != 1:
            raise PhaseError(f"{op} children mix phases {sorted(phases)}")
        return phases.pop()
    raise QueryError(f"unknown operation {op!r}")


# -- parsing ---------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:([(),#@])|([^\s(),#@]+))")


def _tokenize(text: str):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            if text[pos:].strip() == "":
                break
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        start = m.start(1) if m.group(1) else m.start(2)
        out.append((m.group(1) or m.group(2), start))
        pos = m.end()
    out.append(("", len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, expected=None):
        tok, pos = self.toks[self.i]
        if expected is not None and tok != expected:
            raise QuerySyntaxError(f"expected {expected!r}, found {tok or 'end of input'!r}", pos)
        self.i += 1
        return tok, pos

    def ident(self, what):
        tok, pos = self.take()
        if tok in ("", "(", ")", ",", "#", "@"):
            raise QuerySyntaxError(f"expected {what}, found {tok or 'end of input'!r}", pos)
        return tok

    def expr(self) -> Node:
        self.take("(")
        head, pos = self.take()
        if head == "e":
            self.take("#")
            node = Node("e", label=self.ident("entity identifier"))
            self.take(")")
            return node
        if head == "nv":
            self.take("#")
            num_pos = self.peek()[1]
            raw = self.ident("number")
            try:
                value = float(raw)
            except ValueError:
                raise QuerySyntaxError(f"bad number {raw!r}", num_pos) from None
            if not math.isfinite(value):
                raise QuerySyntaxError(f"non-finite number {raw!r}", num_pos)
            self.take("@")
            node = Node("nv", value=value + 0.0, vtype=self.ident("value type"))
            self.take(")")
            return node
        if head in PROJECTIONS:
            self.take("#")
            label = self.ident("edge label")
        elif head in LOGIC_ARITY:
            label = None
        else:
            raise QuerySyntaxError(f"unknown head {head or 'end of input'!r}", pos)
        kids = []
        while self.peek()[0] == ",":
            self.take(",")
            kids.append(self.expr())
        self.take(")")
        if not kids:
            raise QuerySyntaxError(f"{head} needs at least one argument", pos)
        return Node(head, label=label, children=tuple(kids))


def parse(text: str, kg=None) -> Node:
    """Parse query text into a validated computation graph.

    With ``kg`` given, every identifier is resolved against its vocabulary
    and value types are checked along attribute and numerical edges.
    """
    p = _Parser(text)
    node = p.expr()
    tok, pos = p.peek()
    if tok != "":
        raise QuerySyntaxError(f"trailing input {tok!r}", pos)
    if kg is not None:
        check_symbols(node, kg)
    return node


def value_type_of(node: Node, kg) -> str | None:
    """Value type carried by a numeric-phase node (None for entity phase)."""
    if node.phase != NUMERIC:
        return None
    if node.op == "nv":
        return node.vtype
    if node.op == "ap":
        return kg.attribute_types[kg.attribute_id(node.label)]
    return value_type_of(node.children[0], kg)


def check_symbols(node: Node, kg) -> None:
    for n in node.walk():
        try:
            if n.op == "e":
                kg.entity_id(n.label)
            elif n.op == "rp":
                kg.relation_id(n.label)
            elif n.op in ("ap", "rap"):
                kg.attribute_id(n.label)
        except KeyError as exc:
            raise UnknownSymbolError(exc.args[0]) from None
        if n.op == "nv" and n.vtype not in kg.value_types:
            raise UnknownSymbolError(f"unknown value type {n.vtype!r}")
        if n.op == "rap":
            want = kg.attribute_types[kg.attribute_id(n.label)]
            got = value_type_of(n.children[0], kg)
            if got != want:
                raise PhaseError(f"rap#{n.label} expects values of type {want}, got {got}")
        if n.op in ("i", "u") and n.phase == NUMERIC:
            types = {value_type_of(c, kg) for c in n.children}
            if len(types) != 1:
                raise PhaseError(f"{n.op} mixes value types {sorted(types)}")


# -- serialization -----------------------------------------------------------

def _fmt_number(x: float) -> str:
    return repr(float(x))


def serialize(node: Node) -> str:
    if node.op == "e":
        return f"(e#{node.label})"
    if node.op == "nv":
        return f"(nv#{_fmt_number(node.value)}@{node.vtype})"
    head = f"{node.op}#{node.label}" if node.op in PROJECTIONS else node.op
    return "(" + ", ".join([head] + [serialize(c) for c in node.children]) + ")"


def skeleton(node: Node, generic: bool = False) -> str:
    """Structure string without labels.

    ``generic=True`` erases projection kinds to ``p`` and anchors to ``e``,
    giving the general-type shape; otherwise the specific type, e.g.
    ``(rap,(np,(nv)))``.
    """
    if node.is_anchor:
        return "(e)" if generic else f"({node.op})"
    head = "p" if generic and node.op in PROJECTIONS else node.op
    return "(" + ",".join([head] + [skeleton(c, generic) for c in node.children]) + ")"


def general_type_of(node: Node) -> str:
    shape = skeleton(node, generic=True)
    try:
        return GENERAL_TYPES[shape]
    except KeyError:
        raise QueryError(f"shape {shape} is not one of the eight general query types") from None
