"""Manipulation-program DSL: concepts, typed AST, s-expressions, enumeration.

Grammar of the canonical s-expression form (one program per line in files)::

    program := step | "(" "program" step+ ")"
    step    := "(" "move" ACTION obj obj ")" | "(" "idle" ")"
    obj     := "(" "unique" set ")"
    set     := "(" "scene" ")"
             | "(" "filter" set (COLOR | TYPE) ")"
             | "(" "relate" obj RELATION ")"

Tokens are lowercase; whitespace between tokens is free.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

COLORS = ("red", "blue", "cyan", "green", "magenta", "yellow", "white")
SHAPES = ("cube", "lego", "dice")
RELATIONS = ("left", "right", "behind", "front")
ACTIONS = ("mov_left", "mov_right", "mov_front", "mov_behind", "mov_top")
OBJECT_CONCEPTS = COLORS + SHAPES


class ConceptClass(str, enum.Enum):
    COLOR = "Color"
    TYPE = "Type"
    REL = "RelCpt"
    ACT = "ActCpt"


_VOCAB = {
    ConceptClass.COLOR: COLORS,
    ConceptClass.TYPE: SHAPES,
    ConceptClass.REL: RELATIONS,
    ConceptClass.ACT: ACTIONS,
}
_CLASS_OF = {name: cls for cls, names in _VOCAB.items() for name in names}


def concept_class(name: str) -> ConceptClass:
    try:
        return _CLASS_OF[name]
    except KeyError:
        raise KeyError(f"unknown concept {name!r}") from None


@dataclass(frozen=True)
class Concept:
    cls: ConceptClass
    name: str

    def __post_init__(self):
        if self.name not in _VOCAB[ConceptClass(self.cls)]:
            raise ValueError(f"{self.name!r} is not a {ConceptClass(self.cls).value} concept")

    @classmethod
    def of(cls, name: str) -> "Concept":
        return cls(concept_class(name), name)


# -- AST ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneAll:
    pass


@dataclass(frozen=True)
class Filter:
    child: "Node"
    concept: str


@dataclass(frozen=True)
class Unique:
    child: "Node"


@dataclass(frozen=True)
class Relate:
    child: "Node"
    concept: str


@dataclass(frozen=True)
class Move:
    action: str
    subject: "Node"
    reference: "Node"


@dataclass(frozen=True)
class Idle:
    pass


Node = Union[SceneAll, Filter, Unique, Relate, Move, Idle]


@dataclass(frozen=True)
class ManipulationProgram:
    steps: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a manipulation program needs at least one step")
        for s in self.steps:
            if not isinstance(s, (Move, Idle)):
                raise TypeError(f"program steps must be Move or Idle, got {type(s).__name__}")

    def __len__(self) -> int:
        return len(self.steps)


# -- type checking ----------------------------------------------------------------------


class DslType(str, enum.Enum):
    OBJSET = "ObjSet"
    OBJ = "Obj"
    WORLD = "World"


class DslTypeError(TypeError):
    def __init__(self, message: str, node: Node):
        super().__init__(message)
        self.node = node


def typecheck(node: Node) -> DslType:
    """Return the node's type, raising :class:`DslTypeError` on a signature violation."""
    if isinstance(node, SceneAll):
        return DslType.OBJSET
    if isinstance(node, Filter):
        got = typecheck(node.child)
        if got is not DslType.OBJSET:
            raise DslTypeError(f"Filter expects ObjSet, got {got.value} in {to_sexpr(node)}", node)
        if _CLASS_OF.get(node.concept) not in (ConceptClass.COLOR, ConceptClass.TYPE):
            raise DslTypeError(f"Filter expects an object concept, got {node.concept!r}", node)
        return DslType.OBJSET
    if isinstance(node, Unique):
        got = typecheck(node.child)
        if got is not DslType.OBJSET:
            raise DslTypeError(f"Unique expects ObjSet, got {got.value} in {to_sexpr(node)}", node)
        return DslType.OBJ
    if isinstance(node, Relate):
        got = typecheck(node.child)
        if got is not DslType.OBJ:
            raise DslTypeError(f"Relate expects Obj, got {got.value} in {to_sexpr(node)}", node)
        if _CLASS_OF.get(node.concept) is not ConceptClass.REL:
            raise DslTypeError(f"Relate expects a relational concept, got {node.concept!r}", node)
        return DslType.OBJSET
    if isinstance(node, Move):
        if _CLASS_OF.get(node.action) is not ConceptClass.ACT:
            raise DslTypeError(f"Move expects an action concept, got {node.action!r}", node)
        for role, arg in (("subject", node.subject), ("reference", node.reference)):
            got = typecheck(arg)
            if got is not DslType.OBJ:
                raise DslTypeError(f"Move {role} expects Obj, got {got.value} in {to_sexpr(arg)}", node)
        return DslType.WORLD
    if isinstance(node, Idle):
        return DslType.WORLD
    if isinstance(node, ManipulationProgram):
        for s in node.steps:
            typecheck(s)
        return DslType.WORLD
    raise DslTypeError(f"not a DSL node: {node!r}", node)


def is_well_typed(node) -> bool:
    try:
        typecheck(node)
    except DslTypeError:
        return False
    return True


def depth(node: Node) -> int:
    """Node depth counting every operator, e.g. Move(Unique(Filter(Scene))) has depth 4."""
    if isinstance(node, (SceneAll, Idle)):
        return 1
    if isinstance(node, (Filter, Unique, Relate)):
        return 1 + depth(node.child)
    if isinstance(node, Move):
        return 1 + max(depth(node.subject), depth(node.reference))
    raise TypeError(f"not a DSL node: {node!r}")


def count_nodes(node: Node, kind: type) -> int:
    n = int(isinstance(node, kind))
    if isinstance(node, (Filter, Unique, Relate)):
        n += count_nodes(node.child, kind)
    elif isinstance(node, Move):
        n += count_nodes(node.subject, kind) + count_nodes(node.reference, kind)
    return n


def concept_names(node: Node) -> list[str]:
    """Every concept a program mentions, with repeats, in pre-order."""
    if isinstance(node, Move):
        return [node.action] + concept_names(node.subject) + concept_names(node.reference)
    if isinstance(node, (Filter, Relate)):
        return [node.concept] + concept_names(node.child)
    if isinstance(node, Unique):
        return concept_names(node.child)
    return []


# -- s-expressions ---------------------------------------------------------------------


def to_sexpr(node) -> str:
    if isinstance(node, ManipulationProgram):
        if len(node.steps) == 1:
            return to_sexpr(node.steps[0])
        return "(program " + " ".join(to_sexpr(s) for s in node.steps) + ")"
    if isinstance(node, SceneAll):
        return "(scene)"
    if isinstance(node, Filter):
        return f"(filter {to_sexpr(node.child)} {node.concept})"
    if isinstance(node, Unique):
        return f"(unique {to_sexpr(node.child)})"
    if isinstance(node, Relate):
        return f"(relate {to_sexpr(node.child)} {node.concept})"
    if isinstance(node, Move):
        return f"(move {node.action} {to_sexpr(node.subject)} {to_sexpr(node.reference)})"
    if isinstance(node, Idle):
        return "(idle)"
    raise TypeError(f"not a DSL node: {node!r}")


class SexprError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


_TOKEN_RE = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise SexprError("unexpected character", pos)
        for g in (1, 2, 3):
            if m.group(g) is not None:
                out.append((m.group(g), m.start(g)))
        pos = m.end()
    return out


def _read_tree(tokens: list[tuple[str, int]], i: int):
    tok, off = tokens[i]
    if tok == ")":
        raise SexprError("unexpected ')'", off)
    if tok != "(":
        return (tok, off), i + 1
    items = []
    i += 1
    while True:
        if i >= len(tokens):
            raise SexprError("unclosed '('", off)
        if tokens[i][0] == ")":
            return (items, off), i + 1
        item, i = _read_tree(tokens, i)
        items.append(item)


_ARITY = {"scene": 0, "idle": 0, "unique": 1, "filter": 2, "relate": 2, "move": 3}


def _build(tree) -> Node:
    body, off = tree
    if isinstance(body, str):
        raise SexprError(f"expected a parenthesized form, got atom {body!r}", off)
    if not body:
        raise SexprError("empty form", off)
    head, head_off = body[0]
    if not isinstance(head, str):
        raise SexprError("form head must be an operator name", head_off)
    args = body[1:]
    if head not in _ARITY:
        raise SexprError(f"unknown operator {head!r}", head_off)
    if len(args) != _ARITY[head]:
        raise SexprError(f"arity error: {head} expects {_ARITY[head]} arguments, got {len(args)}", head_off)

    def atom(item, cls: tuple[ConceptClass, ...]):
        val, aoff = item
        if not isinstance(val, str):
            raise SexprError("expected a concept name", aoff)
        if _CLASS_OF.get(val) not in cls:
            names = "/".join(c.value for c in cls)
            raise SexprError(f"expected {names} concept, got {val!r}", aoff)
        return val

    if head == "scene":
        return SceneAll()
    if head == "idle":
        return Idle()
    if head == "unique":
        return Unique(_build(args[0]))
    if head == "filter":
        return Filter(_build(args[0]), atom(args[1], (ConceptClass.COLOR, ConceptClass.TYPE)))
    if head == "relate":
        return Relate(_build(args[0]), atom(args[1], (ConceptClass.REL,)))
    return Move(atom(args[0], (ConceptClass.ACT,)), _build(args[1]), _build(args[2]))


def from_sexpr(text: str) -> Node:
    """Parse one node.  Raises :class:`SexprError` with a character offset."""
    tokens = _tokenize(text.lower())
    if not tokens:
        raise SexprError("empty input", 0)
    tree, end = _read_tree(tokens, 0)
    if end != len(tokens):
        raise SexprError("trailing input", tokens[end][1])
    return _build(tree)


def program_from_sexpr(text: str) -> ManipulationProgram:
    tokens = _tokenize(text.lower())
    if not tokens:
        raise SexprError("empty input", 0)
    tree, end = _read_tree(tokens, 0)
    if end != len(tokens):
        raise SexprError("trailing input", tokens[end][1])
    body, off = tree
    if isinstance(body, list) and body and body[0][0] == "program":
        if len(body) < 2:
            raise SexprError("program needs at least one step", off)
        steps = [_build(item) for item in body[1:]]
    else:
        steps = [_build(tree)]
    for s in steps:
        if not isinstance(s, (Move, Idle)):
            raise SexprError("program steps must be move or idle forms", off)
    return ManipulationProgram(steps)


def compose(programs: Sequence) -> ManipulationProgram:
    """Concatenate the steps of several programs (or bare steps) in order."""
    if not programs:
        raise ValueError("compose needs at least one program")
    steps: list = []
    for p in programs:
        typecheck(p)
        steps.extend(p.steps if isinstance(p, ManipulationProgram) else [p])
    return ManipulationProgram(steps)


# -- enumeration -----------------------------------------------------------------------


@dataclass(frozen=True)
class Lexicon:
    """The concept names a program may mention."""

    colors: tuple = COLORS
    shapes: tuple = SHAPES
    relations: tuple = RELATIONS
    actions: tuple = ACTIONS

    @classmethod
    def of(cls, names) -> "Lexicon":
        names = set(names)
        return cls(
            tuple(c for c in COLORS if c in names),
            tuple(s for s in SHAPES if s in names),
            tuple(r for r in RELATIONS if r in names),
            tuple(a for a in ACTIONS if a in names),
        )


FULL_LEXICON = Lexicon()


def filter_chains(lexicon: Lexicon, budget: int, allow_empty: bool) -> list[tuple[str, ...]]:
    """Canonical filter chains: at most one color then at most one shape.

    Filters combine by pointwise min, which is commutative and idempotent, so
    other orders or repeats denote the same set.
    """
    chains: list[tuple[str, ...]] = [()] if allow_empty else []
    if budget >= 1:
        chains += [(c,) for c in lexicon.colors] + [(s,) for s in lexicon.shapes]
    if budget >= 2:
        chains += [(c, s) for c in lexicon.colors for s in lexicon.shapes]
    return chains


def apply_chain(base: Node, chain: Sequence[str]) -> Node:
    for c in chain:
        base = Filter(base, c)
    return base


def enumerate_objects(lexicon: Lexicon, max_filters: int) -> list[Node]:
    """All Obj-typed arguments with at most ``max_filters`` filters and one relate."""
    if max_filters < 1:
        raise ValueError("max_filters must be >= 1")
    forms = [Unique(apply_chain(SceneAll(), ch)) for ch in filter_chains(lexicon, max_filters, False)]
    for inner in filter_chains(lexicon, max_filters, False):
        anchor = Unique(apply_chain(SceneAll(), inner))
        for r in lexicon.relations:
            for outer in filter_chains(lexicon, max_filters - len(inner), True):
                forms.append(Unique(apply_chain(Relate(anchor, r), outer)))
    return forms


def enumerate_programs(lexicon: Lexicon = FULL_LEXICON, max_filters: int = 2, max_depth: int | None = None) -> Iterator[Move]:
    """Single-step Move programs in a fixed order, optionally depth-limited."""
    forms = enumerate_objects(lexicon, max_filters)
    if max_depth is not None:
        forms = [f for f in forms if depth(f) + 1 <= max_depth]
    for a in lexicon.actions:
        for s in forms:
            for r in forms:
                yield Move(a, s, r)

