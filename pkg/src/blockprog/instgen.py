"""Templated instruction language and dataset generation.

The lexer maps multi-word surface phrases to DSL concepts by greedy
longest match.  Relational phrases ("left of", "behind") and placement
phrases ("to the left of", "on top of") use disjoint surfaces so every
keyword names exactly one concept.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import blocksworld as bw
from .mpdsl import (
    ACTIONS,
    COLORS,
    RELATIONS,
    SHAPES,
    Concept,
    ConceptClass,
    Filter,
    ManipulationProgram,
    Move,
    Relate,
    SceneAll,
    Unique,
    apply_chain,
    compose,
    program_from_sexpr,
    to_sexpr,
)

ACTION_SURFACES = {
    "mov_top": ("on top of", "onto", "on"),
    "mov_right": ("to the right of", "to right of"),
    "mov_left": ("to the left of", "to left of"),
    "mov_front": ("to the front of",),
    "mov_behind": ("to the back of", "to the rear of"),
}
RELATION_SURFACES = {
    "left": ("left of",),
    "right": ("right of",),
    "behind": ("behind",),
    "front": ("in front of",),
}
NOUNS = ("block", "object", "thing")
VERBS = ("put", "place", "move")
CONNECTIVES = ("then", "and then", ", then")
STRUCTURAL_WORDS = ("then", "and", ",")

KEYWORDS: dict[tuple[str, ...], Concept] = {}
for _c in COLORS + SHAPES:
    KEYWORDS[(_c,)] = Concept.of(_c)
for _name, _surfs in list(ACTION_SURFACES.items()) + list(RELATION_SURFACES.items()):
    for _s in _surfs:
        KEYWORDS[tuple(_s.split())] = Concept.of(_name)
_MAX_PHRASE = max(len(k) for k in KEYWORDS)


@dataclass(frozen=True)
class Token:
    surface: str
    kind: str  # "keyword" | "structural" | "noise"
    concept: Concept | None = None
    start: int = 0

    @property
    def key(self) -> str:
        """Vocabulary key: the concept name for keywords, the lowercased word otherwise."""
        return self.concept.name if self.concept is not None else self.surface.lower()


_WORD_RE = re.compile(r",|[^\s,]+")


def lex(instruction: str) -> list[Token]:
    """Split into words and tag keyword phrases with their concepts."""
    words = [(m.group(0), m.start()) for m in _WORD_RE.finditer(instruction)]
    low = [w.lower() for w, _ in words]
    out: list[Token] = []
    i = 0
    while i < len(words):
        for n in range(min(_MAX_PHRASE, len(words) - i), 0, -1):
            concept = KEYWORDS.get(tuple(low[i : i + n]))
            if concept is not None:
                surface = instruction[words[i][1] : words[i + n - 1][1] + len(words[i + n - 1][0])]
                out.append(Token(surface, "keyword", concept, words[i][1]))
                i += n
                break
        else:
            kind = "structural" if low[i] in STRUCTURAL_WORDS else "noise"
            out.append(Token(words[i][0], kind, None, words[i][1]))
            i += 1
    return out


# -- oracle parser -------------------------------------------------------------------------


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def split_connectives(tokens: Sequence[Token]) -> list[list[Token]]:
    """Cut a token list at "then" (absorbing a preceding "and" or ",")."""
    segments: list[list[Token]] = [[]]
    for tok in tokens:
        if tok.kind == "structural" and tok.surface.lower() == "then":
            cur = segments[-1]
            if cur and cur[-1].kind == "structural" and cur[-1].surface.lower() in ("and", ","):
                cur.pop()
            segments.append([])
        else:
            segments[-1].append(tok)
    return segments


class _Cursor:
    def __init__(self, tokens: Sequence[Token], end_offset: int):
        self.toks = list(tokens)
        self.i = 0
        self.end_offset = end_offset

    def peek(self) -> Token | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def offset(self) -> int:
        tok = self.peek()
        return tok.start if tok is not None else self.end_offset

    def take_word(self, *words: str) -> Token | None:
        tok = self.peek()
        if tok is not None and tok.concept is None and tok.surface.lower() in words:
            self.i += 1
            return tok
        return None

    def take_concept(self, cls: ConceptClass) -> Token | None:
        tok = self.peek()
        if tok is not None and tok.concept is not None and tok.concept.cls == cls:
            self.i += 1
            return tok
        return None


def _parse_desc(cur: _Cursor, allow_relation: bool = True):
    if cur.take_word("the", "a") is None:
        raise ParseError("expected 'the'", cur.offset())
    chain = []
    color = cur.take_concept(ConceptClass.COLOR)
    if color is not None:
        chain.append(color.concept.name)
    shape = cur.take_concept(ConceptClass.TYPE)
    if shape is not None:
        chain.append(shape.concept.name)
    noun = cur.take_word(*NOUNS)
    if not chain and noun is None:
        raise ParseError("expected an object description", cur.offset())
    base = SceneAll()
    if allow_relation and cur.take_word("which", "that") is not None:
        if cur.take_word("is") is None:
            raise ParseError("expected 'is'", cur.offset())
        rel = cur.take_concept(ConceptClass.REL)
        if rel is None:
            raise ParseError("expected a relation", cur.offset())
        anchor = _parse_desc(cur, allow_relation=False)
        base = Relate(anchor, rel.concept.name)
    return Unique(apply_chain(base, chain))


def _parse_step(tokens: Sequence[Token], end_offset: int) -> Move:
    cur = _Cursor(tokens, end_offset)
    if cur.take_word(*VERBS) is None:
        raise ParseError("expected a verb", cur.offset())
    subject = _parse_desc(cur)
    act = cur.take_concept(ConceptClass.ACT)
    if act is None:
        raise ParseError("expected a placement phrase", cur.offset())
    reference = _parse_desc(cur)
    if cur.peek() is not None:
        raise ParseError(f"unexpected {cur.peek().surface!r}", cur.offset())
    return Move(act.concept.name, subject, reference)


def oracle_parse(instruction: str) -> ManipulationProgram:
    """Deterministic grammar parse of a template instruction."""
    tokens = lex(instruction)
    if not tokens:
        raise ParseError("empty instruction", 0)
    steps = []
    segments = split_connectives(tokens)
    for k, seg in enumerate(segments):
        nxt = segments[k + 1] if k + 1 < len(segments) else None
        end = nxt[0].start if nxt else len(instruction)
        if not seg:
            raise ParseError("empty sub-instruction", end)
        steps.append(_parse_step(seg, end))
    return ManipulationProgram(steps)


# -- set semantics on ground-truth attributes -------------------------------------------


def denote(node, scene: bw.Scene) -> set[int] | int:
    """Set (for ObjSet nodes) or id (for Obj nodes) under gold attributes and relations.

    Unique of a non-singleton set raises :class:`NotUnique`.
    """
    if isinstance(node, SceneAll):
        return set(scene.ids)
    if isinstance(node, Filter):
        inner = denote(node.child, scene)
        cls = Concept.of(node.concept).cls
        attr = "color" if cls == ConceptClass.COLOR else "shape"
        return {i for i in inner if getattr(scene.by_id(i), attr) == node.concept}
    if isinstance(node, Unique):
        inner = denote(node.child, scene)
        if len(inner) != 1:
            raise NotUnique(node, inner)
        return next(iter(inner))
    if isinstance(node, Relate):
        anchor = denote(node.child, scene)
        aloc = scene.by_id(anchor).loc
        return {o.id for o in scene.objects if o.id != anchor and bw.gold_relation(node.concept, o.loc, aloc)}
    raise TypeError(f"cannot denote {node!r}")


class NotUnique(ValueError):
    def __init__(self, node, members):
        super().__init__(f"{to_sexpr(node)} denotes {sorted(members)}")
        self.members = members


def all_unique(node, scene: bw.Scene) -> bool:
    """Whether every Unique inside ``node`` (a Move or Obj node) denotes exactly one object."""
    try:
        if isinstance(node, Move):
            denote(node.subject, scene)
            denote(node.reference, scene)
        else:
            denote(node, scene)
    except NotUnique:
        return False
    return True


def execute_gold(program: ManipulationProgram, scene: bw.Scene, margin: float = 0.02):
    """Run a program with gold grounding and gold action geometry.

    Returns the final world and the per-step ``(subject, reference, action)`` grounding.
    """
    cur = scene
    grounding = []
    for step in program.steps:
        if not isinstance(step, Move):
            continue
        s = denote(step.subject, cur)
        r = denote(step.reference, cur)
        world = cur.world()
        world[s] = bw.apply_gold_action(step.action, world[s], world[r], margin)
        grounding.append((s, r, step.action))
        cur = cur.with_world(world)
    return cur.world(), grounding


# -- dataset generation ------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    n_objects: tuple = (3, 5)
    n_steps: tuple = (1, 2)
    complex_fraction: float = 0.5
    step_weights: tuple = (0.6, 0.4)
    scene: bw.SceneConfig = field(default_factory=bw.SceneConfig)
    retries: int = 200

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = asdict(self.scene)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        scene = bw.SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("scene", {}).items()})
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(scene=scene, **d)


@dataclass
class DatasetRecord:
    instruction: str
    scene_I: bw.Scene
    scene_F: bw.Scene
    gold_program: ManipulationProgram
    gold_grounding: list
    n_steps: int
    complexity: str

    @property
    def bucket(self) -> tuple[int, str]:
        return self.n_steps, self.complexity

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "scene_I": bw.scene_to_dict(self.scene_I),
            "scene_F": bw.scene_to_dict(self.scene_F),
            "gold_program": to_sexpr(self.gold_program),
            "gold_grounding": [list(g) for g in self.gold_grounding],
            "n_steps": self.n_steps,
            "complexity": self.complexity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(
            d["instruction"],
            bw.scene_from_dict(d["scene_I"]),
            bw.scene_from_dict(d["scene_F"]),
            program_from_sexpr(d["gold_program"]),
            [(int(s), int(r), a) for s, r, a in d["gold_grounding"]],
            int(d["n_steps"]),
            d["complexity"],
        )


class GenerationError(RuntimeError):
    pass


def _choice(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _simple_descs(scene: bw.Scene, oid: int) -> list[tuple[str, ...]]:
    o = scene.by_id(oid)
    out = []
    for chain in ((o.color,), (o.shape,), (o.color, o.shape)):
        node = Unique(apply_chain(SceneAll(), chain))
        if all_unique(node, scene) and denote(node, scene) == oid:
            out.append(chain)
    return out


def _relational_descs(scene: bw.Scene, oid: int) -> list[tuple[str, tuple[str, ...]]]:
    out = []
    for anchor in scene.ids:
        if anchor == oid:
            continue
        for chain in _simple_descs(scene, anchor):
            anchor_node = Unique(apply_chain(SceneAll(), chain))
            for rel in RELATIONS:
                members = denote(Relate(anchor_node, rel), scene)
                if members == {oid}:
                    out.append((rel, chain))
    return out


def _chain_text(rng, chain: tuple[str, ...]) -> str:
    if len(chain) == 2:
        return f"the {chain[0]} {chain[1]}"
    if chain[0] in COLORS:
        return f"the {chain[0]} {_choice(rng, NOUNS)}"
    return f"the {chain[0]}"


def _describe(rng, scene: bw.Scene, oid: int, relational: bool):
    """(text, node) describing ``oid`` uniquely, or None."""
    if relational:
        options = _relational_descs(scene, oid)
        if not options:
            return None
        rel, chain = _choice(rng, options)
        anchor = Unique(apply_chain(SceneAll(), chain))
        text = f"the {_choice(rng, NOUNS)} {_choice(rng, ('which', 'that'))} is {_choice(rng, RELATION_SURFACES[rel])} {_chain_text(rng, chain)}"
        return text, Unique(Relate(anchor, rel))
    options = _simple_descs(scene, oid)
    if not options:
        return None
    chain = _choice(rng, options)
    return _chain_text(rng, chain), Unique(apply_chain(SceneAll(), chain))


def _make_step(rng, scene: bw.Scene, complex_step: bool, retries: int):
    for _ in range(retries):
        act = _choice(rng, ACTIONS)
        subj, ref = (int(v) for v in rng.choice(scene.ids, size=2, replace=False))
        if complex_step:
            pattern = _choice(rng, ((True, False), (True, False), (False, True), (True, True)))
        else:
            pattern = (False, False)
        sd = _describe(rng, scene, subj, pattern[0])
        rd = _describe(rng, scene, ref, pattern[1])
        if sd is None or rd is None:
            continue
        text = f"{_choice(rng, VERBS)} {sd[0]} {_choice(rng, ACTION_SURFACES[act])} {rd[0]}"
        return text, Move(act, sd[1], rd[1]), (subj, ref, act)
    return None


def _bucket_plan(count: int, cfg: DatasetConfig, rng) -> list[tuple[int, bool]]:
    lo, hi = cfg.n_steps
    steps = list(range(lo, hi + 1))
    weights = np.asarray(cfg.step_weights[: len(steps)], dtype=float)
    if len(weights) < len(steps):
        weights = np.ones(len(steps))
    weights = weights / weights.sum()
    plan = []
    for k, w in zip(steps, weights):
        n_k = int(round(w * count)) if k != steps[-1] else count - len(plan)
        n_k = max(0, min(n_k, count - len(plan)))
        n_complex = int(round(cfg.complex_fraction * n_k))
        plan += [(k, True)] * n_complex + [(k, False)] * (n_k - n_complex)
    return [plan[i] for i in rng.permutation(len(plan))]


def generate_record(seed: int, index: int, n_steps: int, complex_: bool, cfg: DatasetConfig) -> DatasetRecord:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    for _ in range(cfg.retries):
        n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
        if n < 2:
            continue
        scene_seed = int(rng.integers(2**31))
        scene_i = bw.generate_scene(scene_seed, n, cfg.scene)
        cur = scene_i
        texts, steps, grounding = [], [], []
        for _k in range(n_steps):
            made = _make_step(rng, cur, complex_, cfg.retries)
            if made is None:
                break
            text, step, g = made
            world = cur.world()
            world[g[0]] = bw.apply_gold_action(g[2], world[g[0]], world[g[1]], cfg.scene.margin)
            cur = cur.with_world(world)
            texts.append(text)
            steps.append(step)
            grounding.append(g)
        else:
            instruction = texts[0]
            for t in texts[1:]:
                conn = _choice(rng, CONNECTIVES)
                instruction += ("" if conn.startswith(",") else " ") + conn + " " + t
            final = cur.world()
            scene_f = bw.Scene(
                [
                    bw.make_object(o.id, o.color, o.shape, final[o.id], cfg.scene.feature_noise, scene_seed, salt=1)
                    for o in scene_i.objects
                ],
                scene_seed,
            )
            return DatasetRecord(
                instruction, scene_i, scene_f, ManipulationProgram(steps), grounding, n_steps,
                "complex" if complex_ else "simple",
            )
    raise GenerationError(f"could not generate record {index} (steps={n_steps}, complex={complex_})")


def generate_dataset(seed: int, count: int, cfg: DatasetConfig = DatasetConfig()) -> list[DatasetRecord]:
    """Generate ``count`` records with exact bucket proportions."""
    if count < 1:
        raise ValueError("count must be positive")
    plan = _bucket_plan(count, cfg, np.random.default_rng(seed))
    return [generate_record(seed, i, k, cx, cfg) for i, (k, cx) in enumerate(plan)]


def stratified_split(records: Sequence[DatasetRecord], seed: int, train_fraction: float = 0.8):
    """Train/test index lists, split per (n_steps, complexity) bucket."""
    rng = np.random.default_rng(seed)
    buckets: dict = {}
    for i, r in enumerate(records):
        buckets.setdefault(r.bucket, []).append(i)
    train, test = [], []
    for key in sorted(buckets):
        idx = buckets[key]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        cut = int(round(train_fraction * len(idx)))
        train += idx[:cut]
        test += idx[cut:]
    return sorted(train), sorted(test)


def save_dataset(path, records: Iterable[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_dataset(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_manifest(path, seed: int, cfg: DatasetConfig, count: int, split) -> None:
    train, test = split
    rec = {"seed": seed, "count": count, "config": cfg.to_dict(), "train": list(train), "test": list(test)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rec, fh, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def verify_record(rec: DatasetRecord) -> bool:
    """Gold program with gold geometry reproduces scene_F, and every Unique is determined."""
    cur = rec.scene_I
    for step in rec.gold_program.steps:
        if isinstance(step, Move) and not all_unique(step, cur):
            return False
        if isinstance(step, Move):
            world = cur.world()
            s, r = denote(step.subject, cur), denote(step.reference, cur)
            world[s] = bw.apply_gold_action(step.action, world[s], world[r])
            cur = cur.with_world(world)
    final = cur.world()
    return all(final[o.id] == o.loc for o in rec.scene_F.objects)


__all__ = [
    "Token", "lex", "oracle_parse", "ParseError", "split_connectives", "denote", "all_unique",
    "execute_gold", "DatasetConfig", "DatasetRecord", "generate_dataset", "generate_record",
    "stratified_split", "save_dataset", "load_dataset", "save_manifest", "load_manifest",
    "verify_record", "compose",
]
