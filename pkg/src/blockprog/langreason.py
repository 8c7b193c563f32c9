"""Learned language reasoner: an instruction splitter and a grammar-masked parser.

The parser emits one program step per segment as a fixed sequence of
decisions:

    ACT  BASE(subject) [INNER...] OUTER...  BASE(reference) [INNER...] OUTER...

``BASE`` is either ``<scene>`` or a relation (which opens an inner filter
chain for the anchor object), chains end with ``<reduce>``.  Concept,
action and relation choices are pointers into the segment's keyword
positions, so a decode can only mention concepts the segment mentions, and
a grammar mask over the options makes every finished decode well typed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .instgen import STRUCTURAL_WORDS, Token, lex
from .mpdsl import (
    ACTIONS,
    COLORS,
    RELATIONS,
    SHAPES,
    Filter,
    Idle,
    ManipulationProgram,
    Move,
    Relate,
    SceneAll,
    Unique,
    apply_chain,
    compose,
)
from .tensorcore import Value

PAD, UNK = "<pad>", "<unk>"
SCENE, REDUCE, START = "<scene>", "<reduce>", "<start>"
DECODER_TOKENS = (START, SCENE, REDUCE) + COLORS + SHAPES + RELATIONS + ACTIONS
_DEC_INDEX = {t: i for i, t in enumerate(DECODER_TOKENS)}
ROLES = ("act", "base_s", "inner_s", "outer_s", "base_r", "inner_r", "outer_r")
MAX_FILTERS = 2
MAX_DECODE = 32
N_STRUCT = 2  # option columns before the pointer columns: SCENE, REDUCE


class TruncationError(RuntimeError):
    pass


class Vocabulary:
    """Word -> index table; keyword phrases are keyed by their concept name."""

    def __init__(self, tokens: Sequence[str]):
        words = [PAD, UNK] + sorted(set(tokens) - {PAD, UNK})
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    @classmethod
    def build(cls, instructions: Sequence[str]) -> "Vocabulary":
        keys = set(COLORS + SHAPES + RELATIONS + ACTIONS)
        for text in instructions:
            keys.update(t.key for t in lex(text))
        return cls(sorted(keys))

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: Sequence[Token]) -> list[int]:
        return [self.index.get(t.key, 1) for t in tokens]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, w in enumerate(self.words):
                fh.write(f"{w}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        rows.sort(key=lambda r: int(r[1]))
        vocab = cls([])
        vocab.words = [r[0] for r in rows]
        vocab.index = {w: i for i, w in enumerate(vocab.words)}
        return vocab


def _encode_batch(word: tc.Embedding, cell: tc.GRUCell, ids: np.ndarray, mask: np.ndarray):
    """Run a GRU over padded rows; returns per-position states (B, L, H) and final states."""
    b, length = ids.shape
    h = Value(np.zeros((b, cell.n_hidden)))
    outs = []
    for t in range(length):
        h = tc.where(mask[:, t : t + 1], cell(word(ids[:, t]), h), h)
        outs.append(h)
    return tc.stack(outs, axis=1), h


def _pad(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    length = max(1, max((len(r) for r in rows), default=1))
    ids = np.zeros((len(rows), length), dtype=np.int64)
    mask = np.zeros((len(rows), length), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


# -- grammar ---------------------------------------------------------------------------------


def _class_of(name: str | None) -> str | None:
    if name in COLORS:
        return "color"
    if name in SHAPES:
        return "shape"
    if name in RELATIONS:
        return "rel"
    if name in ACTIONS:
        return "act"
    return None


class GrammarState:
    """Tracks one decode: what may come next, and the program built so far."""

    def __init__(self, concepts: Sequence[str | None]):
        classes = {_class_of(c) for c in concepts}
        self.present = {c for c in concepts if c is not None}
        self.idle = "act" not in classes or not ({"color", "shape"} & classes)
        self.phase = "done" if self.idle else "act"
        self.arg = 0
        self.action: str | None = None
        self.args = [{"base": None, "inner": [], "outer": []} for _ in range(2)]
        self.emitted: list[str] = []

    @property
    def done(self) -> bool:
        return self.phase == "done"

    def role(self) -> int:
        if self.phase == "act":
            return 0
        return 1 + 3 * self.arg + ("base", "inner", "outer").index(self.phase)

    def _chain_options(self, chain: list[str], budget: int) -> set[str]:
        if len(chain) >= budget or any(c in SHAPES for c in chain):
            return set()
        names = set(SHAPES) if chain else set(COLORS + SHAPES)
        return names & self.present

    def legal(self) -> tuple[bool, bool, set[str]]:
        """``(scene_ok, reduce_ok, allowed concept names)`` for the next decision."""
        if self.phase == "act":
            return False, False, set(ACTIONS) & self.present
        a = self.args[self.arg]
        if self.phase == "base":
            return True, False, set(RELATIONS) & self.present
        if self.phase == "inner":
            return False, len(a["inner"]) >= 1, self._chain_options(a["inner"], MAX_FILTERS)
        if self.phase == "outer":
            ok = len(a["outer"]) >= 1 or a["base"] != SCENE
            return False, ok, self._chain_options(a["outer"], MAX_FILTERS - len(a["inner"]))
        raise RuntimeError("decode already finished")

    def feed(self, tok: str) -> None:
        scene_ok, reduce_ok, allowed = self.legal()
        if not ((tok == SCENE and scene_ok) or (tok == REDUCE and reduce_ok) or tok in allowed):
            raise ValueError(f"token {tok!r} not legal in phase {self.phase}")
        self.emitted.append(tok)
        a = self.args[self.arg] if self.phase != "act" else None
        if self.phase == "act":
            self.action, self.phase = tok, "base"
        elif self.phase == "base":
            a["base"] = tok
            self.phase = "outer" if tok == SCENE else "inner"
        elif self.phase == "inner":
            if tok == REDUCE:
                self.phase = "outer"
            else:
                a["inner"].append(tok)
        elif tok == REDUCE:
            if self.arg == 0:
                self.arg, self.phase = 1, "base"
            else:
                self.phase = "done"
        else:
            a["outer"].append(tok)

    def program(self):
        if self.idle:
            return Idle()
        if not self.done:
            raise RuntimeError("decode not finished")
        objs = []
        for a in self.args:
            if a["base"] == SCENE:
                base = SceneAll()
            else:
                base = Relate(Unique(apply_chain(SceneAll(), a["inner"])), a["base"])
            objs.append(Unique(apply_chain(base, a["outer"])))
        return Move(self.action, objs[0], objs[1])


def _unwrap_chain(node) -> tuple[object, list[str]]:
    chain = []
    while isinstance(node, Filter):
        chain.append(node.concept)
        node = node.child
    return node, chain[::-1]


def program_to_decisions(step) -> list[str]:
    """The decision sequence that makes the parser emit ``step`` (canonical chains only)."""
    if isinstance(step, Idle):
        return []
    out = [step.action]
    for obj in (step.subject, step.reference):
        if not isinstance(obj, Unique):
            raise ValueError("arguments must be Unique(...)")
        base, outer = _unwrap_chain(obj.child)
        if isinstance(base, SceneAll):
            out.append(SCENE)
        elif isinstance(base, Relate):
            anchor = base.child
            if not isinstance(anchor, Unique):
                raise ValueError("relate anchor must be Unique(...)")
            inner_base, inner = _unwrap_chain(anchor.child)
            if not isinstance(inner_base, SceneAll):
                raise ValueError("nested relate is outside the decoder grammar")
            out += [base.concept] + inner + [REDUCE]
        else:
            raise ValueError(f"unsupported argument base {base!r}")
        out += outer + [REDUCE]
    return out


# -- parser ----------------------------------------------------------------------------------


def content_tokens(segment: Sequence[Token]) -> list[Token]:
    """Drop connective words; they carry no program content."""
    return [t for t in segment if not (t.kind == "structural" and t.surface.lower() in STRUCTURAL_WORDS)]


@dataclass
class Decode:
    program: object
    decisions: list


class ParserModel(tc.Module):
    def __init__(self, vocab: Vocabulary, rng: np.random.Generator, emb_dim: int = 32, hidden: int = 64, ctrl_dim: int = 16):
        self.vocab = vocab
        self.word = tc.Embedding(len(vocab), emb_dim, rng)
        self.encoder = tc.GRUCell(emb_dim, hidden, rng)
        self.dec_token = tc.Embedding(len(DECODER_TOKENS), ctrl_dim, rng)
        self.role = tc.Embedding(len(ROLES), ctrl_dim, rng)
        self.decoder = tc.GRUCell(2 * ctrl_dim, hidden, rng)
        self.struct_head = tc.Dense(hidden, N_STRUCT, rng)
        self.query = tc.Dense(hidden, hidden, rng)

    def decode(
        self,
        segments: Sequence[Sequence[Token]],
        rows: Sequence[int] | None = None,
        mode: str = "argmax",
        rng: np.random.Generator | None = None,
        forced: Sequence[Sequence[str]] | None = None,
    ) -> tuple[list[Decode], Value]:
        """Decode one step per row; ``rows[b]`` names the segment row ``b`` reads.

        ``mode`` is ``"argmax"``, ``"sample"`` (needs ``rng``) or ``"forced"``
        (scores the given decision sequences).  Returns the decodes and the
        (B,) log-probabilities.
        """
        if mode not in ("argmax", "sample", "forced"):
            raise ValueError(f"unknown decode mode {mode!r}")
        segs = [content_tokens(s) for s in segments]
        rows = np.arange(len(segs)) if rows is None else np.asarray(rows, dtype=np.int64)
        b = len(rows)
        ids, mask = _pad([self.vocab.encode(s) for s in segs])
        enc, h_last = _encode_batch(self.word, self.encoder, ids, mask)
        enc, h = enc[rows], h_last[rows]
        length = ids.shape[1]
        concepts = [[t.concept.name if t.concept is not None else None for t in s] for s in segs]
        pos_concept = [concepts[r] + [None] * (length - len(concepts[r])) for r in rows]
        states = [GrammarState(concepts[r]) for r in rows]
        prev = np.full(b, _DEC_INDEX[START])
        total = Value(np.zeros(b))
        for t in range(MAX_DECODE + 1):
            active = np.array([not s.done for s in states])
            if not active.any():
                break
            if t == MAX_DECODE:
                raise TruncationError(f"decode exceeded {MAX_DECODE} tokens")
            legal = np.zeros((b, N_STRUCT + length), dtype=bool)
            roles = np.zeros(b, dtype=np.int64)
            for i, s in enumerate(states):
                if s.done:
                    legal[i, 0] = True
                    continue
                roles[i] = s.role()
                scene_ok, reduce_ok, allowed = s.legal()
                legal[i, 0], legal[i, 1] = scene_ok, reduce_ok
                legal[i, N_STRUCT:] = [c in allowed for c in pos_concept[i]]
            x = tc.concat([self.dec_token(prev), self.role(roles)], axis=1)
            h = tc.where(active[:, None], self.decoder(x, h), h)
            q = self.query(h)
            ptr = (enc * q.reshape(b, 1, -1)).sum(axis=2)
            logits = tc.concat([self.struct_head(h), ptr], axis=1)
            lsm = tc.log_softmax(logits, axis=1, mask=legal)
            probs = np.where(legal, np.exp(lsm.data), 0.0)
            sel = np.zeros_like(legal)
            for i, s in enumerate(states):
                if s.done:
                    sel[i, 0] = True
                    continue
                if mode == "forced":
                    seq = forced[i]
                    k = len(s.emitted)
                    if k >= len(seq):
                        raise ValueError("forced decision sequence ended early")
                    tok = seq[k]
                elif mode == "sample":
                    p = probs[i] / probs[i].sum()
                    j = int(rng.choice(len(p), p=p))
                    tok = (SCENE, REDUCE)[j] if j < N_STRUCT else pos_concept[i][j - N_STRUCT]
                else:
                    tok = self._best(probs[i], legal[i], pos_concept[i])
                if tok == SCENE:
                    sel[i, 0] = True
                elif tok == REDUCE:
                    sel[i, 1] = True
                else:
                    sel[i, N_STRUCT:] = [c == tok for c in pos_concept[i]]
                    sel[i] &= legal[i]
                if not sel[i].any():
                    raise ValueError(f"token {tok!r} is not available in this segment")
                s.feed(tok)
                prev[i] = _DEC_INDEX[tok]
            peak = np.max(np.where(sel, lsm.data, -np.inf), axis=1, keepdims=True)
            step = ((lsm - peak).exp() * sel).sum(axis=1).log() + peak.reshape(-1)
            total = total + step * active
        for i, s in enumerate(states):
            if forced is not None and mode == "forced" and len(s.emitted) != len(forced[i]):
                raise ValueError("forced decision sequence longer than the grammar allows")
        return [Decode(s.program(), list(s.emitted)) for s in states], total

    @staticmethod
    def _best(probs: np.ndarray, legal: np.ndarray, pos_concept: list) -> str:
        # concept-level argmax; ties go to the earliest option
        scores: dict[str, float] = {}
        if legal[0]:
            scores[SCENE] = probs[0]
        if legal[1]:
            scores[REDUCE] = probs[1]
        for j, c in enumerate(pos_concept):
            if legal[N_STRUCT + j]:
                scores[c] = scores.get(c, 0.0) + probs[N_STRUCT + j]
        best = max(scores.values())
        return next(k for k, v in scores.items() if v == best)


def parse_step(m: ParserModel, segment: Sequence[Token], mode: str = "argmax", rng=None):
    """One program step for one segment, with its log-probability."""
    if not segment:
        raise ValueError("empty segment")
    decodes, logp = m.decode([segment], mode=mode, rng=rng)
    return decodes[0].program, logp[0]


# -- splitter --------------------------------------------------------------------------------


class SplitterModel(tc.Module):
    """Per-position "cut after this token" scores from a GRU that restarts after each cut."""

    def __init__(self, vocab: Vocabulary, rng: np.random.Generator, emb_dim: int = 32, hidden: int = 64, window: int = 24, init_bias: float = -3.0):
        self.vocab = vocab
        self.window = window
        self.word = tc.Embedding(len(vocab), emb_dim, rng)
        self.cell = tc.GRUCell(emb_dim, hidden, rng)
        self.head = tc.Dense(hidden, 1, rng)
        self.head.b.data[:] = init_bias

    def run(self, tokens: Sequence[Token], n: int = 1, mode: str = "argmax", rng=None, forced=None):
        """Decide cuts for ``n`` parallel rows; returns cut lists and (n,) log-probabilities."""
        if not tokens:
            raise ValueError("empty instruction")
        ids = np.array(self.vocab.encode(tokens))
        h = Value(np.zeros((n, self.cell.n_hidden)))
        since = np.zeros(n, dtype=np.int64)
        cuts: list[list[int]] = [[] for _ in range(n)]
        total = Value(np.zeros(n))
        last = len(ids) - 1
        for i, w in enumerate(ids):
            h = self.cell(self.word(np.full(n, w)), h)
            if i == last:
                break
            open_ = since < self.window
            if not open_.any():
                since += 1
                continue
            logit = self.head(h).reshape(n)
            p = tc.sigmoid_np(logit.data)
            if mode == "forced":
                cut = np.array([i in f for f in forced])
            elif mode == "sample":
                cut = rng.random(n) < p
            else:
                cut = p > 0.5
            cut &= open_
            # log p for a cut, log(1 - p) otherwise, via log-sigmoid of +-logit
            sign = np.where(cut, 1.0, -1.0)
            z = logit * sign
            logsig = tc.minimum(z, 0.0) - ((-z.abs()).exp() + 1.0).log()
            total = total + logsig * open_
            for r in np.nonzero(cut)[0]:
                cuts[r].append(i)
            h = tc.where(cut[:, None], 0.0, h)
            since = np.where(cut, 0, since + 1)
        return cuts, total


def segments_from_cuts(tokens: Sequence[Token], cuts: Sequence[int]) -> list[list[Token]]:
    out, start = [], 0
    for c in sorted(cuts):
        out.append(list(tokens[start : c + 1]))
        start = c + 1
    out.append(list(tokens[start:]))
    return out


def split(m: SplitterModel, tokens: Sequence[Token], mode: str = "argmax", rng=None):
    """Ordered segments covering ``tokens`` and the log-probability of the cut decisions."""
    cuts, logp = m.run(tokens, 1, mode, rng)
    return segments_from_cuts(tokens, cuts[0]), logp[0]


def infer_program(splitter: SplitterModel, parser: ParserModel, instruction: str) -> ManipulationProgram:
    """Deterministic argmax inference: split, parse every segment, compose."""
    tokens = lex(instruction)
    if not tokens:
        raise ValueError("empty instruction")
    with tc.no_grad():
        segments, _ = split(splitter, tokens)
        decodes, _ = parser.decode(segments)
    return compose([ManipulationProgram((d.program,)) for d in decodes])
