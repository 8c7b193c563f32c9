"""Quasi-symbolic execution of object arguments over per-object probabilities.

Sets of objects are attention vectors (one membership probability per
object).  ``Filter`` intersects with a concept's probabilities by pointwise
min, ``Unique`` sharpens a set into a single object (a softmax for the soft
path, an argmax for the hard path), and ``Relate`` spreads an object's
attention through a learned pairwise relation matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import blocksworld as bw
from . import tensorcore as tc
from .mpdsl import (
    COLORS,
    OBJECT_CONCEPTS,
    RELATIONS,
    SHAPES,
    Filter,
    Idle,
    ManipulationProgram,
    Move,
    Relate,
    SceneAll,
    Unique,
    to_sexpr,
    typecheck,
)
from .tensorcore import Value


@dataclass(frozen=True)
class ReasonerConfig:
    gamma: float = 0.2
    tau: float = 0.1
    tau_unique: float = 0.05
    eps: float = 1e-6
    emb_dim: int = 16
    rel_hidden: int = 16


def relation_inputs(locs: Value) -> Value:
    """Pairwise scorer inputs ``[dcx, dcy, dd, w_i, h_i, w_j, h_j]`` as an ``(N*N, 7)`` matrix."""
    n = locs.shape[0]
    cx = (locs[:, 0] + locs[:, 2]) * 0.5
    cy = (locs[:, 1] + locs[:, 3]) * 0.5
    w = locs[:, 2] - locs[:, 0]
    h = locs[:, 3] - locs[:, 1]
    d = locs[:, 4]
    ii = np.repeat(np.arange(n), n)
    jj = np.tile(np.arange(n), n)
    cols = [cx[ii] - cx[jj], cy[ii] - cy[jj], d[ii] - d[jj], w[ii], h[ii], w[jj], h[jj]]
    return tc.stack(cols, axis=1)


class ConceptEmbeddings(tc.Module):
    """Learned object-level and relational concept parameters."""

    def __init__(self, rng: np.random.Generator, cfg: ReasonerConfig = ReasonerConfig()):
        self.cfg = cfg
        dim = cfg.emb_dim
        self.color_proj = tc.Dense(bw.FEATURE_DIM, dim, rng)
        self.type_proj = tc.Dense(bw.FEATURE_DIM, dim, rng)
        self.embedding = tc.param(rng.normal(0.0, 1.0, size=(len(OBJECT_CONCEPTS), dim)))
        self.relations = {
            r: tc.DenseNet([7, cfg.rel_hidden, 1], ["tanh", "identity"], rng) for r in RELATIONS
        }
        self.temperature = cfg.tau
        self.shift = cfg.gamma

    def object_param_names(self) -> list[str]:
        return [k for k in self.named_parameters() if not k.startswith("relations.")]

    def relation_param_names(self) -> list[str]:
        return [k for k in self.named_parameters() if k.startswith("relations.")]

    def class_probs(self, features: Value, shapes: bool) -> Value:
        """(N, C) probabilities for all colors (or all shapes)."""
        proj = (self.type_proj if shapes else self.color_proj)(features)
        proj = proj / ((proj * proj).sum(axis=1, keepdims=True) + 1e-12).sqrt()
        rows = np.arange(len(COLORS), len(OBJECT_CONCEPTS)) if shapes else np.arange(len(COLORS))
        emb = self.embedding[rows]
        emb = emb / ((emb * emb).sum(axis=1, keepdims=True) + 1e-12).sqrt()
        cos = proj @ emb.T
        return ((cos - self.shift) * (1.0 / self.temperature)).sigmoid()

    def concept_prob(self, feature, concept: str) -> Value:
        """Probability that one object (16-d feature) has ``concept``."""
        if concept not in OBJECT_CONCEPTS:
            raise KeyError(f"unknown object concept {concept!r}")
        shapes = concept in SHAPES
        probs = self.class_probs(tc.lift(feature).reshape(1, -1), shapes)
        col = (SHAPES if shapes else COLORS).index(concept)
        return probs[0, col]

    def relation_matrix(self, locs: Value, rel: str) -> Value:
        """``M[i, j]`` = probability that object i is ``rel`` to object j; diagonal forced to 0."""
        if rel not in self.relations:
            raise KeyError(f"unknown relation {rel!r}")
        n = locs.shape[0]
        scores = self.relations[rel](relation_inputs(locs)).sigmoid().reshape(n, n)
        return scores * (1.0 - np.eye(n))


class OracleConcepts:
    """Hard 0/1 concept and relation probabilities from ground-truth attributes."""

    def __init__(self, margin: float = 0.05):
        self.margin = margin

    def class_probs(self, scene: bw.Scene, shapes: bool) -> Value:
        names = SHAPES if shapes else COLORS
        attr = "shape" if shapes else "color"
        return Value(np.array([[float(getattr(o, attr) == c) for c in names] for o in scene.objects]).reshape(len(scene), len(names)))

    def relation_matrix(self, locs: Value, rel: str) -> Value:
        return Value(bw.gold_relation_matrix(rel, locs.data, self.margin))


class WorldView:
    """One world state seen by the executor, with per-concept caches."""

    def __init__(self, scene: bw.Scene, ce, features: Value | None = None, locs: Value | None = None):
        self.scene = scene
        self.ce = ce
        self.n = len(scene)
        self.features = features if features is not None else Value(scene.feature_array())
        self.locs = locs if locs is not None else Value(scene.loc_array())
        self._class: dict[bool, Value] = {}
        self._rel: dict[str, Value] = {}

    def concept_probs(self, concept: str) -> Value:
        shapes = concept in SHAPES
        if concept not in OBJECT_CONCEPTS:
            raise KeyError(f"unknown object concept {concept!r}")
        if shapes not in self._class:
            if isinstance(self.ce, OracleConcepts):
                self._class[shapes] = self.ce.class_probs(self.scene, shapes)
            else:
                self._class[shapes] = self.ce.class_probs(self.features, shapes)
        col = (SHAPES if shapes else COLORS).index(concept)
        return self._class[shapes][:, col]

    def relation(self, rel: str) -> Value:
        if rel not in self._rel:
            self._rel[rel] = self.ce.relation_matrix(self.locs, rel)
        return self._rel[rel]


# -- operators -----------------------------------------------------------------------------


def exec_filter(att, concept: str, view: WorldView) -> Value:
    att = tc.lift(att)
    probs = view.concept_probs(concept)
    if att.shape != probs.shape:
        raise ValueError(f"attention length {att.shape} does not match {view.n} objects")
    return tc.minimum(att, probs)


def exec_unique(att, tau_unique: float = 0.05, eps: float = 1e-6) -> tuple[Value, int]:
    """Soft selection ``softmax(log(att + eps) / tau)`` and hard argmax (lowest index on ties)."""
    att = tc.lift(att)
    if att.shape[0] < 1:
        raise ValueError("Unique over an empty scene")
    soft = tc.softmax((att + eps).log() * (1.0 / tau_unique))
    return soft, int(np.argmax(att.data))


def exec_relate(subject_soft, rel: str, view: WorldView) -> Value:
    subject_soft = tc.lift(subject_soft)
    m = view.relation(rel)
    if subject_soft.shape[0] != m.shape[1]:
        raise ValueError("attention length does not match the scene")
    return tc.minimum(m @ subject_soft, 1.0)


def one_hot(n: int, k: int) -> np.ndarray:
    v = np.zeros(n)
    v[k] = 1.0
    return v


class Executor:
    """Evaluates Obj/ObjSet nodes on a view, memoizing shared subtrees.

    The soft path threads probabilities end to end.  The hard path replaces
    every Unique with a one-hot at its argmax, which is what grounding ids
    are read from.
    """

    def __init__(self, view: WorldView, cfg: ReasonerConfig = ReasonerConfig(), trace: list | None = None):
        self.view = view
        self.cfg = cfg
        self.trace = trace
        self._soft: dict = {}
        self._hard: dict = {}

    def _log(self, node, path: str, att: Value) -> None:
        if self.trace is not None:
            self.trace.append({"path": path, "node": to_sexpr(node), "att": [float(v) for v in att.data]})

    def soft(self, node) -> Value:
        """Soft attention for an ObjSet node, or the softmax selection for an Obj node."""
        if node in self._soft:
            return self._soft[node]
        if isinstance(node, SceneAll):
            out = Value(np.ones(self.view.n))
        elif isinstance(node, Filter):
            out = exec_filter(self.soft(node.child), node.concept, self.view)
        elif isinstance(node, Relate):
            out = exec_relate(self.soft(node.child), node.concept, self.view)
        elif isinstance(node, Unique):
            out, _ = exec_unique(self.soft(node.child), self.cfg.tau_unique, self.cfg.eps)
        else:
            raise TypeError(f"not an object expression: {node!r}")
        self._soft[node] = out
        self._log(node, "soft", out)
        return out

    def hard(self, node) -> Value | int:
        """Attention vector for ObjSet nodes, object index for Obj nodes (hard Unique)."""
        if node in self._hard:
            return self._hard[node]
        if isinstance(node, SceneAll):
            out = Value(np.ones(self.view.n))
        elif isinstance(node, Filter):
            out = exec_filter(self.hard(node.child), node.concept, self.view)
        elif isinstance(node, Relate):
            k = self.hard(node.child)
            out = exec_relate(one_hot(self.view.n, k), node.concept, self.view)
        elif isinstance(node, Unique):
            att = self.hard(node.child)
            out = int(np.argmax(att.data))
        else:
            raise TypeError(f"not an object expression: {node!r}")
        self._hard[node] = out
        if not isinstance(out, int):
            self._log(node, "hard", out)
        return out


@dataclass
class GroundedStep:
    action: str | None  # None for Idle
    subject: int | None = None  # object id
    reference: int | None = None
    subject_att: np.ndarray | None = field(default=None, repr=False)
    reference_att: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_idle(self) -> bool:
        return self.action is None


@dataclass
class GroundedProgram:
    steps: list

    def triples(self) -> list[tuple]:
        return [(s.subject, s.reference, s.action) for s in self.steps if not s.is_idle]


def ground_step(step, view: WorldView, cfg: ReasonerConfig = ReasonerConfig(), trace: list | None = None) -> GroundedStep:
    if isinstance(step, Idle):
        return GroundedStep(None)
    if not isinstance(step, Move):
        raise TypeError(f"not a program step: {step!r}")
    ex = Executor(view, cfg, trace)
    ids = view.scene.ids
    s_soft, r_soft = ex.soft(step.subject), ex.soft(step.reference)
    return GroundedStep(
        step.action, ids[ex.hard(step.subject)], ids[ex.hard(step.reference)],
        s_soft.data.copy(), r_soft.data.copy(),
    )


def ground(
    program: ManipulationProgram,
    scene: bw.Scene,
    ce,
    step_fn: Callable | None = None,
    cfg: ReasonerConfig = ReasonerConfig(),
    trace: list | None = None,
) -> GroundedProgram:
    """Ground every step against the world as updated by the previous steps.

    ``step_fn(action, subject_loc, reference_loc) -> Location`` moves the
    subject between steps; it defaults to the gold placement geometry.
    """
    typecheck(program)
    step_fn = step_fn or bw.apply_gold_action
    cur = scene
    out = []
    with tc.no_grad():
        for k, step in enumerate(program.steps):
            step_trace = [] if trace is not None else None
            g = ground_step(step, WorldView(cur, ce), cfg, step_trace)
            if trace is not None:
                trace.extend({"step": k, **rec} for rec in step_trace)
            out.append(g)
            if not g.is_idle:
                world = cur.world()
                world[g.subject] = step_fn(g.action, world[g.subject], world[g.reference])
                cur = cur.with_world(world)
    return GroundedProgram(out)


def write_trace(path, trace: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
