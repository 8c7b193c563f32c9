"""Learned action semantics and step-by-step program execution."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import blocksworld as bw
from . import tensorcore as tc
from .blocksworld import Location
from .mpdsl import ACTIONS, Idle
from .tensorcore import Value
from .visreason import Executor, GroundedProgram, ReasonerConfig, WorldView

MIN_SIZE = 1e-4


class ActionModel(tc.Module):
    """``[action embedding | subject loc | reference loc] -> target loc``.

    A two-layer tanh MLP plus an action-gated linear path (one affine map of the
    two locations per action), shifted to centre on 0.5 and clipped into the unit cube.
    """

    def __init__(self, rng: np.random.Generator, emb_dim: int = 16, hidden: int = 64):
        n = len(ACTIONS)
        self.embedding = tc.Embedding(n, emb_dim, rng)
        self.net = tc.DenseNet([emb_dim + 10, hidden, hidden, 5], ["tanh", "tanh", "identity"], rng)
        self.linear = tc.Dense(n * 11, 5, rng)

    def __call__(self, act_idx, subj: Value, ref: Value) -> Value:
        """Batched: ``act_idx`` (B,), ``subj`` and ``ref`` (B, 5) -> (B, 5) in [0, 1]."""
        act_idx = np.asarray(act_idx)
        b, n = len(act_idx), len(ACTIONS)
        locs = tc.concat([(tc.lift(subj) - 0.5) * 2.0, (tc.lift(ref) - 0.5) * 2.0], axis=1)
        onehot = np.eye(n)[act_idx]
        gated = (locs.reshape(b, 1, 10) * onehot[:, :, None]).reshape(b, n * 10)
        x = tc.concat([self.embedding(act_idx), locs], axis=1)
        lin = self.linear(tc.concat([gated, tc.lift(onehot)], axis=1))
        return (self.net(x) + lin + 0.5).clip(0.0, 1.0)


def action_index(act: str) -> int:
    if act not in ACTIONS:
        raise KeyError(f"unknown action {act!r}")
    return ACTIONS.index(act)


def repair(arr: np.ndarray) -> np.ndarray:
    """Order the corners and enforce a minimum size so the output is a valid Location."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0).copy()
    for lo, hi in ((0, 2), (1, 3)):
        x, y = sorted((a[lo], a[hi]))
        if y - x < MIN_SIZE:
            c = min(max((x + y) / 2, MIN_SIZE / 2), 1 - MIN_SIZE / 2)
            x, y = c - MIN_SIZE / 2, c + MIN_SIZE / 2
        a[lo], a[hi] = x, y
    return a


def simulate_array(am: ActionModel, act: str, subj, ref) -> Value:
    """Differentiable single prediction as a (5,) Value."""
    idx = np.array([action_index(act)])
    return am(idx, tc.lift(subj).reshape(1, 5), tc.lift(ref).reshape(1, 5)).reshape(5)


def simulate_action(am: ActionModel, act: str, subj: Location, ref: Location) -> Location:
    with tc.no_grad():
        out = simulate_array(am, act, subj.as_array(), ref.as_array())
    return Location.from_array(repair(out.data))


def step_fn(am: ActionModel):
    """Adapter for :func:`visreason.ground`'s world update."""
    return lambda act, subj, ref: simulate_action(am, act, subj, ref)


@dataclass(frozen=True)
class SubGoal:
    object_id: int
    target: Location

    def to_dict(self, step: int) -> dict:
        return {"step": step, "object_id": self.object_id, "target": [float(v) for v in self.target.as_array()]}


def execute_program(am, gp: GroundedProgram, world: dict) -> tuple[list[SubGoal], dict]:
    """Apply grounded steps in order; only Move subjects change location.

    ``am`` may be an :class:`ActionModel` or ``None`` for the gold geometry.
    """
    world = dict(world)
    goals = []
    for step in gp.steps:
        if step.is_idle:
            continue
        if step.subject not in world or step.reference not in world:
            raise KeyError(f"grounded id not in world: {step.subject}, {step.reference}")
        if am is None:
            target = bw.apply_gold_action(step.action, world[step.subject], world[step.reference])
        else:
            target = simulate_action(am, step.action, world[step.subject], world[step.reference])
        world[step.subject] = target
        goals.append(SubGoal(step.subject, target))
    return goals, world


def write_subgoals(path, goals: list[SubGoal]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, g in enumerate(goals):
            fh.write(json.dumps(g.to_dict(k), sort_keys=True) + "\n")


# -- differentiable execution ------------------------------------------------------------


def geometry_block(locs: Value) -> Value:
    """Differentiable counterpart of :func:`blocksworld.geometry_features` over (N, 5)."""
    w = locs[:, 2] - locs[:, 0]
    h = locs[:, 3] - locs[:, 1]
    cols = [(locs[:, 0] + locs[:, 2]) * 0.5, (locs[:, 1] + locs[:, 3]) * 0.5, w, h, locs[:, 4], w / tc.maximum(h, 1e-3)]
    return tc.stack(cols, axis=1)


def refresh_features(features: Value, old: Value, new: Value) -> Value:
    """Shift the geometry sub-block of the features by the change in location."""
    appearance = features[:, : bw.GEOMETRY_SLICE.start]
    geometry = features[:, bw.GEOMETRY_SLICE] + (geometry_block(new) - geometry_block(old))
    return tc.concat([appearance, geometry], axis=1)


def soft_move(am: ActionModel, action: str, subj_soft: Value, ref_soft: Value, locs: Value) -> Value:
    """Every object moves toward its simulated target in proportion to its subject weight."""
    n = locs.shape[0]
    ref_loc = (ref_soft.reshape(1, n) @ locs).reshape(1, 5)
    targets = am(np.full(n, action_index(action)), locs, ref_loc + np.zeros((n, 1)))
    return locs + subj_soft.reshape(n, 1) * (targets - locs)


def soft_execute(program, scene: bw.Scene, ce, am: ActionModel, cfg=None) -> Value:
    """Predicted (N, 5) final locations with gradients to concepts and actions."""
    cfg = cfg or ReasonerConfig()
    feats = Value(scene.feature_array())
    locs = Value(scene.loc_array())
    for step in program.steps:
        if isinstance(step, Idle):
            continue
        ex = Executor(WorldView(scene, ce, feats, locs), cfg)
        new = soft_move(am, step.action, ex.soft(step.subject), ex.soft(step.reference), locs)
        feats = refresh_features(feats, locs, new)
        locs = new
    return locs


def soft_execute_moves(moves: list, scene: bw.Scene, ce, am: ActionModel, cfg=None) -> Value:
    """Batched single-step execution of K candidate Moves on one scene -> (K, N, 5)."""
    cfg = cfg or ReasonerConfig()
    locs = Value(scene.loc_array())
    n, k = len(scene), len(moves)
    ex = Executor(WorldView(scene, ce, None, locs), cfg)
    subj = tc.stack([ex.soft(m.subject) for m in moves], axis=0)  # (K, N)
    ref = tc.stack([ex.soft(m.reference) for m in moves], axis=0)
    ref_loc = ref @ locs  # (K, 5)
    rows = np.repeat(np.arange(k), n)
    acts = np.array([action_index(m.action) for m in moves])[rows]
    tiled = locs[np.tile(np.arange(n), k)]
    targets = am(acts, tiled, ref_loc[rows]).reshape(k, n, 5)
    base = locs.reshape(1, n, 5)
    return base + subj.reshape(k, n, 1) * (targets - base)
