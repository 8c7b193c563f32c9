import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockprog import actsim as act
from blockprog import blocksworld as bw
from blockprog import tensorcore as tc
from blockprog import visreason as vr
from blockprog.mpdsl import ACTIONS, Filter, Idle, ManipulationProgram, Move, SceneAll, Unique
from blockprog.train import loss_act
from blockprog.visreason import GroundedProgram, GroundedStep
from blockprog.tensorcore import Value


def _model(seed=0):
    return act.ActionModel(np.random.default_rng(seed))


def loc(*v):
    return bw.Location(v[:4], v[4])


def test_untrained_output_is_finite_and_in_range():
    rng = np.random.default_rng(0)
    am = _model()
    out = am(rng.integers(0, 5, size=200), Value(rng.uniform(size=(200, 5))), Value(rng.uniform(-3, 3, size=(200, 5))))
    assert np.all(np.isfinite(out.data)) and out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_simulate_action_returns_a_valid_location():
    am = _model(3)
    for a in ACTIONS:
        out = act.simulate_action(am, a, loc(0.1, 0.4, 0.2, 0.5, 0.5), loc(0.5, 0.4, 0.6, 0.5, 0.5))
        assert isinstance(out, bw.Location)


def test_unknown_action():
    with pytest.raises(KeyError):
        act.simulate_action(_model(), "mov_under", loc(0.1, 0.1, 0.2, 0.2, 0.5), loc(0.5, 0.5, 0.6, 0.6, 0.5))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-2, 3), min_size=5, max_size=5))
def test_repair_always_gives_a_location(vals):
    bw.Location.from_array(act.repair(np.array(vals)))


def _gold_samples(rng, n):
    rows = []
    for _ in range(n):
        scene = bw.generate_scene(int(rng.integers(2**30)), 2)
        s, r = scene.objects[0].loc, scene.objects[1].loc
        a = ACTIONS[int(rng.integers(len(ACTIONS)))]
        rows.append((ACTIONS.index(a), s.as_array(), r.as_array(), bw.apply_gold_action(a, s, r).as_array()))
    a, s, r, g = zip(*rows)
    return np.array(a), np.stack(s), np.stack(r), np.stack(g)


def test_network_can_recover_gold_geometry():
    # capacity check by direct regression; the curriculum itself only sees final scenes
    rng = np.random.default_rng(0)
    a, s, r, g = _gold_samples(rng, 4000)
    am = _model(1)
    opt = tc.Adam(am.named_parameters(), lr=3e-3)
    for _ in range(2500):
        idx = rng.integers(0, len(a), 256)
        (am(a[idx], Value(s[idx]), Value(r[idx])) - g[idx]).abs().mean().backward()
        opt.step()
    out = act.simulate_action(am, "mov_right", loc(0.10, 0.40, 0.20, 0.50, 0.5), loc(0.50, 0.40, 0.60, 0.50, 0.5))
    assert np.abs(out.as_array() - [0.62, 0.40, 0.72, 0.50, 0.5]).max() < 0.02


def test_permuting_action_rows_and_labels_gives_identical_losses():
    rng = np.random.default_rng(2)
    a, s, r, g = _gold_samples(rng, 50)
    am, am2 = _model(4), _model(4)
    perm = rng.permutation(len(ACTIONS))
    am2.embedding.table.data[perm] = am.embedding.table.data
    n = len(ACTIONS)
    blocks = am.linear.W.data[: n * 10].reshape(n, 10, 5)
    am2.linear.W.data[: n * 10] = blocks[np.argsort(perm)].reshape(n * 10, 5)
    am2.linear.W.data[n * 10 :][perm] = am.linear.W.data[n * 10 :]
    l1 = loss_act(am(a, Value(s), Value(r)), g).data
    l2 = loss_act(am2(perm[a], Value(s), Value(r)), g).data
    assert np.array_equal(l1, l2)


def _world(scene):
    return scene.world()


def test_all_idle_program_leaves_world_unchanged():
    scene = bw.generate_scene(0, 4)
    goals, world = act.execute_program(_model(), GroundedProgram([GroundedStep(None), GroundedStep(None)]), _world(scene))
    assert goals == [] and world == _world(scene)


def test_one_step_moves_exactly_one_object():
    scene = bw.generate_scene(1, 4)
    ids = scene.ids
    goals, world = act.execute_program(_model(), GroundedProgram([GroundedStep("mov_top", ids[1], ids[3])]), _world(scene))
    assert len(goals) == 1 and goals[0].object_id == ids[1]
    changed = [i for i in ids if world[i] != scene.world()[i]]
    assert changed == [ids[1]]


def test_invalid_id():
    scene = bw.generate_scene(1, 3)
    with pytest.raises(KeyError):
        act.execute_program(None, GroundedProgram([GroundedStep("mov_top", 99, 0)]), _world(scene))


def test_second_step_uses_updated_location():
    scene = bw.generate_scene(5, 3)
    a, b, c = scene.ids
    gp = GroundedProgram([GroundedStep("mov_right", a, b), GroundedStep("mov_top", c, a)])
    for am in (None, _model(6)):
        goals, world = act.execute_program(am, gp, _world(scene))
        after_one = act.execute_program(am, GroundedProgram(gp.steps[:1]), _world(scene))[1]
        if am is None:
            expected = bw.apply_gold_action("mov_top", after_one[c], after_one[a])
        else:
            expected = act.simulate_action(am, "mov_top", after_one[c], after_one[a])
        assert goals[1].target == expected == world[c]


_steps = st.lists(
    st.one_of(st.just(None), st.tuples(st.sampled_from(ACTIONS), st.integers(0, 4), st.integers(0, 4))),
    min_size=1,
    max_size=5,
)


def _gp(raw):
    return GroundedProgram([GroundedStep(None) if x is None else GroundedStep(x[0], x[1], x[2]) for x in raw])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), _steps, _steps)
def test_closed_world_and_sequential_composition(seed, p, q):
    scene = bw.generate_scene(seed, 5)
    am = _model(seed % 7)
    world0 = _world(scene)
    _, w_pq = act.execute_program(am, _gp(p + q), world0)
    _, w_p = act.execute_program(am, _gp(p), world0)
    _, w_q = act.execute_program(am, _gp(q), w_p)
    assert w_pq == w_q
    moved = {x[1] for x in p + q if x is not None}
    for i in world0:
        if i not in moved:
            assert w_pq[i] == world0[i]


def test_subgoal_trace(tmp_path):
    goals = [act.SubGoal(2, loc(0.1, 0.2, 0.3, 0.4, 0.5))]
    act.write_subgoals(tmp_path / "g.jsonl", goals)
    rec = json.loads((tmp_path / "g.jsonl").read_text())
    assert rec == {"step": 0, "object_id": 2, "target": [0.1, 0.2, 0.3, 0.4, 0.5]}


def _named(scene, k):
    o = scene.objects[k]
    return Unique(Filter(Filter(SceneAll(), o.color), o.shape))


def _midpoint_model():
    """Predicts the average of subject and reference boxes, which is always a valid box."""
    am = _model(8)
    am.net.layers[-1].W.data[:] = 0.0
    am.net.layers[-1].b.data[:] = 0.0
    n = len(ACTIONS)
    w = np.zeros((n * 11, 5))
    for a in range(n):
        w[a * 10 : a * 10 + 5] = 0.25 * np.eye(5)
        w[a * 10 + 5 : a * 10 + 10] = 0.25 * np.eye(5)
    am.linear.W.data = w
    am.linear.b.data = np.zeros(5)
    return am


def test_soft_execution_with_oracle_concepts_matches_hard_execution():
    scene = bw.generate_scene(8, 4)
    am = _midpoint_model()
    prog = ManipulationProgram(
        [Move("mov_left", _named(scene, 0), _named(scene, 1)), Idle(), Move("mov_front", _named(scene, 2), _named(scene, 0))]
    )
    gp = vr.ground(prog, scene, vr.OracleConcepts(), act.step_fn(am))
    with tc.no_grad():
        soft = act.soft_execute(prog, scene, vr.OracleConcepts(), am).data
    _, world = act.execute_program(am, gp, _world(scene))
    hard = np.stack([world[i].as_array() for i in scene.ids])
    assert np.allclose(soft, hard, atol=1e-6)


def test_batched_candidates_match_single_execution():
    scene = bw.generate_scene(9, 4)
    rng = np.random.default_rng(9)
    ce, am = vr.ConceptEmbeddings(rng), _model(9)
    moves = [Move(a, _named(scene, i), _named(scene, j)) for a, i, j in (("mov_top", 0, 1), ("mov_behind", 2, 3), ("mov_left", 1, 1))]
    with tc.no_grad():
        batched = act.soft_execute_moves(moves, scene, ce, am).data
        single = [act.soft_execute(ManipulationProgram([m]), scene, ce, am).data for m in moves]
    assert np.allclose(batched, np.stack(single), atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradients_through_execution(seed):
    rng = np.random.default_rng(seed)
    ce = vr.ConceptEmbeddings(rng, vr.ReasonerConfig(tau_unique=0.5))
    am = _model(seed)
    scene = bw.generate_scene(seed, 4)
    prog = ManipulationProgram([Move("mov_top", _named(scene, 0), _named(scene, 1)), Move("mov_right", _named(scene, 2), _named(scene, 0))][: 1 + seed % 2])
    gold = scene.loc_array() + rng.normal(0, 0.05, size=(4, 5))
    params = {**{"ce." + k: v for k, v in ce.named_parameters().items()}, **{"am." + k: v for k, v in am.named_parameters().items()}}
    err = tc.gradcheck(lambda: loss_act(act.soft_execute(prog, scene, ce, am), gold), params, max_coords=40, rng=rng)
    assert err < 1e-4
