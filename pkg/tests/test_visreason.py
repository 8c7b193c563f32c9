import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracle_sets import oracle_scenes, run_program

from blockprog import blocksworld as bw
from blockprog import tensorcore as tc
from blockprog import visreason as vr
from blockprog.mpdsl import (
    COLORS,
    SHAPES,
    Filter,
    Idle,
    Lexicon,
    ManipulationProgram,
    Move,
    Relate,
    SceneAll,
    Unique,
    enumerate_objects,
    enumerate_programs,
)
from blockprog.tensorcore import Value


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _concepts_with_direction(feature_dir, emb_dir, concept="red"):
    ce = vr.ConceptEmbeddings(np.random.default_rng(0))
    ce.color_proj.W.data = np.eye(bw.FEATURE_DIM)
    ce.color_proj.b.data = np.zeros(bw.FEATURE_DIM)
    ce.embedding.data[COLORS.index(concept)] = emb_dir
    return ce.concept_prob(feature_dir, concept).data


def test_collinear_concept_probability():
    v = np.zeros(16)
    v[0] = 2.0
    assert float(_concepts_with_direction(v, v * 3.0)) == pytest.approx(_sigmoid(8.0), abs=1e-12)
    assert float(_concepts_with_direction(v, v)) == pytest.approx(0.99966, abs=1e-5)


def test_orthogonal_concept_probability():
    a, b = np.zeros(16), np.zeros(16)
    a[0], b[1] = 1.0, 1.0
    assert float(_concepts_with_direction(a, b)) == pytest.approx(_sigmoid(-2.0), abs=1e-12)
    assert float(_concepts_with_direction(a, b)) == pytest.approx(0.1192, abs=1e-4)


def test_unknown_concept_is_rejected():
    ce = vr.ConceptEmbeddings(np.random.default_rng(0))
    with pytest.raises(KeyError):
        ce.concept_prob(np.zeros(16), "left")
    with pytest.raises(KeyError):
        ce.relation_matrix(Value(np.random.default_rng(0).uniform(size=(3, 5))), "above")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(COLORS + SHAPES))
def test_concept_probability_is_bounded(seed, concept):
    rng = np.random.default_rng(seed)
    ce = vr.ConceptEmbeddings(rng)
    p = float(ce.concept_prob(rng.normal(0, 5, size=16), concept).data)
    assert 0.0 < p < 1.0


def _view(n=4, seed=0):
    scene = bw.generate_scene(seed, n)
    return vr.WorldView(scene, vr.ConceptEmbeddings(np.random.default_rng(seed)))


def test_filter_of_all_ones_is_concept_probs_and_zero_is_absorbing():
    view = _view()
    p = view.concept_probs("cube").data
    assert np.array_equal(vr.exec_filter(np.ones(4), "cube", view).data, p)
    assert np.array_equal(vr.exec_filter(np.zeros(4), "cube", view).data, np.zeros(4))


def test_filter_length_mismatch():
    with pytest.raises(ValueError):
        vr.exec_filter(np.ones(3), "red", _view())


def test_filter_is_idempotent():
    view = _view()
    once = vr.exec_filter(np.ones(4), "red", view)
    assert np.array_equal(vr.exec_filter(once, "red", view).data, once.data)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=4, max_size=4), st.sampled_from(COLORS + SHAPES))
def test_filter_is_monotone(pairs, concept):
    lo = np.array([min(a, b) for a, b in pairs])
    hi = np.array([max(a, b) for a, b in pairs])
    view = _view()
    assert np.all(vr.exec_filter(lo, concept, view).data <= vr.exec_filter(hi, concept, view).data)


def test_hard_filter_matches_set_intersection():
    oracle = vr.OracleConcepts()
    for scene in oracle_scenes(1000, seed=100):
        view = vr.WorldView(scene, oracle)
        for concept in COLORS + SHAPES:
            attr = "color" if concept in COLORS else "shape"
            expected = [float(getattr(o, attr) == concept) for o in scene.objects]
            assert vr.exec_filter(np.ones(len(scene)), concept, view).data.tolist() == expected


def test_unique_examples():
    soft, hard = vr.exec_unique(np.array([0.0, 0.0, 1.0]))
    assert hard == 2 and soft.data[2] > 1 - 1e-12
    soft, hard = vr.exec_unique(np.full(4, 0.3))
    assert hard == 0 and np.allclose(soft.data, 0.25)
    assert vr.exec_unique(np.array([0.1, 0.7, 0.2]))[1] == 1


def test_unique_sharpens_as_temperature_falls():
    att = np.array([0.2, 0.9, 0.6])
    peaks = [vr.exec_unique(att, tau_unique=t)[0].data[1] for t in (1.0, 0.3, 0.05, 0.01)]
    assert all(b > a for a, b in zip(peaks, peaks[1:])) and peaks[-1] > 0.999


def test_relate_from_one_hot_reads_a_column():
    view = _view(5)
    m = view.relation("left").data
    out = vr.exec_relate(vr.one_hot(5, 2), "left", view).data
    assert np.allclose(out, m[:, 2])
    assert out[2] == 0.0


def test_relation_diagonal_is_zero():
    view = _view(5)
    for rel in ("left", "right", "front", "behind"):
        assert np.all(np.diag(view.relation(rel).data) == 0.0)


def test_relate_length_mismatch():
    with pytest.raises(ValueError):
        vr.exec_relate(np.ones(3), "left", _view(4))


def _ground_ids(program, scene, ce=None):
    gp = vr.ground(program, scene, ce or vr.OracleConcepts())
    return [(s.subject, s.reference, s.action) for s in gp.steps]


def test_unique_red_cube_grounds_to_that_object():
    scene = bw.generate_scene(4, 5)
    target = scene.objects[3]
    node = Unique(Filter(Filter(SceneAll(), target.color), target.shape))
    other = scene.objects[0]
    ref = Unique(Filter(Filter(SceneAll(), other.color), other.shape))
    (step,) = _ground_ids(ManipulationProgram([Move("mov_top", node, ref)]), scene)
    assert step == (target.id, other.id, "mov_top")


def test_oracle_equivalence_with_relations():
    lex = Lexicon(("red", "green"), ("cube", "dice"), ("left", "behind"), ("mov_top", "mov_right"))
    programs = list(enumerate_programs(lex, max_depth=6))
    assert any(isinstance(p.subject.child, Relate) for p in programs)
    for scene in oracle_scenes(40, seed=7):
        for p in programs:
            prog = ManipulationProgram([p])
            assert _ground_ids(prog, scene) == run_program(prog, scene)


def test_two_step_reference_grounds_against_updated_world():
    def o(oid, color, shape, box, d):
        return bw.make_object(oid, color, shape, bw.Location(box, d), 0.0, 0)

    scene = bw.Scene(
        [
            o(0, "red", "cube", (0.10, 0.40, 0.20, 0.50), 0.5),
            o(1, "blue", "lego", (0.40, 0.40, 0.50, 0.50), 0.5),
            o(2, "green", "dice", (0.70, 0.40, 0.80, 0.50), 0.5),
        ]
    )
    cube, lego, dice = (Unique(Filter(SceneAll(), c)) for c in ("cube", "lego", "dice"))
    left_of_cube = Unique(Relate(cube, "left"))
    step2 = Move("mov_top", dice, left_of_cube)
    # nothing is left of the cube at first; after step 1 the lego is
    assert run_program(ManipulationProgram([step2]), scene) == [(2, 0, "mov_top")]
    prog = ManipulationProgram([Move("mov_left", lego, cube), step2])
    assert _ground_ids(prog, scene) == run_program(prog, scene) == [(1, 0, "mov_left"), (2, 1, "mov_top")]


def test_idle_steps_ground_to_nothing():
    scene = bw.generate_scene(0, 3)
    gp = vr.ground(ManipulationProgram([Idle()]), scene, vr.OracleConcepts())
    assert gp.steps[0].is_idle and gp.triples() == []


_forms = enumerate_objects(Lexicon(("red", "blue"), ("cube",), ("left", "front"), ("mov_top",)), 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(_forms), st.integers(1, 6))
def test_attention_stays_in_unit_interval_with_random_parameters(seed, form, n):
    rng = np.random.default_rng(seed)
    ce = vr.ConceptEmbeddings(rng)
    for layer in ce.relations.values():
        for p in layer.named_parameters().values():
            p.data *= 4.0
    view = vr.WorldView(bw.generate_scene(seed, n), ce)
    ex = vr.Executor(view)
    node = form.child
    att = ex.soft(node).data
    assert np.all(att >= 0.0) and np.all(att <= 1.0)
    sel = ex.soft(form).data
    assert abs(sel.sum() - 1.0) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_soft_grounding_gradients(seed):
    rng = np.random.default_rng(seed)
    ce = vr.ConceptEmbeddings(rng, vr.ReasonerConfig(tau_unique=0.5))
    scene = bw.generate_scene(seed, 4)
    a, b = scene.objects[0], scene.objects[1]
    subject = Unique(Relate(Unique(Filter(SceneAll(), a.color)), "left"))
    reference = Unique(Filter(Filter(SceneAll(), b.color), b.shape))
    weights = rng.normal(size=4)

    def loss():
        ex = vr.Executor(vr.WorldView(scene, ce), ce.cfg)
        return (ex.soft(subject) * weights).sum() + (ex.soft(reference) * weights[::-1].copy()).sum()

    assert tc.gradcheck(loss, ce.named_parameters(), max_coords=40, rng=rng) < 1e-4


def test_trace_records_every_node(tmp_path):
    scene = bw.generate_scene(1, 3)
    o = scene.objects[0]
    prog = ManipulationProgram([Move("mov_top", Unique(Filter(SceneAll(), o.color)), Unique(Filter(SceneAll(), o.shape)))])
    trace = []
    vr.ground(prog, scene, vr.OracleConcepts(), trace=trace)
    assert {t["path"] for t in trace} == {"soft", "hard"}
    assert all(t["step"] == 0 and len(t["att"]) == 3 for t in trace)
    vr.write_trace(tmp_path / "t.jsonl", trace)
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == len(trace)
