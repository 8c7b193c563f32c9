"""Brute-force set semantics over ground-truth attributes, written without the executor's operators."""

from blockprog import blocksworld as bw
from blockprog.mpdsl import COLORS, Filter, Move, Relate, SceneAll, Unique


def eval_node(node, objs):
    """Set of positions for set-valued nodes, a position for Unique (lowest member, 0 if empty)."""
    if isinstance(node, SceneAll):
        return set(range(len(objs)))
    if isinstance(node, Filter):
        attr = "color" if node.concept in COLORS else "shape"
        return {i for i in eval_node(node.child, objs) if getattr(objs[i], attr) == node.concept}
    if isinstance(node, Unique):
        members = eval_node(node.child, objs)
        return min(members) if members else 0
    if isinstance(node, Relate):
        j = eval_node(node.child, objs)
        return {i for i in range(len(objs)) if i != j and bw.gold_relation(node.concept, objs[i].loc, objs[j].loc)}
    raise TypeError(node)


def run_program(program, scene):
    """Per-step (subject id, reference id, action), moving subjects with gold geometry."""
    objs = list(scene.objects)
    out = []
    for step in program.steps:
        if not isinstance(step, Move):
            out.append((None, None, None))
            continue
        s, r = eval_node(step.subject, objs), eval_node(step.reference, objs)
        out.append((objs[s].id, objs[r].id, step.action))
        new_loc = bw.apply_gold_action(step.action, objs[s].loc, objs[r].loc)
        objs[s] = bw.ObjectRecord(objs[s].id, objs[s].color, objs[s].shape, new_loc, objs[s].feature)
    return out


def oracle_scenes(count, seed=0, max_n=5):
    cfg = bw.SceneConfig(unique_attributes=False)
    return [bw.generate_scene(seed + k, 1 + k % max_n, cfg) for k in range(count)]
