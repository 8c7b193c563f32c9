"""Ground a relational program with exact 0/1 concepts and print the attention at every node."""

from blockprog import blocksworld as bw
from blockprog import visreason as vr
from blockprog.mpdsl import program_from_sexpr


def main():
    def obj(oid, color, shape, box):
        return bw.make_object(oid, color, shape, bw.Location(box, 0.5), 0.0, 0)

    scene = bw.Scene(
        [
            obj(0, "red", "cube", (0.10, 0.40, 0.20, 0.50)),
            obj(1, "blue", "lego", (0.40, 0.40, 0.50, 0.50)),
            obj(2, "green", "dice", (0.70, 0.40, 0.80, 0.50)),
            obj(3, "red", "dice", (0.40, 0.70, 0.50, 0.80)),
        ]
    )
    text = "(move mov_top (unique (relate (unique (filter (scene) lego)) right)) (unique (filter (filter (scene) red) dice)))"
    program = program_from_sexpr(text)
    trace = []
    gp = vr.ground(program, scene, vr.OracleConcepts(), trace=trace)
    print(text)
    for t in trace:
        print(f"  {t['path']:>4}  {t['node']:<60} {[round(a, 3) for a in t['att']]}")
    print("grounding (subject, reference, action):", gp.triples())


if __name__ == "__main__":
    main()
