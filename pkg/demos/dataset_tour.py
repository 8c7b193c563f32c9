"""Generate a few records, show their programs and gold groundings, and render before/after images."""

import argparse
import os

from blockprog import blocksworld as bw
from blockprog import instgen as ig
from blockprog.mpdsl import to_sexpr


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=6)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="demo_out/tour")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for k, rec in enumerate(ig.generate_dataset(args.seed, args.count)):
        print(f"[{k}] {'/'.join(map(str, rec.bucket))}: {rec.instruction}")
        for step in rec.gold_program.steps:
            print("    ", to_sexpr(step))
        for subj, ref, act in rec.gold_grounding:
            s, r = rec.scene_I.by_id(subj), rec.scene_I.by_id(ref)
            print(f"     {act}: {s.color} {s.shape} (id {subj}) relative to {r.color} {r.shape} (id {ref})")
        print("     sound:", ig.verify_record(rec))
        bw.render(rec.scene_I, os.path.join(args.out, f"{k}_before.png"))
        bw.render(rec.scene_F, os.path.join(args.out, f"{k}_after.png"))
    print("renders in", args.out)


if __name__ == "__main__":
    main()
