"""Train the three curriculum stages on a small dataset and print the per-bucket report after each."""

import argparse

from blockprog import instgen as ig
from blockprog import metrics as mt
from blockprog.train import Models, TrainConfig, Trainer
from blockprog.langreason import Vocabulary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--epochs", default="20,8,4")
    args = ap.parse_args()
    records = ig.generate_dataset(args.seed, args.count)
    tr_idx, te_idx = ig.stratified_split(records, args.seed)
    train, test = [records[i] for i in tr_idx], [records[i] for i in te_idx]
    cfg = TrainConfig(seed=args.seed, epochs=tuple(int(e) for e in args.epochs.split(",")))
    models = Models.create(Vocabulary.build([r.instruction for r in train]), cfg.seed)
    trainer = Trainer(models, cfg, log=print)
    for stage in (1, 2, 3):
        print(trainer.run_stage(stage, train, mt.mean_iou_m))
        print(mt.evaluate(models, test).table())


if __name__ == "__main__":
    main()
