"""Command line: gen, train, eval, exec, repl, render.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

from . import blocksworld as bw
from . import instgen as ig
from . import metrics as mt
from . import tensorcore as tc
from .actsim import execute_program, step_fn, write_subgoals
from .langreason import TruncationError, infer_program
from .mpdsl import DslTypeError, SexprError, program_from_sexpr, to_sexpr, typecheck
from .train import LossConfig, Models, TrainConfig, checkpoint_path, run_curriculum, write_curve
from .visreason import ground, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs; archived as ``run_config.json`` next to its outputs."""

    seed: int = 7
    data: str = "data"
    out: str = "run"
    count: int = 5000
    objects: tuple = (3, 5)
    steps: tuple = (1, 2)
    complex_fraction: float = 0.5
    stage: str = "all"
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d["objects"], d["steps"] = list(self.objects), list(self.steps)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        train = TrainConfig.from_dict(d.pop("train", {}))
        for k in ("objects", "steps"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(train=train, **d)

    def dataset_config(self) -> ig.DatasetConfig:
        return ig.DatasetConfig(n_objects=self.objects, n_steps=self.steps, complex_fraction=self.complex_fraction)

    def stages(self) -> list[int]:
        if self.stage == "all":
            return [1, 2, 3]
        try:
            lo, _, hi = self.stage.partition("..")
            out = list(range(int(lo), int(hi or lo) + 1))
        except ValueError:
            raise UsageError(f"bad --stage {self.stage!r}") from None
        if not out or out[0] < 1 or out[-1] > 3:
            raise UsageError(f"bad --stage {self.stage!r}")
        return out


def _range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi) if sep else int(lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or A..B, got {text!r}") from None
    if a > b:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return a, b


def _lr(text: str) -> tuple[str, float]:
    group, sep, val = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected GROUP=VALUE")
    return group, float(val)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stage", help="1, 2, 3, a range like 2..3, or all")
    p.add_argument("--epochs", help="max epochs per stage, e.g. 45,20,10")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--enum-epochs", type=int)
    p.add_argument("--enum-cap", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-size", type=int)
    p.add_argument("--lr", type=_lr, action="append", metavar="GROUP=VALUE")
    p.add_argument("--lr-final-fraction", type=float)
    p.add_argument("--parser-warmup-epochs", type=int)
    p.add_argument("--entropy-weight", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--norm", choices=["l1", "l2"])


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="blockprog", description="Instruction-following programs over a tabletop blocks world.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a dataset and its split manifest")
    _run_flags(p)
    p.add_argument("--count", type=int)
    p.add_argument("--objects", type=_range, help="object count range, e.g. 3..5")
    p.add_argument("--steps", type=_range, help="step count range, e.g. 1..2")
    p.add_argument("--complex-fraction", type=float)

    p = sub.add_parser("train", help="run curriculum stages")
    _run_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", help="metric report on a dataset split")
    _run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--gold-program", action="store_true", help="bypass the parser")
    p.add_argument("--generalization", action="store_true", help="also run the object/step suites")
    p.add_argument("--records-per-point", type=int, default=200)

    p = sub.add_parser("exec", help="run one instruction on one scene")
    _run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", help="scene file (line-delimited scenes)")
    p.add_argument("--index", type=int, default=0, help="scene or record index")
    p.add_argument("--record", action="store_true", help="take the initial scene of dataset record --index")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--instruction")
    src.add_argument("--program", help="s-expression; bypasses the parser")
    p.add_argument("--render-dir")
    p.add_argument("--trace")
    p.add_argument("--subgoals")

    p = sub.add_parser("repl", help="interactive session on one scene")
    _run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--script", help="read lines from this file instead of stdin")
    p.add_argument("--log", help="append every input line here (replayable with --script)")
    p.add_argument("--render-dir")

    p = sub.add_parser("render", help="rasterize a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--out", required=True)
    return ap


_TRAIN_KEYS = ("batch_size", "n_samples", "enum_epochs", "enum_cap", "patience", "val_size", "lr_final_fraction", "parser_warmup_epochs", "entropy_weight")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = RunConfig.from_dict(json.load(fh))
    for key in ("seed", "data", "out", "count", "objects", "steps", "complex_fraction", "stage"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    t = cfg.train.to_dict()
    for key in _TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            t[key] = val
    if getattr(args, "epochs", None):
        try:
            t["epochs"] = [int(e) for e in args.epochs.split(",")]
        except ValueError:
            raise UsageError(f"bad --epochs {args.epochs!r}") from None
        if len(t["epochs"]) != 3:
            raise UsageError("--epochs needs three comma-separated values")
    for group, val in getattr(args, "lr", None) or []:
        if group not in t["lr"]:
            raise UsageError(f"unknown parameter group {group!r}")
        t["lr"][group] = val
    loss = t["loss"]
    if getattr(args, "beta", None) is not None:
        loss["beta"] = args.beta
    if getattr(args, "norm", None) is not None:
        loss["norm"] = args.norm
    t["seed"] = cfg.seed
    try:
        cfg.train = TrainConfig.from_dict(t)
        LossConfig(**loss)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    if cfg.count < 1:
        raise UsageError("--count must be positive")
    return cfg


def archive_config(cfg: RunConfig, directory: str, command: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": command, **cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(args, text: str, record) -> None:
    print(json.dumps(record, sort_keys=True) if args.json else text)


def _load_split(data_dir: str, split: str):
    records = ig.load_dataset(os.path.join(data_dir, "dataset.jsonl"))
    manifest = ig.load_manifest(os.path.join(data_dir, "manifest.json"))
    if split == "all":
        return records, manifest
    return [records[i] for i in manifest[split]], manifest


# -- commands ------------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    dc = cfg.dataset_config()
    records = ig.generate_dataset(cfg.seed, cfg.count, dc)
    split = ig.stratified_split(records, cfg.seed)
    os.makedirs(cfg.data, exist_ok=True)
    ig.save_dataset(os.path.join(cfg.data, "dataset.jsonl"), records)
    ig.save_manifest(os.path.join(cfg.data, "manifest.json"), cfg.seed, dc, cfg.count, split)
    archive_config(cfg, cfg.data, "gen")
    _emit(args, f"wrote {len(records)} records to {cfg.data} (train {len(split[0])}, test {len(split[1])})",
          {"records": len(records), "train": len(split[0]), "test": len(split[1]), "dir": cfg.data})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    stages = cfg.stages()
    train, _ = _load_split(cfg.data, "train")
    archive_config(cfg, cfg.out, "train")
    log = None if args.json else (lambda msg: print(msg, file=sys.stderr))
    models, summaries, curve = run_curriculum(train, cfg.train, stages, cfg.out, evaluate_fn=mt.mean_iou_m, log=log)
    write_curve(os.path.join(cfg.out, f"curve_stage{stages[0]}-{stages[-1]}.csv"), curve)
    test, _ = _load_split(cfg.data, "test")
    report = mt.evaluate(models, test)
    with open(os.path.join(cfg.out, f"report_stage{stages[-1]}.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(report.to_jsonl())
    if args.json:
        print(json.dumps({"stages": summaries, "report": report.records()}, sort_keys=True))
    else:
        for s in summaries:
            print(f"stage {s['stage']}: {s['epochs']} epochs, best val IoU-M {s['best_val']:.3f}")
        print(report.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    models, _ = Models.load(args.checkpoint, cfg.train.reasoner)
    records, _ = _load_split(cfg.data, args.split)
    report = mt.evaluate(models, records, use_gold_program=args.gold_program)
    out = {"report": report.records()}
    text = report.table()
    if args.generalization:
        gcfg = mt.GeneralizationConfig(records_per_point=args.records_per_point)
        curves = mt.generalization_suite(models, gcfg)
        out["generalization"] = mt.curves_to_records(curves)
        lines = [f"{axis:>8} {p.x:>3}  iou_m {p.iou_m:.3f} +- {p.ci95:.3f}  (n={p.count})" for axis, pts in curves.items() for p in pts]
        text += "\n" + "\n".join(lines)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(report.to_jsonl())
            for rec in out.get("generalization", []):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        archive_config(cfg, args.out, "eval")
    _emit(args, text, out)
    return EXIT_OK


def _scene_arg(args, cfg: RunConfig) -> bw.Scene:
    if getattr(args, "record", False):
        records = ig.load_dataset(os.path.join(cfg.data, "dataset.jsonl"))
        return records[args.index].scene_I
    if not args.scene:
        raise UsageError("need --scene or --record")
    scenes = bw.load_scenes(args.scene)
    if not 0 <= args.index < len(scenes):
        raise IndexError(f"scene index {args.index} out of range ({len(scenes)} scenes)")
    return scenes[args.index]


def run_instruction(models: Models, scene: bw.Scene, instruction: str | None = None, program=None, trace=None):
    """Parse (unless ``program`` is given), ground and execute; returns program, grounding, goals, world."""
    if program is None:
        program = infer_program(models.splitter, models.parser, instruction)
    typecheck(program)
    with tc.no_grad():
        gp = ground(program, scene, models.concepts, step_fn(models.action), trace=trace)
        goals, world = execute_program(models.action, gp, scene.world())
    return program, gp, goals, world


def cmd_exec(args) -> int:
    cfg = resolve_config(args)
    models, _ = Models.load(args.checkpoint, cfg.train.reasoner)
    scene = _scene_arg(args, cfg)
    program = program_from_sexpr(args.program) if args.program else None
    trace = [] if args.trace else None
    program, gp, goals, world = run_instruction(models, scene, args.instruction, program, trace)
    after = scene.with_world(world)
    if args.render_dir:
        os.makedirs(args.render_dir, exist_ok=True)
        bw.render(scene, os.path.join(args.render_dir, "before.png"))
        bw.render(after, os.path.join(args.render_dir, "after.png"))
    if args.trace:
        write_trace(args.trace, trace)
    if args.subgoals:
        write_subgoals(args.subgoals, goals)
    rec = {
        "program": to_sexpr(program),
        "grounding": [list(t) for t in gp.triples()],
        "subgoals": [g.to_dict(k) for k, g in enumerate(goals)],
    }
    lines = [rec["program"]]
    lines += [f"step {k}: {a} subject={s} reference={r}" for k, (s, r, a) in enumerate(gp.triples())]
    lines += [f"goal {k}: object {g.object_id} -> {_fmt(g.target)}" for k, g in enumerate(goals)]
    _emit(args, "\n".join(lines), rec)
    return EXIT_OK


def _fmt(loc: bw.Location) -> str:
    return "[" + " ".join(f"{v:.3f}" for v in loc.as_array()) + "]"


def world_diff(before: dict, after: dict, scene: bw.Scene) -> list[str]:
    out = []
    for o in scene.objects:
        if before[o.id] != after[o.id]:
            out.append(f"{o.id} {o.color} {o.shape}: {_fmt(before[o.id])} -> {_fmt(after[o.id])}")
    return out


class Session:
    """REPL state: an initial scene and the current one."""

    def __init__(self, models: Models, scene: bw.Scene, render_dir: str | None = None):
        self.models = models
        self.initial = scene
        self.scene = scene
        self.render_dir = render_dir
        self.turn = 0

    def handle(self, line: str) -> tuple[bool, list[str]]:
        """Process one input line; returns (keep going, output lines)."""
        line = line.strip()
        if not line:
            return True, []
        if line == ":quit":
            return False, []
        if line == ":reset":
            self.scene = self.initial
            return True, ["scene reset"]
        if line.startswith(":scene"):
            path = line[len(":scene"):].strip()
            try:
                self.initial = self.scene = bw.load_scenes(path)[0]
            except (OSError, ValueError, KeyError, IndexError) as e:
                return True, [f"cannot load scene: {e}"]
            return True, [f"loaded {len(self.scene)} objects"]
        if line.startswith(":"):
            return True, [f"unknown directive {line.split()[0]}"]
        try:
            program, gp, _, world = run_instruction(self.models, self.scene, line)
        except (ValueError, TruncationError, DslTypeError) as e:
            return True, [f"cannot run: {e}"]
        before = self.scene.world()
        self.scene = self.scene.with_world(world)
        self.turn += 1
        out = [to_sexpr(program)] + (world_diff(before, world, self.scene) or ["no change"])
        if self.render_dir:
            os.makedirs(self.render_dir, exist_ok=True)
            path = os.path.join(self.render_dir, f"turn_{self.turn:03d}.png")
            bw.render(self.scene, path)
            out.append(f"rendered {path}")
        return True, out


def cmd_repl(args) -> int:
    cfg = resolve_config(args)
    models, _ = Models.load(args.checkpoint, cfg.train.reasoner)
    session = Session(models, _scene_arg(args, cfg), args.render_dir)
    source = open(args.script, encoding="utf-8") if args.script else sys.stdin
    interactive = source is sys.stdin and sys.stdin.isatty()
    log = open(args.log, "a", encoding="utf-8") if args.log else None
    try:
        while True:
            if interactive:
                print("> ", end="", flush=True)
            line = source.readline()
            if not line:
                break
            if log is not None:
                log.write(line if line.endswith("\n") else line + "\n")
            more, out = session.handle(line)
            for o in out:
                print(o)
            if not more:
                break
    finally:
        if log is not None:
            log.close()
        if source is not sys.stdin:
            source.close()
    return EXIT_OK


def cmd_render(args) -> int:
    scenes = bw.load_scenes(args.scene)
    if not 0 <= args.index < len(scenes):
        raise IndexError(f"scene index {args.index} out of range ({len(scenes)} scenes)")
    bw.render(scenes[args.index], args.out, args.size)
    print(args.out)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "exec": cmd_exec, "repl": cmd_repl, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TruncationError as e:
        print(f"parse failed: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, KeyError, IndexError, ig.ParseError, SexprError, DslTypeError, ig.GenerationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
