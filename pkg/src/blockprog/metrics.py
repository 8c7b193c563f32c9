"""Hard-inference evaluation: IoU, IoU over moved objects, program and grounding accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import blocksworld as bw
from . import instgen as ig
from . import tensorcore as tc
from .actsim import execute_program, step_fn
from .langreason import infer_program
from .mpdsl import ManipulationProgram
from .visreason import GroundedProgram, ground

METRIC_NAMES = ("iou", "iou_m", "action", "subject", "predicate", "identification", "placement")


@dataclass
class RecordResult:
    bucket: tuple
    iou: float
    iou_m: float
    action: float
    subject: float
    predicate: float
    identification: float
    placement: float


@dataclass
class Prediction:
    program: ManipulationProgram
    grounded: GroundedProgram
    world: dict
    subgoals: list


def predict(models, scene: bw.Scene, instruction: str | None = None, program: ManipulationProgram | None = None) -> Prediction:
    """Argmax inference (or a given program), hard grounding and learned execution."""
    if program is None:
        program = infer_program(models.splitter, models.parser, instruction)
    gp = ground(program, scene, models.concepts, step_fn(models.action))
    goals, world = execute_program(models.action, gp, scene.world())
    return Prediction(program, gp, world, goals)


def gold_world(rec: ig.DatasetRecord) -> dict:
    match = bw.associate(rec.scene_I, rec.scene_F)
    return {i: rec.scene_F.by_id(match[i]).loc for i in rec.scene_I.ids}


def _safe_iou(a: bw.Location, b: bw.Location) -> float:
    return bw.iou(a.b, b.b)


def score_record(rec: ig.DatasetRecord, grounded: GroundedProgram, pred: dict, gold: dict | None = None) -> RecordResult:
    gold = gold_world(rec) if gold is None else gold
    ids = sorted(gold)
    ious = {i: _safe_iou(pred[i], gold[i]) for i in ids}
    moved = sorted({s for s, _, _ in rec.gold_grounding})
    steps = [s for s in grounded.steps if not s.is_idle]
    n_gold = len(rec.gold_grounding)
    act = subj = ref = 0.0
    for k, (gs, gr, ga) in enumerate(rec.gold_grounding):
        if k < len(grounded.steps) and not grounded.steps[k].is_idle:
            st = grounded.steps[k]
            act += st.action == ga
            subj += st.subject == gs
            ref += st.reference == gr
    ident = float([s.subject for s in steps] == [g[0] for g in rec.gold_grounding])
    placed = []
    for i in moved:
        cx, cy = pred[i].center
        x1, y1, x2, y2 = gold[i].b
        placed.append(float(x1 <= cx <= x2 and y1 <= cy <= y2))
    return RecordResult(
        rec.bucket,
        float(np.mean([ious[i] for i in ids])),
        float(np.mean([ious[i] for i in moved])) if moved else 1.0,
        act / n_gold,
        subj / n_gold,
        ref / n_gold,
        ident,
        float(np.mean(placed)) if placed else 1.0,
    )


def _bucket_name(bucket) -> str:
    steps, cx = bucket
    return f"{'single' if steps == 1 else f'{steps}-step'}/{cx}"


@dataclass
class MetricReport:
    """Means per bucket and overall, each with its record count."""

    rows: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: Sequence[RecordResult]) -> "MetricReport":
        groups: dict[str, list[RecordResult]] = {"all": list(results)}
        for r in results:
            groups.setdefault(_bucket_name(r.bucket), []).append(r)
        rows = {}
        for name in sorted(groups):
            rs = groups[name]
            row = {m: float(np.mean([getattr(r, m) for r in rs])) if rs else float("nan") for m in METRIC_NAMES}
            row["count"] = len(rs)
            rows[name] = row
        return cls(rows)

    def __getitem__(self, key) -> dict:
        return self.rows[key]

    def records(self) -> list[dict]:
        return [{"bucket": k, **{m: round(v, 6) if isinstance(v, float) else v for m, v in row.items()}} for k, row in self.rows.items()]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def table(self) -> str:
        head = ["bucket", "n"] + list(METRIC_NAMES)
        lines = ["  ".join(f"{h:>14}" if i == 0 else f"{h:>8}" for i, h in enumerate(head))]
        for k, row in self.rows.items():
            cells = [f"{k:>14}", f"{row['count']:>8d}"] + [f"{row[m]:>8.3f}" for m in METRIC_NAMES]
            lines.append("  ".join(cells))
        return "\n".join(lines)


def evaluate_records(models, records: Sequence[ig.DatasetRecord], use_gold_program: bool = False) -> list[RecordResult]:
    out = []
    with tc.no_grad():
        for rec in records:
            pred = predict(models, rec.scene_I, rec.instruction, rec.gold_program if use_gold_program else None)
            out.append(score_record(rec, pred.grounded, pred.world))
    return out


def evaluate(models, records: Sequence[ig.DatasetRecord], use_gold_program: bool = False) -> MetricReport:
    return MetricReport.from_results(evaluate_records(models, records, use_gold_program))


def mean_iou_m(models, records: Sequence[ig.DatasetRecord]) -> float:
    return float(np.mean([r.iou_m for r in evaluate_records(models, records)])) if records else 0.0


# -- generalization ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    x: int
    iou_m: float
    count: int
    ci95: float


@dataclass
class GeneralizationConfig:
    objects: tuple = (5, 6, 7, 8, 9, 10)
    steps: tuple = (1, 2, 3, 4, 5, 6, 7)
    records_per_point: int = 200
    seed: int = 12345
    base_objects: tuple = (3, 5)
    complex_fraction: float = 0.5


def _point(models, records, x) -> CurvePoint:
    vals = np.array([r.iou_m for r in evaluate_records(models, records)])
    ci = 1.96 * vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else float("nan")
    return CurvePoint(x, float(vals.mean()), len(vals), float(ci))


def suite_records(cfg: GeneralizationConfig, axis: str, x: int) -> list[ig.DatasetRecord]:
    if axis == "objects":
        dc = ig.DatasetConfig(n_objects=(x, x), n_steps=(1, 1), complex_fraction=cfg.complex_fraction, step_weights=(1.0,))
    else:
        dc = ig.DatasetConfig(n_objects=cfg.base_objects, n_steps=(x, x), complex_fraction=cfg.complex_fraction, step_weights=(1.0,))
    return ig.generate_dataset(cfg.seed + 1000 * (axis == "steps") + x, cfg.records_per_point, dc)


def generalization_suite(models, cfg: GeneralizationConfig = GeneralizationConfig()) -> dict[str, list[CurvePoint]]:
    """IoU-M against object count and against step count on fresh records."""
    return {
        "objects": [_point(models, suite_records(cfg, "objects", n), n) for n in cfg.objects],
        "steps": [_point(models, suite_records(cfg, "steps", k), k) for k in cfg.steps],
    }


def curves_to_records(curves: dict) -> list[dict]:
    return [{"axis": axis, **asdict(p)} for axis, pts in curves.items() for p in pts]
