"""Final-scene loss, REINFORCE with a mean baseline, and the three-stage curriculum."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import blocksworld as bw
from . import tensorcore as tc
from .actsim import ActionModel, soft_execute, soft_execute_moves
from .instgen import DatasetRecord, lex
from .langreason import (
    ParserModel,
    SplitterModel,
    TruncationError,
    Vocabulary,
    content_tokens,
    program_to_decisions,
    segments_from_cuts,
)
from .mpdsl import Idle, Lexicon, ManipulationProgram, compose, concept_names, enumerate_programs
from .tensorcore import Value
from .visreason import ConceptEmbeddings, ReasonerConfig


# -- loss --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    norm: str = "l1"

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and non-negative")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")


def soft_iou(pred: Value, gold: np.ndarray) -> Value:
    """IoU of predicted boxes (..., N, 5) against gold boxes (N, 5); degenerate predictions count as empty."""
    ix = (tc.minimum(pred[..., 2], gold[:, 2]) - tc.maximum(pred[..., 0], gold[:, 0])).relu()
    iy = (tc.minimum(pred[..., 3], gold[:, 3]) - tc.maximum(pred[..., 1], gold[:, 1])).relu()
    inter = ix * iy
    area_p = (pred[..., 2] - pred[..., 0]).relu() * (pred[..., 3] - pred[..., 1]).relu()
    area_g = (gold[:, 2] - gold[:, 0]) * (gold[:, 3] - gold[:, 1])
    return inter / tc.maximum(area_p + area_g - inter, 1e-12)


def loss_act(pred, gold, cfg: LossConfig = LossConfig()) -> Value:
    """Sum over objects of ``||pred - gold|| + beta * (1 - IoU)``; leading batch axes are kept."""
    pred = tc.lift(pred)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape[-2:] != gold.shape:
        raise ValueError(f"prediction {pred.shape} does not match gold {gold.shape}")
    diff = pred - gold
    if cfg.norm == "l1":
        dist = diff.abs().sum(axis=-1)
    else:
        sq = (diff * diff).sum(axis=-1)
        # exact zero at zero distance, finite gradient everywhere
        dist = tc.where(sq.data > 0, tc.maximum(sq, 1e-300).sqrt(), 0.0)
    total = dist.sum(axis=-1)
    if cfg.beta:
        total = total + (1.0 - soft_iou(pred, gold)).sum(axis=-1) * cfg.beta
    return total


def loss_act_worlds(pred: dict, gold: dict, cfg: LossConfig = LossConfig()) -> float:
    """Loss between two WorldStates with identical id sets."""
    if set(pred) != set(gold):
        raise KeyError(f"id mismatch: {sorted(pred)} vs {sorted(gold)}")
    ids = sorted(gold)
    p = np.stack([pred[i].as_array() for i in ids])
    g = np.stack([gold[i].as_array() for i in ids])
    with tc.no_grad():
        return loss_act(Value(p), g, cfg).item()


def gold_final_locs(rec: DatasetRecord) -> np.ndarray:
    """Final locations in the initial scene's object order, matched by feature association."""
    match = bw.associate(rec.scene_I, rec.scene_F)
    return np.stack([rec.scene_F.by_id(match[i]).loc.as_array() for i in rec.scene_I.ids])


# -- REINFORCE ---------------------------------------------------------------------------------


def advantages(losses: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Per-sample ``r_k - b`` with reward ``-L`` and baseline the (weighted) mean reward."""
    losses = np.asarray(losses, dtype=np.float64)
    w = np.full(len(losses), 1.0 / len(losses)) if weights is None else np.asarray(weights, dtype=np.float64)
    rewards = -losses
    return rewards - float(np.dot(w, rewards))


def reinforce_surrogate(losses: Value, logp: Value, weights: np.ndarray | None = None, entropy_weight: float = 0.0) -> Value:
    """Scalar whose gradient is the baseline-corrected policy gradient of E[L] plus E[dL].

    With ``weights`` = the policy's own probabilities over an enumerated support
    this is the exact expectation; with uniform weights over samples it is the
    usual Monte-Carlo estimator.  ``entropy_weight`` adds a bonus on the
    policy's entropy that keeps exploration alive early on.
    """
    n = losses.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    # an entropy bonus is the policy gradient of lambda * log p treated as extra cost
    adv = advantages(losses.data + entropy_weight * logp.data, w)
    if weights is None and n > 1:
        # the sample mean includes the sample itself; rescaling gives the leave-one-out baseline
        adv = adv * (n / (n - 1))
    return (losses * w).sum() + (logp * (-adv * w)).sum()


# -- models ------------------------------------------------------------------------------------


@dataclass
class Models:
    vocab: Vocabulary
    parser: ParserModel
    splitter: SplitterModel
    concepts: ConceptEmbeddings
    action: ActionModel

    @classmethod
    def create(cls, vocab: Vocabulary, seed: int, reasoner: ReasonerConfig = ReasonerConfig()) -> "Models":
        rng = np.random.default_rng(seed)
        return cls(vocab, ParserModel(vocab, rng), SplitterModel(vocab, rng), ConceptEmbeddings(rng, reasoner), ActionModel(rng))

    def groups(self) -> dict[str, dict[str, Value]]:
        ce = self.concepts.named_parameters()
        return {
            "parser": self.parser.named_parameters(),
            "splitter": self.splitter.named_parameters(),
            "objects": {k: ce[k] for k in self.concepts.object_param_names()},
            "relations": {k: ce[k] for k in self.concepts.relation_param_names()},
            "action": self.action.named_parameters(),
        }

    def state(self) -> dict[str, np.ndarray]:
        return {f"{g}.{k}": p.data.copy() for g, ps in self.groups().items() for k, p in ps.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for g, ps in self.groups().items():
            for k, p in ps.items():
                key = f"{g}.{k}"
                if key not in state:
                    raise KeyError(f"checkpoint lacks {key}")
                if state[key].shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {key}")
                p.data = state[key].copy()

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for k, p in sorted(self.groups()[group].items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def save(self, directory, tag: str, meta: dict | None = None) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{tag}.ckpt.json")
        tc.save_arrays(path, self.state(), {"tag": tag, **(meta or {})})
        self.vocab.save(os.path.join(directory, "vocab.txt"))
        return path

    @classmethod
    def load(cls, path, reasoner: ReasonerConfig = ReasonerConfig()) -> tuple["Models", dict]:
        arrays, meta = tc.load_arrays(path)
        vocab = Vocabulary.load(os.path.join(os.path.dirname(os.path.abspath(path)), "vocab.txt"))
        models = cls.create(vocab, 0, reasoner)
        models.load_state(arrays)
        return models, meta


# -- training ----------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    n_samples: int = 8
    enum_epochs: int = 4
    enum_cap: int = 256
    epochs: tuple = (45, 10, 3)
    patience: int = 8
    val_size: int = 100
    lr: dict = field(default_factory=lambda: {"parser": 3e-3, "objects": 6e-3, "action": 6e-3, "relations": 6e-3, "splitter": 3e-3})
    lr_final_fraction: float = 0.2
    parser_warmup_epochs: int = 2
    entropy_weight: float = 0.05
    coverage_weight: float = 1.0
    rehearsal: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = list(self.epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        reasoner = ReasonerConfig(**d.pop("reasoner", {}))
        if "epochs" in d:
            d["epochs"] = tuple(d["epochs"])
        return cls(loss=loss, reasoner=reasoner, **d)


STAGE_GROUPS = {1: ("parser", "objects", "action"), 2: ("parser", "relations"), 3: ("splitter",)}
ALL_GROUPS = ("parser", "splitter", "objects", "relations", "action")


@dataclass
class TrainState:
    stage: int
    frozen: tuple
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)


def stage_records(records: Sequence[DatasetRecord], stage: int, rehearsal: bool = False) -> list[DatasetRecord]:
    """Training records of a stage; ``rehearsal`` keeps stage-1 records in stage 2."""
    if stage == 1:
        return [r for r in records if r.bucket == (1, "simple")]
    if stage == 2:
        keep = ("simple", "complex") if rehearsal else ("complex",)
        return [r for r in records if r.n_steps == 1 and r.bucket[1] in keep]
    if stage == 3:
        return list(records)
    raise ValueError(f"no stage {stage}")


class MissingBucketError(ValueError):
    pass


@dataclass
class _Example:
    rec: DatasetRecord
    tokens: list
    gold: np.ndarray
    support: list | None  # enumerated programs, or None to sample instead


def _prepare(rec: DatasetRecord, cap: int) -> _Example:
    """Enumerate the programs that use each keyword of the instruction exactly once.

    When no program covers the keywords, fall back to every program over them,
    or to sampling when that space exceeds ``cap``.
    """
    tokens = lex(rec.instruction)
    names = [t.concept.name for t in content_tokens(tokens) if t.concept is not None]
    lex_ = Lexicon.of(set(names))
    support = None
    if lex_.actions and (lex_.colors or lex_.shapes):
        want = Counter(names)
        support = [p for p in enumerate_programs(lex_) if Counter(concept_names(p)) == want] or None
        if support is None and len(lex_.actions) * _count_forms(lex_) ** 2 <= cap:
            support = list(enumerate_programs(lex_))
    return _Example(rec, tokens, gold_final_locs(rec), support)


def _count_forms(lex_: Lexicon) -> int:
    """Number of argument forms :func:`enumerate_objects` yields for ``lex_`` (two filters max)."""
    one = len(lex_.colors) + len(lex_.shapes)
    two = len(lex_.colors) * len(lex_.shapes)
    # a one-filter anchor leaves room for an optional outer filter, a two-filter anchor does not
    return one + two + len(lex_.relations) * (one * (1 + one) + two)


class Trainer:
    """Runs the curriculum stages on one set of models."""

    def __init__(self, models: Models, cfg: TrainConfig, log: Callable[[str], None] | None = None):
        self.models = models
        self.cfg = cfg
        self.log = log or (lambda msg: None)
        self.rng = np.random.default_rng(cfg.seed)
        self.state = TrainState(stage=0, frozen=ALL_GROUPS, seed=cfg.seed)
        self.completed: list[int] = []

    # one REINFORCE batch for single-step stages
    def _step_batch(self, batch: list[_Example], enum: bool, opts: dict[str, tc.Adam], entropy: float = 0.0) -> float:
        m = self.models
        forced_rows, forced_seq, forced_ex = [], [], []
        sample_rows, sample_ex = [], []
        for j, ex in enumerate(batch):
            if enum and ex.support is not None:
                for prog in ex.support:
                    forced_rows.append(j)
                    forced_seq.append(program_to_decisions(prog))
                    forced_ex.append(j)
            else:
                sample_rows += [j] * self.cfg.n_samples
                sample_ex += [j] * self.cfg.n_samples
        segments = [ex.tokens for ex in batch]
        decodes, logps, owners, enumerated = [], [], [], []
        if forced_rows:
            d, lp = m.parser.decode(segments, forced_rows, mode="forced", forced=forced_seq)
            decodes += d
            logps.append(lp)
            owners += forced_ex
            enumerated += [True] * len(d)
        if sample_rows:
            d, lp = m.parser.decode(segments, sample_rows, mode="sample", rng=self.rng)
            decodes += d
            logps.append(lp)
            owners += sample_ex
            enumerated += [False] * len(d)
        logp = tc.concat(logps, axis=0) if len(logps) > 1 else logps[0]
        owners = np.array(owners)
        total = Value(0.0)
        losses_seen = []
        for j, ex in enumerate(batch):
            idx = np.nonzero(owners == j)[0]
            progs = [decodes[i].program for i in idx]
            uniq = list(dict.fromkeys(progs))
            preds = self._execute_candidates(uniq, ex)
            lu = loss_act(preds, ex.gold, self.cfg.loss)
            where = np.array([uniq.index(p) for p in progs])
            lk = lu[where]
            lp = logp[idx]
            if enumerated[idx[0]]:
                w = np.exp(lp.data - lp.data.max())
                w = w / w.sum()
                # marginal likelihood of the enumerated set pulls mass away from programs outside it
                peak = float(lp.data.max())
                total = total - ((lp - peak).exp().sum().log() + peak) * self.cfg.coverage_weight
            else:
                w = None
            total = total + reinforce_surrogate(lk, lp, w, entropy)
            losses_seen.append(float(np.dot(w, lk.data)) if w is not None else float(lk.data.mean()))
        total = total * (1.0 / len(batch))
        total.backward()
        for o in opts.values():
            o.step()
        for ps in m.groups().values():
            for p in ps.values():
                p.grad = None
        return float(np.mean(losses_seen))

    def _execute_candidates(self, progs: list, ex: _Example) -> Value:
        m = self.models
        moves = [p for p in progs if not isinstance(p, Idle)]
        locs = ex.rec.scene_I.loc_array()
        if len(moves) == len(progs):
            return soft_execute_moves(progs, ex.rec.scene_I, m.concepts, m.action, self.cfg.reasoner)
        out = []
        for p in progs:
            if isinstance(p, Idle):
                out.append(Value(locs))
            else:
                out.append(soft_execute_moves([p], ex.rec.scene_I, m.concepts, m.action, self.cfg.reasoner)[0])
        return tc.stack(out, axis=0)

    def _check_finite(self, groups: Sequence[str]) -> None:
        all_groups = self.models.groups()
        for g in groups:
            for k, p in all_groups[g].items():
                if not np.all(np.isfinite(p.data)):
                    raise FloatingPointError(f"non-finite value in {g}.{k}")

    def _make_opts(self, groups: Sequence[str]) -> dict[str, tc.Adam]:
        all_groups = self.models.groups()
        return {g: tc.Adam(all_groups[g], lr=self.cfg.lr[g]) for g in groups}

    def mark_completed(self, stage: int) -> None:
        """Declare stages up to ``stage`` done, e.g. after loading their checkpoint."""
        self.completed = sorted(set(self.completed) | set(range(1, stage + 1)))

    def _check_stage(self, stage: int) -> None:
        if stage > 1 and (stage - 1) not in self.completed:
            raise RuntimeError(f"stage {stage} needs a completed stage {stage - 1}")

    def _split_val(self, records: list[DatasetRecord]) -> tuple[list, list]:
        order = self.rng.permutation(len(records))
        n_val = min(self.cfg.val_size, len(records) // 5)
        val = [records[i] for i in sorted(order[:n_val])]
        train = [records[i] for i in sorted(order[n_val:])]
        return train, val

    def run_stage(self, stage: int, records: Sequence[DatasetRecord], evaluate_fn=None, curve=None) -> dict:
        """Train one stage; returns a small summary.  ``evaluate_fn(models, records) -> iou_m``."""
        self._check_stage(stage)
        # each stage draws from its own stream so a resumed run replays exactly
        self.rng = np.random.default_rng([self.cfg.seed, stage])
        recs = stage_records(records, stage, self.cfg.rehearsal)
        if not recs:
            raise MissingBucketError(f"stage {stage} has no training records")
        groups = STAGE_GROUPS[stage]
        self.state = TrainState(stage, tuple(g for g in ALL_GROUPS if g not in groups), 0, self.cfg.seed, [])
        frozen_hashes = {g: self.models.group_hash(g) for g in self.state.frozen}
        train, val = self._split_val(recs)
        opts = self._make_opts(groups)
        max_epochs = self.cfg.epochs[stage - 1]
        base_lr = {g: o.lr for g, o in opts.items()}
        best, best_state, stale = -np.inf, None, 0
        if stage < 3:
            examples = [_prepare(r, self.cfg.enum_cap) for r in train]
        else:
            examples = [(lex(r.instruction), gold_final_locs(r), r) for r in train]
            self._seg_cache: dict = {}
        for epoch in range(max_epochs):
            t0 = time.perf_counter()
            frac = epoch / max(1, max_epochs - 1)
            for g, o in opts.items():
                o.lr = base_lr[g] * self.cfg.lr_final_fraction**frac
            order = self.rng.permutation(len(examples))
            losses = []
            for b in range(0, len(order), self.cfg.batch_size):
                batch = [examples[i] for i in order[b : b + self.cfg.batch_size]]
                if stage < 3:
                    active = {g: o for g, o in opts.items() if g != "parser" or epoch >= self.cfg.parser_warmup_epochs}
                    entropy = self.cfg.entropy_weight * (1.0 - frac)
                    losses.append(self._step_batch(batch, epoch < self.cfg.enum_epochs, active, entropy))
                else:
                    losses.append(self._splitter_batch(batch, opts))
                self._check_finite(groups)
            score = evaluate_fn(self.models, val) if evaluate_fn is not None else -float(np.mean(losses))
            row = {"stage": stage, "epoch": epoch, "loss": float(np.mean(losses)), "val": float(score), "seconds": time.perf_counter() - t0}
            self.state.history.append(row)
            self.state.epoch = epoch
            if curve is not None:
                curve.append(row)
            self.log(f"stage {stage} epoch {epoch}: loss {row['loss']:.4f} val {score:.4f} ({row['seconds']:.1f}s)")
            if score > best + 1e-4:
                best, best_state, stale = score, self.models.state(), 0
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    break
        if best_state is not None:
            self.models.load_state(best_state)
        for g, h in frozen_hashes.items():
            if self.models.group_hash(g) != h:
                raise AssertionError(f"frozen group {g} changed during stage {stage}")
        self.completed.append(stage)
        return {"stage": stage, "epochs": self.state.epoch + 1, "best_val": float(best), "n_train": len(train)}

    # stage 3: the parser, concepts and actions are frozen; cuts are the only decisions
    def _splitter_batch(self, batch, opts) -> float:
        m = self.models
        n = self.cfg.n_samples
        total = Value(0.0)
        seen = []
        for tokens, gold, rec in batch:
            cuts, logp = m.splitter.run(tokens, n, "sample", self.rng)
            losses = np.array([self._cut_loss(tokens, tuple(c), rec, gold) for c in cuts])
            adv = advantages(losses) * (n / (n - 1) if n > 1 else 1.0)
            total = total + (logp * (-adv / n)).sum()
            seen.append(losses.mean())
        total = total * (1.0 / len(batch))
        total.backward()
        for o in opts.values():
            o.step()
        for ps in m.groups().values():
            for p in ps.values():
                p.grad = None
        return float(np.mean(seen))

    def _cut_loss(self, tokens, cuts: tuple, rec, gold) -> float:
        key = (rec.instruction, id(rec), cuts)
        if key in self._seg_cache:
            return self._seg_cache[key]
        m = self.models
        with tc.no_grad():
            segments = segments_from_cuts(tokens, cuts)
            try:
                decodes, _ = m.parser.decode(segments)
                program = compose([ManipulationProgram((d.program,)) for d in decodes])
                pred = soft_execute(program, rec.scene_I, m.concepts, m.action, self.cfg.reasoner)
                loss = loss_act(pred, gold, self.cfg.loss).item()
            except TruncationError:
                loss = float("nan")
        if not np.isfinite(loss):
            loss = loss_act(Value(rec.scene_I.loc_array()), gold, self.cfg.loss).item()
        self._seg_cache[key] = loss
        return loss


def write_curve(path, rows: list[dict]) -> None:
    cols = ["stage", "epoch", "loss", "val"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (round(v, 6) if isinstance(v, float) else v) for k, v in r.items()})


def checkpoint_path(directory, stage: int) -> str:
    return os.path.join(directory, f"stage{stage}.ckpt.json")


def run_curriculum(
    records: Sequence[DatasetRecord],
    cfg: TrainConfig,
    stages: Sequence[int] = (1, 2, 3),
    out_dir=None,
    models: Models | None = None,
    evaluate_fn=None,
    log: Callable[[str], None] | None = None,
) -> tuple[Models, list[dict], list[dict]]:
    """Run the given consecutive stages, checkpointing after each one.

    A run starting at stage k > 1 resumes from ``out_dir/stage{k-1}.ckpt.json``
    unless ``models`` is given.  Returns the models, per-stage summaries and
    the training curve rows.
    """
    stages = sorted(stages)
    if stages != list(range(stages[0], stages[-1] + 1)):
        raise ValueError(f"stages must be consecutive: {stages}")
    first = stages[0]
    if models is None:
        if first == 1:
            models = Models.create(Vocabulary.build([r.instruction for r in records]), cfg.seed, cfg.reasoner)
        else:
            prev = checkpoint_path(out_dir or ".", first - 1)
            if not os.path.exists(prev):
                raise FileNotFoundError(f"stage {first} needs the stage {first - 1} checkpoint {prev}")
            models, _ = Models.load(prev, cfg.reasoner)
    trainer = Trainer(models, cfg, log)
    trainer.mark_completed(first - 1)
    summaries, curve = [], []
    for stage in stages:
        summaries.append(trainer.run_stage(stage, records, evaluate_fn, curve))
        if out_dir is not None:
            models.save(out_dir, f"stage{stage}", {"stage": stage, "config": cfg.to_dict()})
    return models, summaries, curve
