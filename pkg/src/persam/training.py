"""Optimizer, schedule, training loop, model selection and cross-validation."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff.tensor import no_grad
from .data.bags import BagSet
from .data.synth import SyntheticDataset, split_folds

logger = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A loss went non-finite; carries where it happened."""

    def __init__(self, epoch: int, batch: int, component: str, value: float):
        self.epoch, self.batch, self.component, self.value = epoch, batch, component, value
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {component}={value}")


class SelectionError(ValueError):
    pass


REFERENCE_LRS = {"f": 1e-4, "g": 4e-6, "enc": 2e-4, "agg": 2e-4, "clf": 2e-4}
# 5x the reference rates, except faster clinical and aggregator groups
DESK_LRS = {"f": 5e-4, "g": 2e-4, "enc": 1e-3, "agg": 3e-3, "clf": 1e-3}


@dataclass
class OptimConfig:
    lrs: dict[str, float] = field(default_factory=lambda: dict(REFERENCE_LRS))
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    epochs: int = 9
    step_every: int = 3  # multiply every lr by `gamma` after this many epochs
    gamma: float = 0.1
    schedule: bool = True
    batch_size: int = 1  # bags whose summed loss makes one step
    augment: bool = False
    inject_nan_at: int | None = None  # test hook: global step whose loss is replaced by NaN

    def __post_init__(self):
        bad = {g: lr for g, lr in self.lrs.items() if not lr > 0}
        if bad:
            raise ValueError(f"learning rates must be positive: {bad}")

    def lr_at(self, epoch: int, group: str) -> float:
        """Learning rate for 1-indexed ``epoch``."""
        base = self.lrs[group]
        if not self.schedule:
            return base
        return base * self.gamma ** ((epoch - 1) // self.step_every)

    @classmethod
    def reference(cls, **kw) -> "OptimConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "OptimConfig":
        """CPU-scale preset: 12 epochs with a single decay after epoch 9."""
        base = dict(lrs=dict(DESK_LRS), epochs=12, step_every=9)
        base.update(kw)
        return cls(**base)

    @classmethod
    def clinical_mlp(cls, **kw) -> "OptimConfig":
        base = dict(lrs={g: 1e-3 for g in REFERENCE_LRS}, epochs=500, schedule=False, batch_size=16)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return cls(**d)


class SGD:
    """Momentum SGD with optional Nesterov and L2 weight decay on every parameter.

    Update per parameter ``p`` with gradient ``g``:
    ``d = g + wd * p``; ``buf = mu * buf + d`` (``buf = d`` first);
    ``step = d + mu * buf`` if nesterov else ``buf``; ``p -= lr * step``.
    """

    def __init__(self, named_params, cfg: OptimConfig):
        self.params = [(name, p, group) for name, p, group in named_params]
        missing = sorted({g for _, _, g in self.params if g not in cfg.lrs})
        if missing:
            raise ValueError(f"no learning rate for parameter groups {missing}")
        self.cfg = cfg
        self.buffers: dict[str, np.ndarray] = {}
        self.epoch = 1

    def step(self) -> None:
        mu, wd = self.cfg.momentum, self.cfg.weight_decay
        for name, p, group in self.params:
            d = p.grad + wd * p.data if wd else p.grad.copy()
            if mu:
                buf = self.buffers.get(name)
                if buf is None:
                    buf = self.buffers[name] = d.copy()
                else:
                    buf *= mu
                    buf += d
                d = d + mu * buf if self.cfg.nesterov else buf
            p.data -= self.cfg.lr_at(self.epoch, group) * d

    def zero_grad(self) -> None:
        for _, p, _ in self.params:
            p.grad[...] = 0.0

    def touched_groups(self) -> set[str]:
        return {g for _, _, g in self.params}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lrs: dict[str, float]
    state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    rng_state: dict | None = field(repr=False, default=None)


@dataclass
class Evaluation:
    bag_probs: np.ndarray  # (n_bags, C)
    bag_case_ids: np.ndarray
    case_ids: list[int]
    case_probs: np.ndarray
    case_pred: np.ndarray
    case_labels: np.ndarray
    loss: float

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.case_pred == self.case_labels)) if len(self.case_ids) else float("nan")


def _batch_loss(model, bags):
    if hasattr(model, "batch_loss") and len(bags) > 1:
        return model.batch_loss(bags)
    total = None
    parts_sum: dict[str, float] = {}
    for bag in bags:
        out = model.forward(bag)
        parts = model.loss_components(out, bag)
        for k, v in parts.items():
            parts_sum[k] = parts_sum.get(k, 0.0) + v.item()
        loss = sum(parts.values())
        total = loss if total is None else total + loss
    return total, parts_sum


def _bag_loss(model, bag) -> tuple[np.ndarray, float]:
    out = model.forward(bag)
    return out.y_hat.data.copy(), model.loss(out, bag).item()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PERSAM_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model, bags, workers: int | None = None) -> Evaluation:
    """Per-bag probabilities, per-case mean-probability predictions and mean bag loss.

    Ties in the case-level argmax go to the lowest class index. Results do not
    depend on the number of workers.
    """
    bag_list = list(bags)
    was_training = model.training
    model.eval()
    workers = workers or worker_count()

    def run(bag):
        with no_grad():
            return _bag_loss(model, bag)

    try:
        if workers > 1 and len(bag_list) > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(run, bag_list))
        else:
            results = [run(b) for b in bag_list]
    finally:
        model.train(was_training)
    probs = np.array([r[0] for r in results]) if results else np.zeros((0, 0))
    losses = np.array([r[1] for r in results])
    case_of = np.array([b.case_id for b in bag_list])
    labels_of = {b.case_id: b.label for b in bag_list}
    return summarize_bags(probs, case_of, labels_of, float(losses.mean()) if len(losses) else float("nan"))


def summarize_bags(probs: np.ndarray, case_of: np.ndarray, labels_of: dict, loss: float = float("nan")) -> Evaluation:
    case_ids = sorted(set(int(c) for c in case_of))
    case_probs = np.array([probs[case_of == cid].mean(axis=0) for cid in case_ids]) if case_ids else probs
    case_pred = np.argmax(case_probs, axis=1) if case_ids else np.zeros(0, dtype=int)
    case_labels = np.array([labels_of[cid] for cid in case_ids])
    return Evaluation(probs, case_of, case_ids, case_probs, case_pred, case_labels, loss)


def train(model, train_bags: BagSet, val_bags, cfg: OptimConfig, seed: int = 0, log=None,
          min_epoch: int = 4) -> list[EpochRecord]:
    """Optimize every parameter group jointly; returns one record per epoch.

    ``log`` receives JSON-ready dicts ``{epoch, split, loss, accuracy}``.
    Deterministic given ``seed`` (bag order and augmentation draw from it).
    Parameter snapshots are kept only on the record :func:`select_model`
    would currently choose, so long runs stay small.
    """
    if len(train_bags) == 0 or len(val_bags) == 0:
        raise ValueError("training needs non-empty train and validation bags")
    rng = np.random.default_rng(seed)
    opt = SGD(model.named_parameters(), cfg)
    history: list[EpochRecord] = []
    step = 0
    best: EpochRecord | None = None
    min_epoch = min(min_epoch, cfg.epochs)
    for epoch in range(1, cfg.epochs + 1):
        opt.epoch = epoch
        model.train()
        order = rng.permutation(len(train_bags))
        total, count = 0.0, 0
        for b0 in range(0, len(order), cfg.batch_size):
            aug = rng if cfg.augment else None
            bags = [train_bags.bag(int(i), aug) for i in order[b0:b0 + cfg.batch_size]]
            loss, parts = _batch_loss(model, bags)
            value = loss.item()
            if cfg.inject_nan_at is not None and step == cfg.inject_nan_at:
                value, parts = float("nan"), {**parts, "injected": float("nan")}
            if not math.isfinite(value):
                bad = next((k for k, v in parts.items() if not math.isfinite(v)), "total")
                raise NumericalError(epoch, b0 // cfg.batch_size, bad, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value
            count += len(bags)
            step += 1
        train_loss = total / count
        ev = evaluate(model, val_bags)
        rec = EpochRecord(epoch, train_loss, ev.loss, ev.accuracy,
                          {g: cfg.lr_at(epoch, g) for g in cfg.lrs}, {},
                          copy.deepcopy(getattr(getattr(model, "dropout_rng", None), "state", None)))
        if epoch >= min_epoch and (best is None or ev.loss < best.val_loss):
            if best is not None:
                best.state = {}
            rec.state = model.state_dict()
            best = rec
        history.append(rec)
        if log is not None:
            log({"epoch": epoch, "split": "train", "loss": train_loss, "accuracy": None})
            log({"epoch": epoch, "split": "val", "loss": ev.loss, "accuracy": ev.accuracy})
        logger.info("epoch %d train %.4f val %.4f acc %.3f", epoch, train_loss, ev.loss, ev.accuracy)
    return history


def select_model(history, min_epoch: int = 4):
    """Earliest epoch >= ``min_epoch`` (1-indexed) with the smallest validation loss.

    Accepts :class:`EpochRecord` objects or plain validation-loss lists.
    """
    if len(history) < min_epoch:
        raise SelectionError(f"need at least {min_epoch} epochs to select, got {len(history)}")
    losses = [h.val_loss if isinstance(h, EpochRecord) else float(h) for h in history]
    best = min(range(min_epoch - 1, len(losses)), key=lambda i: (losses[i], i))
    return history[best] if isinstance(history[best], EpochRecord) else best + 1


@dataclass
class CVRow:
    kind: str
    accuracies: list[float]
    mean: float
    stderr: float
    stderr_defined: bool


def summarize_folds(kind: str, accuracies) -> CVRow:
    acc = [float(a) for a in accuracies]
    mean = float(np.mean(acc))
    if len(acc) < 2:
        return CVRow(kind, acc, mean, 0.0, False)
    if len(set(acc)) == 1:  # np.std leaves rounding residue here
        return CVRow(kind, acc, acc[0], 0.0, True)
    return CVRow(kind, acc, mean, float(np.std(acc, ddof=1) / math.sqrt(len(acc))), True)


@dataclass
class CVConfig:
    k: int = 5
    L: int = 16
    train_bags: int = 5
    eval_bags: int = 6
    seed: int = 0


def fold_bagsets(ds: SyntheticDataset, fold, cv: CVConfig, fold_index: int):
    base = cv.seed * 1000 + fold_index * 10
    return (BagSet(ds, fold.train, cv.train_bags, cv.L, base + 1),
            BagSet(ds, fold.val, cv.eval_bags, cv.L, base + 2),
            BagSet(ds, fold.test, cv.eval_bags, cv.L, base + 3))


def kind_bagsets(kind: str, ds: SyntheticDataset, fold, cv: CVConfig, fold_index: int):
    """Bags a model kind trains, validates and tests on for one fold.

    The clinical MLP ignores patches, so one train and one val bag per case
    carry all of its information.
    """
    tr, va, te = fold_bagsets(ds, fold, cv, fold_index)
    if kind == "clinical_mlp":
        base = cv.seed * 1000 + fold_index * 10
        tr = BagSet(ds, fold.train, 1, cv.L, base + 1)
        va = BagSet(ds, fold.val, 1, cv.L, base + 2)
    return tr, va, te


def cv_folds(ds: SyntheticDataset, cv: CVConfig):
    return split_folds(ds.labels(), cv.k, np.random.default_rng(cv.seed))


def model_seed(cv: CVConfig, fold_index: int) -> int:
    return cv.seed + fold_index


def cross_validate(ds: SyntheticDataset, kinds, model_cfg, optim_for, cv: CVConfig = CVConfig(),
                   log=None, on_fold=None) -> tuple[list[CVRow], dict]:
    """k-fold CV for each model kind; returns report rows and per-fold evaluations.

    ``optim_for(kind)`` gives the :class:`OptimConfig` for a kind. ``on_fold`` is
    called as ``on_fold(kind, fold_index, model, selected_record, test_eval)``.
    """
    from .baselines import build

    folds = cv_folds(ds, cv)
    rows, details = [], {}
    for kind in kinds:
        accs = []
        details[kind] = []
        for fi, fold in enumerate(folds):
            tr, va, te = kind_bagsets(kind, ds, fold, cv, fi)
            ocfg = optim_for(kind)
            model = build(kind, model_cfg, seed=model_seed(cv, fi))
            fold_log = None
            if log is not None:
                def fold_log(rec, kind=kind, fi=fi):
                    log({"model": kind, "fold": fi, **rec})
            hist = train(model, tr, va, ocfg, seed=cv.seed + fi, log=fold_log)
            chosen = select_model(hist, min_epoch=min(4, len(hist)))
            model.load_state_dict(chosen.state)
            ev = evaluate(model, te)
            accs.append(ev.accuracy)
            details[kind].append(ev)
            if on_fold is not None:
                on_fold(kind, fi, model, chosen, ev)
        rows.append(summarize_folds(kind, accs))
    return rows, details


def format_report(rows: list[CVRow]) -> str:
    from .baselines import DISPLAY_NAMES

    width = max(len(DISPLAY_NAMES.get(r.kind, r.kind)) for r in rows) + 2
    lines = [f"{'Method':<{width}}Accuracy", "-" * (width + 18)]
    for r in rows:
        flag = "" if r.stderr_defined else "  (stderr undefined: single fold)"
        lines.append(f"{DISPLAY_NAMES.get(r.kind, r.kind):<{width}}{r.mean:.4f} +/- {r.stderr:.4f}{flag}")
    return "\n".join(lines)


def jsonl_writer(fh):
    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return write
