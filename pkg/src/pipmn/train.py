"""Losses, AdamW and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .metrics import multiclass_metrics, multilabel_metrics
from .model import PipmnModel, forward

log = logging.getLogger(__name__)

RUNLOG_SCHEMA = 1


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_smoothed(logits, targets, eps=0.1):
    """Mean label-smoothed cross-entropy; ``targets`` are class indices."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 2:
        raise ad.ShapeError(f"logits must be (B, C), got {logits.shape}")
    b, c = logits.shape
    if c < 2:
        raise ValueError("cross-entropy needs at least two classes")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (b,):
        raise ad.ShapeError(f"targets must have shape ({b},), got {t.shape}")
    if t.min() < 0 or t.max() >= c:
        raise ValueError(f"target out of range [0, {c}): {t.min()}..{t.max()}")
    q = np.full((b, c), eps / c)
    q[np.arange(b), t] += 1.0 - eps
    logp = _log_softmax(logits.data.astype(np.float64))
    loss = -(q * logp).sum() / b

    def grad_fn(g):
        return ((np.exp(logp) - q) * (g / b),)

    return ad.make_op(np.asarray(loss), (logits,), grad_fn, "cross_entropy")


def smoothed_ce_floor(num_classes, eps=0.1):
    """Smallest achievable smoothed cross-entropy: the entropy of the smoothed target."""
    hi = 1.0 - eps + eps / num_classes
    lo = eps / num_classes
    return -(hi * math.log(hi) + (num_classes - 1) * lo * math.log(lo))


def bce_multilabel(logits, targets):
    """Mean elementwise sigmoid binary cross-entropy."""
    logits = ad.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ad.ShapeError(f"targets shape {y.shape} does not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("multilabel targets must be 0 or 1")
    z = logits.data.astype(np.float64)
    # softplus(z) - y*z, written to avoid overflow
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = per.size

    def grad_fn(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((sig - y) * (g / n),)

    return ad.make_op(np.asarray(per.mean()), (logits,), grad_fn, "bce")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    params: list
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = [p for p in self.params if p.trainable]
        for p in self.params:
            self.m[p.name] = np.zeros_like(p.data)
            self.v[p.name] = np.zeros_like(p.data)

    def step(self):
        """One decoupled-decay Adam update; gradients are zeroed afterwards."""
        if all(p.grad is None for p in self.params):
            raise RuntimeError("optimizer step without gradients; call backward first")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = np.asarray(p.data - self.lr * update - self.lr * self.weight_decay * p.data,
                                dtype=p.data.dtype)
            p.grad = None


def adamw_step(params, state: AdamW):
    state.step()
    return params


# ---------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    seed: int
    config_hash: str
    epochs: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    stopped_early: bool = False
    stop_epoch: int | None = None
    best_epoch: int | None = None

    def append(self, row):
        if self.epochs and row["epoch"] <= self.epochs[-1]["epoch"]:
            raise ValueError("epochs must be strictly increasing")
        self.epochs.append(row)

    def to_jsonl(self) -> str:
        """Header line then one line per epoch. Wall clock is kept out so files are reproducible."""
        head = {"schema": RUNLOG_SCHEMA, "seed": self.seed, "config_hash": self.config_hash,
                "stopped_early": self.stopped_early, "stop_epoch": self.stop_epoch,
                "best_epoch": self.best_epoch}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(row, sort_keys=True) for row in self.epochs]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        head = rows[0]
        out = cls(head["seed"], head["config_hash"], stopped_early=head["stopped_early"],
                  stop_epoch=head["stop_epoch"], best_epoch=head["best_epoch"])
        for row in rows[1:]:
            out.append(row)
        return out

    def same_trajectory(self, other):
        return self.to_jsonl() == other.to_jsonl()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data helpers


def array_batches(x, y, batch_size=128, seed=0, shuffle=True):
    """Epoch -> list of (features, targets) from in-memory arrays.

    Order is a function of (seed, epoch) only.
    """
    x, y = np.asarray(x), np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty dataset")

    def make(epoch):
        idx = np.arange(len(x))
        if shuffle:
            idx = np.random.default_rng([seed, epoch]).permutation(len(x))
        return [(x[idx[i:i + batch_size]], y[idx[i:i + batch_size]])
                for i in range(0, len(x), batch_size)]

    return make


def feature_stats(batches):
    """Per-coefficient mean and std over every frame of every batch."""
    total, s1, s2 = 0, None, None
    for xb, _ in batches:
        flat = np.asarray(xb, dtype=np.float64).reshape(-1, xb.shape[-1])
        s1 = flat.sum(axis=0) if s1 is None else s1 + flat.sum(axis=0)
        s2 = (flat ** 2).sum(axis=0) if s2 is None else s2 + (flat ** 2).sum(axis=0)
        total += flat.shape[0]
    if not total:
        raise ValueError("no data for feature statistics")
    mean = s1 / total
    std = np.sqrt(np.maximum(s2 / total - mean ** 2, 0.0))
    return mean, std


# ---------------------------------------------------------------------------
# evaluation


def _loss(logits, yb, task, label_smoothing):
    if task == "multilabel":
        return bce_multilabel(logits, yb)
    return cross_entropy_smoothed(logits, yb, label_smoothing)


def predict(model: PipmnModel, batches):
    """Concatenated (logits, targets) over an iterable of raw-feature batches."""
    logits, targets = [], []
    for xb, yb in batches:
        logits.append(model.predict_logits(xb))
        targets.append(np.asarray(yb))
    if not logits:
        raise ValueError("cannot evaluate an empty split")
    return np.concatenate(logits), np.concatenate(targets)


def evaluate_multiclass(model: PipmnModel, batches, label_smoothing=0.1):
    logits, y = predict(model, batches)
    report = multiclass_metrics(y, logits.argmax(axis=1), model.config.num_classes)
    report.loss = float(cross_entropy_smoothed(logits.astype(np.float64), y, label_smoothing).data)
    if report.micro_f1 != report.accuracy and abs(report.micro_f1 - report.accuracy) > 1e-12:
        raise AssertionError("micro-F1 must equal accuracy for single-label predictions")
    return report


def evaluate_multilabel(model: PipmnModel, batches, threshold=0.5):
    logits, y = predict(model, batches)
    prob = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    report = multilabel_metrics(y, prob >= threshold)
    report.loss = float(bce_multilabel(logits.astype(np.float64), y).data)
    return report


def evaluate(model, batches, task="multiclass", label_smoothing=0.1):
    if task == "multilabel":
        return evaluate_multilabel(model, batches)
    return evaluate_multiclass(model, batches, label_smoothing)


def _correct(logits, yb, task):
    if task == "multilabel":
        return int(np.all((logits >= 0) == (np.asarray(yb) > 0.5), axis=1).sum())
    return int((logits.argmax(axis=1) == np.asarray(yb)).sum())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StopRule:
    """Stop once train accuracy is 100% and the train loss has not improved
    by more than ``min_delta`` for ``patience`` consecutive epochs."""

    patience: int = 20
    min_delta: float = 1e-4
    best: float = math.inf
    stale: int = 0

    def update(self, train_loss, train_acc):
        if train_loss < self.best - self.min_delta:
            self.best = train_loss
            self.stale = 0
        else:
            self.stale += 1
        return train_acc >= 1.0 and self.stale >= self.patience


@dataclass
class TrainResult:
    runlog: RunLog
    best_state: dict
    best_val: dict | None


def train(model: PipmnModel, train_batches, val_batches=None, *, epochs=3500, seed=0,
          task="multiclass", label_smoothing=0.1, lr=1e-3, weight_decay=0.05,
          beta1=0.9, beta2=0.999, adam_eps=1e-8, stop_rule=None, config=None,
          on_epoch=None) -> TrainResult:
    """Fit ``model``.

    ``train_batches``/``val_batches`` are callables ``epoch -> iterable of
    (raw features, targets)``. Features are standardized with the model's
    stored statistics. The returned state is the one with the best validation
    accuracy (the final state when there is no validation data).
    """
    stop_rule = stop_rule or StopRule()
    opt = AdamW(model.parameters(), lr, weight_decay, beta1, beta2, adam_eps)
    runlog = RunLog(seed, config_hash(config if config is not None else model.config.to_dict()))
    best_state, best_val, best_acc = model.state_dict(), None, -1.0
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        total_loss, correct, seen = 0.0, 0, 0
        for xb, yb in train_batches(epoch):
            try:
                logits = forward(model, model.standardize(xb))
                loss = _loss(logits, yb, task, label_smoothing)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: non-finite values in forward pass ({exc})") from None
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"epoch {epoch}: loss is {lv}")
            ad.backward(loss)
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            for p in model.parameters():
                if not np.all(np.isfinite(p.data)):
                    raise TrainingDiverged(f"epoch {epoch}: parameter {p.name} became non-finite")
            n = len(yb)
            total_loss += lv * n
            correct += _correct(logits.data, yb, task)
            seen += n
        row = {"epoch": epoch, "train_loss": total_loss / seen, "train_acc": correct / seen}
        if val_batches is not None:
            try:
                rep = evaluate(model, val_batches(epoch), task, label_smoothing)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: non-finite values in validation ({exc})") from None
            acc = rep.accuracy if task == "multiclass" else rep.example_acc
            row.update(val_loss=rep.loss, val_acc=acc)
            if acc > best_acc:
                best_acc, best_state, best_val = acc, model.state_dict(), rep.headline()
                runlog.best_epoch = epoch
        runlog.append(row)
        log.info("epoch %d loss %.5f acc %.4f", epoch, row["train_loss"], row["train_acc"])
        if on_epoch is not None:
            on_epoch(row)
        if stop_rule.update(row["train_loss"], row["train_acc"]):
            runlog.stopped_early, runlog.stop_epoch = True, epoch
            break
    if val_batches is None:
        best_state = model.state_dict()
        runlog.best_epoch = runlog.epochs[-1]["epoch"] if runlog.epochs else None
    runlog.wall_clock_s = time.perf_counter() - t0
    return TrainResult(runlog, best_state, best_val)
