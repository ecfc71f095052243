"""Losses, Adam, the learning-rate schedule and the train/evaluate loops."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .data import DataEmpty, Dataset
from .network import SOVNet, class_scores, classify
from .tensor import ShapeMismatch, Tensor

LR0 = 1e-3
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LR_DECAY = 0.9
BATCH_SIZE = 32
RECON_WEIGHT = 0.0005

METRICS_HEADER = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


class LabelOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class MarginPhase:
    m_plus: float
    m_minus: float
    lam: float

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("need 0 < m- < m+ < 1")


@dataclass(frozen=True)
class MarginSchedule:
    first: MarginPhase = MarginPhase(0.9, 0.1, 0.5)
    second: MarginPhase = MarginPhase(0.95, 0.05, 0.8)
    epochs: int = 2

    def phase(self, epoch: int) -> MarginPhase:
        """The second phase covers epochs ceil(epochs/2) .. epochs-1."""
        return self.second if epoch >= math.ceil(self.epochs / 2) else self.first


def margin_loss(scores, labels, sched: MarginSchedule = MarginSchedule(), epoch: int = 0) -> Tensor:
    """Mean over the batch of sum_k T_k max(0, m+ - s_k)^2 + lam (1 - T_k) max(0, s_k - m-)^2."""
    scores = T.as_tensor(scores)
    if scores.ndim == 1:
        scores = T.reshape(scores, (1, -1))
    B, K = scores.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (B,):
        raise ShapeMismatch(f"{labels.shape} labels for {B} score rows")
    if np.any(labels < 0) or np.any(labels >= K):
        raise LabelOutOfRange(f"label outside [0, {K})")
    ph = sched.phase(epoch)
    onehot = np.zeros((B, K), dtype=scores.dtype)
    onehot[np.arange(B), labels] = 1.0
    pos = T.square(T.relu(ph.m_plus - scores)) * onehot
    neg = T.square(T.relu(scores - ph.m_minus)) * (ph.lam * (1.0 - onehot))
    return T.reduce_sum(pos + neg) * (1.0 / B)


def reconstruction_loss(recon, target) -> Tensor:
    recon = T.as_tensor(recon)
    target = T.as_tensor(target, recon)
    if recon.shape != target.shape:
        raise ShapeMismatch(f"reconstruction {recon.shape} vs target {target.shape}")
    return T.mean(T.square(recon - target))


def total_loss(model: SOVNet, images, labels, sched: MarginSchedule = MarginSchedule(),
               epoch: int = 0, recon_weight: float = RECON_WEIGHT):
    """(loss tensor, margin part, mse part, class scores as an array)."""
    res = model.forward(images)
    scores = class_scores(res.class_poses, model.config.norm_eps)
    m = margin_loss(scores, labels, sched, epoch)
    recon = model.reconstruct(res.class_poses, labels)
    r = reconstruction_loss(recon, np.asarray(images, dtype=model.dtype))
    return m + r * recon_weight, m, r, scores.data


# ----------------------------------------------------------------------------- Adam

@dataclass
class OptimState:
    lr: float = LR0
    beta1: float = BETAS[0]
    beta2: float = BETAS[1]
    eps: float = ADAM_EPS
    decay: float = LR_DECAY
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, epoch: int, lr0: float) -> float:
        return lr0 * self.decay ** epoch


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: OptimState) -> None:
    """In-place bias-corrected Adam update; a missing gradient counts as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient of {name}: {g.shape} vs {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# ----------------------------------------------------------------------------- loops

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def evaluate(model: SOVNet, ds: Dataset, batch_size: int = 64) -> EvalResult:
    if len(ds) == 0:
        raise DataEmpty("cannot evaluate on an empty dataset")
    pred = model.predict_classes(ds.images, batch_size)
    K = model.config.classes
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (ds.labels, pred), 1)
    return EvalResult(float(np.trace(conf)) / len(ds), conf)


@dataclass
class TrainResult:
    model: SOVNet
    metrics: List[dict]
    state: OptimState

    def metrics_csv(self) -> str:
        return metrics_csv(self.metrics)


def metrics_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]),
                    "" if r["val_acc"] is None else repr(r["val_acc"])])
    return buf.getvalue()


def train(model: SOVNet, data: Dataset, epochs: int, seed: int = 0, val: Optional[Dataset] = None,
          batch_size: int = BATCH_SIZE, lr0: float = LR0,
          callback: Optional[Callable[[dict], bool]] = None, log: Optional[Callable[[str], None]] = None
          ) -> TrainResult:
    """Minibatch Adam on margin + weighted reconstruction loss.

    The learning rate during epoch e is lr0 * 0.9**e. Shuffling draws from
    ``seed`` only, so runs are reproducible. ``callback`` receives each epoch's
    metrics row and may return True to stop early.
    """
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    if len(data) == 0:
        raise DataEmpty("training set is empty")
    if data.classes != model.config.classes:
        raise ValueError(f"dataset has {data.classes} classes, model {model.config.classes}")
    rng = np.random.default_rng(seed)
    state = OptimState(lr=lr0)
    sched = MarginSchedule(epochs=epochs)
    rows: List[dict] = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        state.lr = state.lr_at(epoch, lr0)
        order = rng.permutation(len(data))
        loss_sum, correct = 0.0, 0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            x = data.images[idx].astype(model.dtype)
            y = data.labels[idx]
            model.zero_grad()
            loss, _, _, scores = total_loss(model, x, y, sched, epoch)
            T.backward(loss)
            adam_step(model.params, {n: p.grad for n, p in model.params.items()}, state)
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(scores, axis=1) == y))
        model.zero_grad()
        row = {"epoch": epoch, "lr": state.lr, "train_loss": loss_sum / len(data),
               "train_acc": correct / len(data),
               "val_acc": evaluate(model, val).accuracy if val is not None and len(val) else None,
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch} lr {state.lr:.3g} loss {row['train_loss']:.4f} "
                f"train {row['train_acc']:.4f} val {row['val_acc']} ({row['seconds']:.1f}s)")
        if callback is not None and callback(row):
            break
    return TrainResult(model, rows, state)


# ----------------------------------------------------------------------------- gradient check

@dataclass
class GradcheckReport:
    passed: bool
    worst_param: str
    worst_index: tuple
    worst_error: float
    checked: int
    tol: float

    def lines(self) -> List[str]:
        status = "PASS" if self.passed else "FAIL"
        return [f"{status} checked={self.checked} tol={self.tol:g}",
                f"worst {self.worst_param}{list(self.worst_index)} rel_err={self.worst_error:.3e}"]


def gradcheck(model: SOVNet, images, labels, h: float = 1e-5, tol: float = 1e-4,
              max_per_param: Optional[int] = None, seed: int = 0) -> GradcheckReport:
    """Central differences against the tape for the total loss, binary64.

    Error per entry is |analytic - numeric| / max(1, |analytic|). With
    ``max_per_param`` only that many randomly chosen entries of each tensor
    are probed.
    """
    if model.dtype != np.float64:
        model = model.astype(np.float64)
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def loss_value():
        return float(total_loss(model, images, labels)[0].data)

    model.zero_grad()
    with np.errstate(all="ignore"):
        loss = total_loss(model, images, labels)[0]
        T.backward(loss)
    worst = ("", (), -1.0)
    count = 0
    for name, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = np.arange(p.data.size)
        if max_per_param is not None and flat.size > max_per_param:
            flat = np.sort(rng.choice(flat, max_per_param, replace=False))
        for f in flat:
            idx = np.unravel_index(f, p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            up = loss_value()
            p.data[idx] = old - h
            down = loss_value()
            p.data[idx] = old
            num = (up - down) / (2 * h)
            a = g[idx]
            err = abs(a - num) / max(1.0, abs(a))
            if not np.isfinite(err):
                err = math.inf
            count += 1
            if err > worst[2]:
                worst = (name, tuple(int(i) for i in idx), float(err))
    model.zero_grad()
    return GradcheckReport(worst[2] <= tol, worst[0], worst[1], worst[2], count, tol)
