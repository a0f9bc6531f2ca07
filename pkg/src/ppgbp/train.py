"""Pretraining with early stopping and per-subject personalization."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import BalancedDataset, SampleSet, SegmentationScheme, assign_bin, personalization_split
from .errors import ConfigurationError, DivergenceError, RejectionError, StructuralError
from .nn import Model, ModelCheckpoint, build_architecture, loss_mse, loss_softmax_xent
from .nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    task: str = "classification"
    scheme: str = "hph"
    arch: str = "resnet18"
    profile: str = "desk"
    lr: float = 0.001
    batch_size: int = 128
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0

    def validate(self):
        if self.task not in ("classification", "regression"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (batch normalization)")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def append(self, record: EpochRecord):
        self.epochs.append(record)

    @property
    def train_loss(self):
        return [e.train_loss for e in self.epochs]

    @property
    def val_loss(self):
        return [e.val_loss for e in self.epochs]

    @property
    def val_acc(self):
        return [e.val_acc for e in self.epochs]

    def to_lines(self, with_time=False):
        """Line-oriented text: one ``key=value`` record per epoch."""
        lines = []
        for e in self.epochs:
            line = (f"epoch={e.epoch} train_loss={e.train_loss!r} val_loss={e.val_loss!r} "
                    f"val_acc={e.val_acc!r}")
            if with_time:
                line += f" seconds={e.seconds:.3f}"
            lines.append(line)
        lines.append(f"best_epoch={self.best_epoch}")
        return "\n".join(lines) + "\n"


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience=10):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.wait = 0
        self.epoch = -1

    def update(self, val_loss):
        """Record one epoch; returns ``(improved, should_stop)``."""
        self.epoch += 1
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, self.epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def select_best_epoch(val_accuracies):
    """Index of the highest validation accuracy; earliest epoch wins ties."""
    return int(np.argmax(np.asarray(val_accuracies)))


def targets_for(samples: SampleSet, task, scheme: SegmentationScheme):
    if task == "classification":
        return assign_bin(samples.sbp, scheme)
    return samples.sbp.astype(np.float32)


def _loss(model, out, y):
    if model.task == "classification":
        return loss_softmax_xent(out, y)
    return loss_mse(out, y)


def evaluate_loss(model: Model, x, y, scheme, batch_size=256):
    """Mean loss and bin accuracy over a set, evaluation mode, batch order fixed."""
    if x.shape[0] == 0:
        raise RejectionError("cannot evaluate on an empty set")
    out = model.predict(x, batch_size)
    loss, _ = _loss(model, out, y)
    if model.task == "classification":
        pred = np.argmax(out, axis=1)
        true = y
    else:
        pred = assign_bin(out[:, 0], scheme)
        true = assign_bin(y, scheme)
    return loss, float(np.mean(pred == true))


class _Snapshot:
    def __init__(self, model: Model, adam: AdamState):
        self.params = [p.copy() for p in model.parameters()]
        self.buffers = [b.copy() for b in model.buffers()]
        self.adam = adam.copy()
        self.dropout = [d.rng.bit_generator.state for d in model.dropout_layers()]

    def restore(self, model: Model):
        model.set_parameters(self.params)
        model.set_buffers(self.buffers)
        for layer, state in zip(model.dropout_layers(), self.dropout):
            layer.rng.bit_generator.state = state


def run_epoch(model: Model, adam: AdamState, x, y, rng, batch_size, lr):
    """One pass over shuffled full batches; a set smaller than one batch is a single batch."""
    n = x.shape[0]
    if n < 2:
        raise RejectionError("need at least 2 training samples")
    order = rng.permutation(n)
    bs = min(batch_size, n)
    losses = []
    for start in range(0, n - bs + 1, bs):
        idx = order[start : start + bs]
        out = model.forward(x[idx], training=True)
        loss, grad = _loss(model, out, y[idx])
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at optimizer step {adam.step + 1}")
        model.zero_grads()
        model.backward(grad.astype(out.dtype))
        adam_step(model.parameters(), model.gradients(), adam, lr)
        losses.append(loss)
    return float(np.mean(losses))


def new_model(config: TrainConfig, scheme: SegmentationScheme, input_length=625, y_train=None):
    arch = build_architecture(config.arch, config.task, scheme.n_bins, config.profile,
                              input_length)
    model = Model(arch, config.seed)
    if config.task == "regression" and y_train is not None and len(y_train):
        # start the linear head at the training mean so Adam need not walk ~130 mmHg
        model.parameters()[-1][...] = np.float32(np.mean(y_train))
    return model


def pretrain(dataset: BalancedDataset, config: TrainConfig, model: Model | None = None,
             on_epoch=None):
    """Train on the train split, early-stop on validation loss, return the best epoch.

    Returns ``(checkpoint, log)``.
    """
    config.validate()
    scheme = dataset.scheme
    train, val = dataset.split("train"), dataset.split("val")
    if len(train) == 0 or len(val) == 0:
        raise RejectionError("dataset needs non-empty train and val splits")
    x_tr, y_tr = train.ppg, targets_for(train, config.task, scheme)
    x_va, y_va = val.ppg, targets_for(val, config.task, scheme)
    model = model or new_model(config, scheme, train.n_samp, y_tr)
    if model.task != config.task:
        raise StructuralError(f"model head {model.task} does not match task {config.task}")
    adam = AdamState.zeros_like(model.parameters())
    rng = np.random.default_rng([config.seed, 1])
    stopper = EarlyStopping(config.patience)
    history = TrainLog()
    best = _Snapshot(model, adam)
    best_acc = float("nan")
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        train_loss = run_epoch(model, adam, x_tr, y_tr, rng, config.batch_size, config.lr)
        val_loss, val_acc = evaluate_loss(model, x_va, y_va, scheme)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"validation loss became {val_loss} in epoch {epoch}")
        rec = EpochRecord(epoch, train_loss, val_loss, val_acc, time.perf_counter() - t0)
        history.append(rec)
        improved, stop = stopper.update(val_loss)
        if improved:
            best = _Snapshot(model, adam)
            best_acc = val_acc
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f%s", epoch, train_loss,
                 val_loss, val_acc, " *" if improved else "")
        if on_epoch:
            on_epoch(rec)
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    best.restore(model)
    meta = {"seed": config.seed, "epoch": stopper.best_epoch, "best_val_loss": stopper.best,
            "best_val_acc": best_acc, "scheme": scheme.to_dict(), "train_config": asdict(config)}
    return ModelCheckpoint.from_model(model, best.adam, meta), history


def select_personalization_subjects(test_ids, n=10, seed=0):
    ids = sorted(int(s) for s in test_ids)
    if len(ids) < n:
        raise ConfigurationError(f"need {n} test subjects for personalization, have {len(ids)}")
    pick = np.random.default_rng([seed, 2]).choice(len(ids), size=n, replace=False)
    return sorted(ids[i] for i in pick)


@dataclass
class PersonalizationResult:
    subject_id: int
    checkpoint: ModelCheckpoint
    log: TrainLog
    split: object
    pre_accuracy: float
    post_accuracy: float


def personalize(checkpoint: ModelCheckpoint, samples: SampleSet, scheme: SegmentationScheme,
                take_every=10, epochs=100, lr=0.001, batch_size=128, seed=0):
    """Fine-tune every weight on one subject's every-``take_every``-th SBP-sorted window.

    Runs exactly ``epochs`` epochs and keeps the epoch with the highest
    validation accuracy. Test accuracy before and after is measured on the
    subject's test half.
    """
    subjects = samples.subjects()
    if len(subjects) != 1:
        raise RejectionError(f"personalization expects one subject, got {len(subjects)}")
    if checkpoint.task == "classification" and checkpoint.config.n_outputs != scheme.n_bins:
        raise StructuralError(
            f"checkpoint head width {checkpoint.config.n_outputs} != {scheme.n_bins} bins"
        )
    split = personalization_split(samples, take_every)
    task = checkpoint.task
    ft, va, te = samples.take(split.finetune), samples.take(split.val), samples.take(split.test)
    x_ft, y_ft = ft.ppg, targets_for(ft, task, scheme)
    x_va, y_va = va.ppg, targets_for(va, task, scheme)
    x_te, y_te = te.ppg, targets_for(te, task, scheme)

    model = checkpoint.to_model()
    _, pre_acc = evaluate_loss(model, x_te, y_te, scheme)
    adam = AdamState.zeros_like(model.parameters())
    rng = np.random.default_rng([seed, subjects[0], 3])
    history = TrainLog()
    best, best_acc = None, -1.0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        train_loss = run_epoch(model, adam, x_ft, y_ft, rng, batch_size, lr)
        val_loss, val_acc = evaluate_loss(model, x_va, y_va, scheme)
        history.append(EpochRecord(epoch, train_loss, val_loss, val_acc, time.perf_counter() - t0))
        if val_acc > best_acc:
            best, best_acc = _Snapshot(model, adam), val_acc
    history.best_epoch = select_best_epoch(history.val_acc)
    best.restore(model)
    _, post_acc = evaluate_loss(model, x_te, y_te, scheme)
    meta = dict(checkpoint.metadata)
    meta.update({"personalized_subject": subjects[0], "epoch": history.best_epoch,
                 "best_val_acc": best_acc, "take_every": take_every, "epochs": epochs})
    ckpt = ModelCheckpoint.from_model(model, best.adam, meta)
    return PersonalizationResult(subjects[0], ckpt, history, split, pre_acc, post_acc)
