"""Loss, optimizer, learning-rate schedule, training loop and accuracy."""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import UsageError, ValidationError

log = logging.getLogger(__name__)


def bce_with_logits(logits, targets):
    """Binary cross-entropy on logits, summed over classes and averaged over the batch.

    Uses ``max(x, 0) - x t + log(1 + exp(-|x|))`` per element.
    """
    t = np.asarray(getattr(targets, "data", targets), dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValidationError(f"targets {t.shape} vs logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValidationError("targets must lie in [0, 1]")
    x = logits.data
    b = x.shape[0] if x.ndim > 1 else 1
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    loss = np.asarray(per.sum() / b, dtype=x.dtype)

    def backward(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((s - t) * (g / b),)

    return T.record(loss, (logits,), backward, "bce_with_logits")


@dataclass
class Schedule:
    """Warm-up, flat, then a single step decay; epochs are 1-based.

    Epochs ``1..warmup_epochs`` use ``base_lr / (warmup_epochs + 1 - epoch)``,
    then ``base_lr`` until ``decay_epoch - 1`` and ``decay_factor * base_lr``
    from ``decay_epoch`` on.
    """
    base_lr: float = 0.002
    warmup_epochs: int = 4
    decay_epoch: int = 21
    decay_factor: float = 0.1

    @classmethod
    def from_config(cls, config):
        return cls(config.base_lr, config.warmup_epochs, config.decay_epoch, config.decay_factor)

    def lr_at(self, epoch):
        if epoch < 1:
            raise UsageError(f"epochs are 1-based, got {epoch}")
        if epoch <= self.warmup_epochs:
            return self.base_lr / (self.warmup_epochs + 1 - epoch)
        if epoch >= self.decay_epoch:
            return self.decay_factor * self.base_lr
        return self.base_lr


def lr_at(epoch, schedule=None):
    return (schedule or Schedule()).lr_at(epoch)


class Adamax:
    """Adamax update with bias-corrected first moment.

    ``lr_multipliers`` maps parameter-name prefixes to a factor on the step size.
    """

    def __init__(self, named_params, lr=0.002, betas=(0.9, 0.999), eps=1e-8, lr_multipliers=None):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.u = [np.zeros_like(p.data) for _, p in self.params]
        mult = lr_multipliers or {}
        self.mult = [next((v for k, v in mult.items() if name.startswith(k)), 1.0)
                     for name, _ in self.params]

    def step(self, lr=None):
        if all(p.grad is None for _, p in self.params):
            raise UsageError("optimizer step before any backward pass")
        lr = self.lr if lr is None else lr
        self.t += 1
        corr = lr / (1.0 - self.beta1 ** self.t)
        for i, (_, p) in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            u = self.u[i] = np.maximum(self.beta2 * self.u[i], np.abs(g))
            p.data = (p.data - (corr * self.mult[i]) * m / (u + self.eps)).astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if total > max_norm > 0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)
    return total


def predict(model, dataset, batch_size=256):
    """Logits for the whole dataset as a numpy array."""
    out = []
    with T.no_grad():
        for lo in range(0, len(dataset), batch_size):
            logits, _ = model.forward(dataset.batch(np.arange(lo, min(lo + batch_size, len(dataset)))))
            out.append(logits.data)
    return np.concatenate(out, axis=0)


def accuracy_from_logits(logits, targets):
    """Mean over samples of the target score at the argmax logit."""
    logits, targets = np.asarray(logits), np.asarray(targets)
    pick = logits.argmax(axis=1)
    return float(targets[np.arange(len(pick)), pick].astype(np.float64).mean())


def evaluate(model, dataset, batch_size=256):
    return accuracy_from_logits(predict(model, dataset, batch_size), dataset.targets)


def mean_loss(model, dataset, batch_size=256):
    total = 0.0
    with T.no_grad():
        for lo in range(0, len(dataset), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(dataset)))
            batch = dataset.batch(idx)
            logits, _ = model.forward(batch)
            total += float(bce_with_logits(logits, batch.targets).data) * len(idx)
    return total / len(dataset)


@dataclass
class TrainReport:
    seed: int
    config_hash: str
    initial_loss: float = None
    epochs: list = field(default_factory=list)
    steps: int = 0
    best_epoch: int = None
    best_accuracy: float = None
    wall_time: float = None

    @property
    def final_accuracy(self):
        return self.epochs[-1]["eval_accuracy"] if self.epochs else None

    def header(self):
        return {"type": "header", "seed": self.seed, "config_hash": self.config_hash,
                "initial_loss": self.initial_loss, "metric": "argmax soft-score accuracy",
                "timing": {"wall_time_s": self.wall_time}}

    def write_jsonl(self, path):
        lines = [self.header()] + [dict(type="epoch", **e) for e in self.epochs]
        lines.append({"type": "summary", "steps": self.steps, "best_epoch": self.best_epoch,
                      "best_accuracy": self.best_accuracy, "final_accuracy": self.final_accuracy})
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))


def train(model, train_set, eval_set=None, seed=0, out_dir=None, save_checkpoint=None):
    """Train ``model`` in place with Adamax and the epoch schedule.

    Batches are drawn from a seeded permutation per epoch. Each epoch logs
    the mean training loss and (with ``eval_set``) the held-out accuracy.
    With ``out_dir`` the report goes to ``report.jsonl`` and checkpoints to
    ``final.arc`` / ``best.arc`` through ``save_checkpoint(model, path)``.
    """
    if len(train_set) == 0:
        raise ValidationError("training set is empty")
    cfg = model.config
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    sched = Schedule.from_config(cfg)
    opt = Adamax(model.named_parameters(), lr=cfg.base_lr, lr_multipliers=cfg.lr_multipliers)
    params = model.parameters()
    report = TrainReport(seed=seed, config_hash=cfg.config_hash())
    report.initial_loss = mean_loss(model, train_set, cfg.eval_batch_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        lr = sched.lr_at(epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and report.steps >= cfg.max_steps:
                break
            batch = train_set.batch(order[lo:lo + cfg.batch_size])
            logits, _ = model.forward(batch)
            loss = bce_with_logits(logits, batch.targets)
            model.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step(lr)
            report.steps += 1
            losses.append(float(loss.data))
        if not losses:
            break
        record = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "steps": report.steps}
        acc = evaluate(model, eval_set, cfg.eval_batch_size) if eval_set is not None else None
        record["eval_accuracy"] = acc
        report.epochs.append(record)
        log.info("epoch %d lr %.6g loss %.4f acc %s", epoch, lr, record["loss"], acc)
        if acc is not None and acc > best:
            best = acc
            report.best_epoch, report.best_accuracy = epoch, acc
            if out_dir is not None and save_checkpoint is not None:
                save_checkpoint(model, out_dir / "best.arc")
    report.wall_time = time.perf_counter() - start
    if out_dir is not None:
        if save_checkpoint is not None:
            save_checkpoint(model, out_dir / "final.arc")
            if report.best_epoch is None:
                save_checkpoint(model, out_dir / "best.arc")
        report.write_jsonl(out_dir / "report.jsonl")
    return report


def report_to_dict(report):
    return asdict(report)
