"""Adam + reduce-on-plateau training loop for the restoration models."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import augment
from .losses import combined_loss, psnr
from .models import Model
from .tensor import Tensor
from .weights import ModelWeights, save_weights, weights_of

log = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]


class NumericalError(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_min: float = 1e-6
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    batch_size: int = 4
    max_steps: int = 1000
    seed: int = 0
    val_fraction: float = 0.1
    # None -> one pass over the training pairs
    steps_per_epoch: Optional[int] = None
    augment: bool = True
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if not self.lr_min <= self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_steps < 0 or self.plateau_patience < 1:
            raise ValueError("batch_size, max_steps and plateau_patience must be positive")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    for k, g in grads.items():
        if g is not None and g.shape != params[k].shape:
            raise T.ShapeError(f"adam_step: gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.dtype, copy=False)
    return params, state


def plateau_schedule(history: Sequence[float], current_lr: float, config: TrainConfig) -> float:
    """Learning rate after the latest epoch of ``history``.

    An epoch counts as bad when its value is not strictly below every earlier
    value (the first epoch has nothing to improve on and counts as bad).
    After ``plateau_patience`` consecutive bad epochs the rate is multiplied
    by ``plateau_factor`` (floored at ``lr_min``) and the count restarts.
    """
    best = math.inf
    bad = 0
    reduce_now = False
    for i, v in enumerate(history):
        if i > 0 and v < best:
            bad = 0
        else:
            bad += 1
        best = min(best, v)
        reduce_now = bad >= config.plateau_patience
        if reduce_now:
            bad = 0
    if reduce_now:
        return max(current_lr * config.plateau_factor, config.lr_min)
    return current_lr


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def to_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.steps)

    def write(self, path) -> None:
        Path(path).write_text(self.to_lines())

    @staticmethod
    def read(path) -> "TrainLog":
        return TrainLog(steps=[json.loads(line) for line in Path(path).read_text().splitlines() if line])


def split_pairs(pairs: Sequence[Pair], val_fraction: float, seed: int) -> tuple[list[Pair], list[Pair]]:
    """Seeded train/validation split; with no validation share, validate on the training set."""
    n = len(pairs)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val >= n:
        return list(pairs), list(pairs)
    order = np.random.default_rng(seed).permutation(n)
    val = [pairs[i] for i in sorted(order[:n_val])]
    train = [pairs[i] for i in sorted(order[n_val:])]
    return train, val


def _stack(batch: Sequence[Pair], dtype) -> tuple[Tensor, Tensor]:
    deg = np.concatenate([b[0] for b in batch]).astype(dtype)
    clean = np.concatenate([b[1] for b in batch]).astype(dtype)
    return Tensor(deg), Tensor(clean)


def evaluate(model: Model, pairs: Sequence[Pair], batch_size: int = 4) -> dict[str, float]:
    """Mean combined loss and PSNR over ``pairs`` in inference mode."""
    dtype = next(iter(model.params.values())).dtype
    totals, psnrs = [], []
    with T.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            x, y = _stack(chunk, dtype)
            pred = model.forward(x, training=False)
            totals.append(combined_loss(pred, y).total.item() * len(chunk))
            psnrs.extend(psnr(pred.data[j], y.data[j]) for j in range(len(chunk)))
    return {"total": float(sum(totals) / len(pairs)), "psnr": float(np.mean(psnrs))}


def train(model: Model, pairs: Sequence[Pair], config: TrainConfig,
          on_step: Optional[Callable[[dict], None]] = None) -> tuple[ModelWeights, TrainLog]:
    """Minimise ``0.1*SSIM + L1 + Grad`` with Adam; deterministic for a fixed seed."""
    if not pairs:
        raise ValueError("train: empty dataset")
    for d, c in pairs:
        if d.shape != c.shape:
            raise ValueError(f"train: pair shapes differ {d.shape} vs {c.shape}")
    rng = np.random.default_rng(config.seed)
    train_pairs, val_pairs = split_pairs(pairs, config.val_fraction, config.seed)
    steps_per_epoch = config.steps_per_epoch or max(1, math.ceil(len(train_pairs) / config.batch_size))
    dtype = next(iter(model.params.values())).dtype
    params = model.trainable()
    state = AdamState()
    lr = config.lr_init
    history: list[float] = []
    tlog = TrainLog()
    order: list[int] = []

    for step in range(config.max_steps):
        idx = []
        while len(idx) < config.batch_size:
            if not order:
                order = list(rng.permutation(len(train_pairs)))
            idx.append(order.pop())
        batch = [train_pairs[i] for i in idx]
        if config.augment:
            batch = [augment(b, rng) for b in batch]
        x, y = _stack(batch, dtype)

        for p in params.values():
            p.grad = None
        pred = model.forward(x, training=True)
        bundle = combined_loss(pred, y)
        values = bundle.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericalError(step, "loss")
        T.backward(bundle.total, leaves=params.values())
        grads = {k: p.grad for k, p in params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(step, "gradient")
        adam_step(params, grads, state, lr)

        rec = {"step": step, "lr": lr, **values, "psnr": psnr(pred.data, y.data)}
        tlog.steps.append(rec)
        if on_step is not None:
            on_step(rec)

        if (step + 1) % steps_per_epoch == 0:
            ev = evaluate(model, val_pairs, config.batch_size)
            history.append(ev["total"])
            new_lr = plateau_schedule(history, lr, config)
            tlog.epochs.append({"epoch": len(history), "step": step, "val_total": ev["total"],
                                "val_psnr": ev["psnr"], "lr": new_lr})
            if new_lr != lr:
                log.info("step %d: plateau, lr %.3g -> %.3g", step, lr, new_lr)
            lr = new_lr
        if config.checkpoint_every and config.checkpoint_path and (step + 1) % config.checkpoint_every == 0:
            save_weights(model, config.checkpoint_path, info={"step": step + 1})

    return weights_of(model, info={"steps": config.max_steps, "seed": config.seed}), tlog
