"""Mini-batch training loops shared by every experiment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tinynet import AdamW, ToyViT, cosine_lr
from .tasks import Split


@dataclass
class OptimSpec:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    warmup_epochs: int = 1


def fit(model: ToyViT, data: Split, optim: OptimSpec, seed: int, epochs: int | None = None) -> list[float]:
    """Train the model's trainable tensors; returns the per-epoch mean loss."""
    epochs = optim.epochs if epochs is None else epochs
    params = [t for _, t in model.trainable()]
    if not params or epochs == 0:
        return []
    opt = AdamW(params, optim.lr, (optim.beta1, optim.beta2), optim.eps, optim.weight_decay)
    n = len(data)
    per_epoch = math.ceil(n / optim.batch_size)
    total = epochs * per_epoch
    warmup = optim.warmup_epochs * per_epoch
    rng = np.random.default_rng([seed, 101])
    curve, step = [], 0
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, optim.batch_size):
            idx = order[i : i + optim.batch_size]
            opt.zero_grad()
            loss = model.loss(data.x[idx], data.y[idx])
            loss.backward()
            opt.step(cosine_lr(step, total, optim.lr, warmup))
            losses.append(loss.item())
            step += 1
        curve.append(float(np.mean(losses)))
    return curve


def accuracy(model: ToyViT, data: Split) -> float:
    return model.evaluate(data.x, data.y)[0]
