"""Synthetic Gaussian-mixture image tasks with a source -> target shift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TaskSpec:
    source_classes: int = 10
    target_classes: int = 10
    source_train: int = 4000
    target_train: int = 1000
    target_val: int = 200
    target_test: int = 1000
    image_size: int = 8
    channels: int = 3
    separation: float = 1.0
    noise: float = 1.0
    # 0 keeps the source means, pi/2 moves target means to fresh directions
    rotation: float = 1.2
    task_seed: int = 1234


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class TaskData:
    source_train: Split
    source_test: Split
    target_train: Split
    target_val: Split
    target_test: Split


def _templates(rng, count, shape, separation):
    """Smooth class means: low-resolution Gaussian patterns upsampled 2x."""
    h, w, c = shape
    coarse = rng.standard_normal((count, h // 2, w // 2, c))
    fine = coarse.repeat(2, axis=1).repeat(2, axis=2)
    fine = fine + 0.5 * rng.standard_normal((count, h, w, c))
    flat = fine.reshape(count, -1)
    flat = flat / np.linalg.norm(flat, axis=1, keepdims=True) * np.sqrt(flat.shape[1])
    return separation * flat


def _rotation(rng, dim, angle):
    """Orthogonal map rotating every vector by ``angle`` inside random 2-D planes."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        block = np.array([[c, -s], [s, c]])
        rot[i : i + 2, i : i + 2] = block
    return q @ rot @ q.T


def _sample(rng, means, n):
    y = rng.integers(0, len(means), n)
    return means[y], y


def make_task(spec: TaskSpec) -> TaskData:
    """Draw all splits deterministically from ``spec.task_seed``."""
    rng = np.random.default_rng(spec.task_seed)
    shape = (spec.image_size, spec.image_size, spec.channels)
    dim = int(np.prod(shape))
    src_means = _templates(rng, spec.source_classes, shape, spec.separation)
    base = _templates(rng, spec.target_classes, shape, spec.separation)
    # Target means are a rotated mix of source-like patterns.
    k = min(spec.target_classes, spec.source_classes)
    base[:k] = src_means[rng.permutation(spec.source_classes)[:k]]
    tgt_means = base @ _rotation(rng, dim, spec.rotation).T

    def split(means, n, stream):
        r = np.random.default_rng([spec.task_seed, stream])
        mu, y = _sample(r, means, n)
        x = mu + spec.noise * r.standard_normal(mu.shape)
        return Split(x.reshape(n, *shape), y)

    return TaskData(
        source_train=split(src_means, spec.source_train, 1),
        source_test=split(src_means, 1000, 2),
        target_train=split(tgt_means, spec.target_train, 3),
        target_val=split(tgt_means, spec.target_val, 4),
        target_test=split(tgt_means, spec.target_test, 5),
    )
