"""Random checkpoint generators shared by codec tests and the acceptance suite."""

import numpy as np

from lowbit_adapters.codebook import Metric
from lowbit_adapters.codec import Checkpoint, Head
from lowbit_adapters.quantizer import FULL_PRECISION, gaussian_codebook, quantize_tensor


def random_checkpoint(rng: np.random.Generator) -> Checkpoint:
    bits = int(rng.choice([1, 2, 3, 4, 5, 8, FULL_PRECISION]))
    metric = Metric.L1 if rng.random() < 0.5 else Metric.L2
    cb = None if bits == FULL_PRECISION else gaussian_codebook(bits, metric.value)
    ckpt = Checkpoint(bits, metric)
    for i in range(int(rng.integers(0, 5))):
        rows, cols = int(rng.integers(1, 9)), int(rng.integers(1, 13))
        blocks = int(rng.integers(1, min(rows * cols, 4) + 1))
        w = rng.standard_normal((rows, cols)) * rng.uniform(0.01, 2)
        if rng.random() < 0.15:
            w[:] = rng.standard_normal()
        qt = quantize_tensor(w, cb, blocks)
        if cb is not None and not qt.is_raw and rng.random() < 0.25:
            n = int(rng.integers(1, 2**bits + 1))
            qt.codes = np.sort(rng.standard_normal(n)).astype(np.float32)
            qt.indices = rng.integers(0, n, qt.size).astype(qt.indices.dtype)
        ckpt.tensors[f"blocks.{i}.adapter.w{i}"] = qt
    if rng.random() < 0.5:
        hb = int(rng.choice([1, 2, FULL_PRECISION]))
        hcb = None if hb == FULL_PRECISION else gaussian_codebook(hb, "L1")
        rows, cols = int(rng.integers(2, 6)), int(rng.integers(2, 9))
        ckpt.head = Head(quantize_tensor(rng.standard_normal((rows, cols)), hcb), rng.standard_normal(rows).astype(np.float32))
    return ckpt
