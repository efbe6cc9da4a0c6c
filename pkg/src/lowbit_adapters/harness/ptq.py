"""Post-training quantization baseline: per-matrix k-means on standardized weights."""

from __future__ import annotations

import numpy as np

from ..codebook import Metric, cluster_1d
from ..quantizer import FULL_PRECISION, QuantizedTensor, block_slices, standardize
from ..tinynet import ToyViT


def ptq_tensor(weights, bits: int, block_count: int = 1) -> QuantizedTensor:
    """Standardize each block, cluster the standardized values into ``2**bits`` codes (L2).

    One codebook per tensor, fit to all of its standardized blocks.
    """
    w = np.asarray(weights, dtype=np.float64)
    shape = w.shape if w.ndim == 2 else (1, w.size)
    flat = w.ravel()
    slices = block_slices(flat.size, block_count)
    stats = [standardize(flat[sl]) for sl in slices]
    if any(s.degenerate for s in stats):
        return QuantizedTensor(shape, bits, block_count, raw=flat.astype(np.float32).reshape(shape))
    std = np.concatenate([s.values for s in stats])
    clusters = cluster_1d(std, 2**bits, Metric.L2)
    return QuantizedTensor(
        shape,
        bits,
        block_count,
        mu=np.array([s.mu for s in stats], dtype=np.float32),
        sigma=np.array([s.sigma for s in stats], dtype=np.float32),
        indices=clusters.assign(std).astype(np.uint8),
        codes=clusters.codes.astype(np.float32),
    )


def ptq_model(model: ToyViT, bits: int, block_count: int = 1) -> ToyViT:
    """Copy of an adapter-tuned model whose adapters are replaced by PTQ reconstructions.

    ``bits >= 32`` is the no-op path and returns an unchanged copy.
    """
    from ..quantizer import reconstruct

    out = model.clone()
    if bits >= FULL_PRECISION:
        return out
    for name, t in out.adapters.items():
        t.data = reconstruct(ptq_tensor(t.data, bits, block_count)).reshape(t.shape)
    out.fake_quant_adapters = False
    return out
