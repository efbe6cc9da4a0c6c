"""Fake quantization of adapter weights against a fixed Gaussian codebook.

Forward: standardize each block by its own mean and population std, snap to
the nearest codebook interval, de-standardize.  Backward: straight-through on
the snapping step, exact through the standardization.  ``QuantizedTensor``
is the stored form (indices + 32-bit mu/sigma per block).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .codebook import Codebook, Metric, build_codebook

__all__ = [
    "DEFAULT_EPS",
    "FULL_PRECISION",
    "Standardized",
    "QuantState",
    "QuantizedTensor",
    "block_slices",
    "gaussian_codebook",
    "standardize",
    "quantize_std",
    "fake_quant_forward",
    "fake_quant_backward",
    "fake_quant_jacobian",
    "quantize_tensor",
    "reconstruct",
    "pack_indices",
    "unpack_indices",
]

DEFAULT_EPS = 1e-12
FULL_PRECISION = 32


@lru_cache(maxsize=None)
def gaussian_codebook(bit_width: int, metric: str = "L1") -> Codebook:
    """Memoised :func:`build_codebook` with default tolerances."""
    return build_codebook(bit_width, Metric(metric))


def block_slices(m: int, block_count: int) -> list[slice]:
    """Contiguous equal spans; the remainder joins the last block."""
    if block_count < 1:
        raise ValueError("block_count must be >= 1")
    if m < block_count:
        raise ValueError(f"cannot split {m} elements into {block_count} blocks")
    size = m // block_count
    starts = [i * size for i in range(block_count)]
    ends = starts[1:] + [m]
    return [slice(s, e) for s, e in zip(starts, ends)]


@dataclass(frozen=True)
class Standardized:
    values: np.ndarray
    mu: float
    sigma: float
    degenerate: bool


def standardize(weights, eps: float = DEFAULT_EPS) -> Standardized:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("standardize needs at least one element")
    mu = float(np.mean(w))
    sigma = float(np.sqrt(np.mean((w - mu) ** 2)))
    if sigma <= eps:
        return Standardized(w.copy(), mu, sigma, True)
    return Standardized((w - mu) / sigma, mu, sigma, False)


def quantize_std(std_weights, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(codes[j], j)`` with ``j`` the interval ``(t_{j-1}, t_j]`` holding each value."""
    idx = cb.assign(std_weights)
    return cb.codes[idx], idx


@dataclass
class QuantState:
    """Forward cache needed by :func:`fake_quant_backward`."""

    shape: tuple
    slices: list
    standardized: list
    quantized_std: list
    indices: list
    mu: np.ndarray
    sigma: np.ndarray
    degenerate: np.ndarray

    @property
    def m(self) -> int:
        return int(np.prod(self.shape))


def fake_quant_forward(weights, cb: Codebook, block_count: int = 1, eps: float = DEFAULT_EPS):
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    slices = block_slices(flat.size, block_count)
    out = np.empty_like(flat)
    stds, qstds, idxs = [], [], []
    mus = np.empty(block_count)
    sigmas = np.empty(block_count)
    degen = np.zeros(block_count, dtype=bool)
    for k, sl in enumerate(slices):
        st = standardize(flat[sl], eps)
        mus[k], sigmas[k], degen[k] = st.mu, st.sigma, st.degenerate
        if st.degenerate:
            out[sl] = flat[sl]
            stds.append(None)
            qstds.append(None)
            idxs.append(None)
            continue
        q, j = quantize_std(st.values, cb)
        out[sl] = q * st.sigma + st.mu
        stds.append(st.values)
        qstds.append(q)
        idxs.append(j)
    state = QuantState(w.shape, slices, stds, qstds, idxs, mus, sigmas, degen)
    return out.reshape(w.shape), state


def fake_quant_backward(state: QuantState, upstream) -> np.ndarray:
    """Gradient w.r.t. the full-precision weights given ``dL/d(q_weights)``.

    Per block of size m: ``grad_k = g_k + (w'_k / m) * sum_i g_i (q'_i - w'_i)``.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.size != state.m:
        raise ValueError(f"upstream has {g.size} elements, expected {state.m}")
    g = g.ravel()
    out = g.copy()
    for k, sl in enumerate(state.slices):
        if state.degenerate[k]:
            continue
        ws, qs = state.standardized[k], state.quantized_std[k]
        gb = g[sl]
        out[sl] = gb + ws * (np.dot(gb, qs - ws) / ws.size)
    return out.reshape(state.shape)


def fake_quant_jacobian(state: QuantState) -> np.ndarray:
    """Dense m x m Jacobian ``d q_i / d w_k``; for tests and small tensors only."""
    m = state.m
    jac = np.eye(m)
    for k, sl in enumerate(state.slices):
        if state.degenerate[k]:
            continue
        ws, qs = state.standardized[k], state.quantized_std[k]
        jac[sl, sl] += np.outer(qs - ws, ws) / ws.size
    return jac


@dataclass
class QuantizedTensor:
    """Stored form of one weight matrix.

    ``indices`` holds one code index per element (row-major); ``mu``/``sigma``
    are float32 per block.  ``raw`` is set instead when the tensor is kept at
    full precision (degenerate blocks or 32-bit storage).  ``codes`` is only
    set when the tensor carries its own codebook (post-training clustering).
    """

    shape: tuple
    bit_width: int
    block_count: int
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    indices: np.ndarray | None = None
    raw: np.ndarray | None = None
    codes: np.ndarray | None = None

    @property
    def is_raw(self) -> bool:
        return self.raw is not None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def block_lengths(self) -> list[int]:
        return [sl.stop - sl.start for sl in block_slices(self.size, self.block_count)]

    def equals(self, other: "QuantizedTensor") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)

        return (
            tuple(self.shape) == tuple(other.shape)
            and self.bit_width == other.bit_width
            and self.block_count == other.block_count
            and same(self.mu, other.mu)
            and same(self.sigma, other.sigma)
            and same(self.indices, other.indices)
            and same(self.raw, other.raw)
            and same(self.codes, other.codes)
        )


def _as_matrix_shape(shape) -> tuple:
    if len(shape) == 2:
        return tuple(int(s) for s in shape)
    if len(shape) == 1:
        return (1, int(shape[0]))
    raise ValueError(f"only 1-D or 2-D tensors are stored, got shape {shape}")


def quantize_tensor(
    weights, cb: Codebook | None, block_count: int = 1, eps: float = DEFAULT_EPS
) -> QuantizedTensor:
    """Quantize for storage.  ``cb=None`` or a degenerate block gives raw float32 storage.

    When only some blocks are degenerate the raw payload holds the
    fake-quantized values so inference matches training.
    """
    w = np.asarray(weights, dtype=np.float64)
    shape = _as_matrix_shape(w.shape)
    if cb is None:
        return QuantizedTensor(shape, FULL_PRECISION, 1, raw=w.astype(np.float32).reshape(shape))
    q, state = fake_quant_forward(w, cb, block_count, eps)
    if state.degenerate.any():
        return QuantizedTensor(shape, cb.bit_width, block_count, raw=q.astype(np.float32).reshape(shape))
    idx = np.concatenate(state.indices).astype(np.uint8 if cb.size <= 256 else np.uint16)
    return QuantizedTensor(
        shape,
        cb.bit_width,
        block_count,
        mu=state.mu.astype(np.float32),
        sigma=state.sigma.astype(np.float32),
        indices=idx,
    )


def reconstruct(qt: QuantizedTensor, cb: Codebook | None = None) -> np.ndarray:
    """Rebuild ``codes[j] * sigma + mu`` per block from stored data only."""
    if qt.is_raw:
        return qt.raw.astype(np.float64).reshape(qt.shape)
    codes = qt.codes.astype(np.float64) if qt.codes is not None else None
    if codes is None:
        if cb is None:
            raise ValueError("a codebook is needed to reconstruct Gaussian-coded tensors")
        if cb.bit_width != qt.bit_width:
            raise ValueError(f"codebook is {cb.bit_width}-bit, tensor is {qt.bit_width}-bit")
        codes = cb.codes
    idx = np.asarray(qt.indices)
    if idx.size and int(idx.max()) >= len(codes):
        raise ValueError(f"index {int(idx.max())} out of range for {len(codes)} codes")
    out = np.empty(qt.size)
    for k, sl in enumerate(block_slices(qt.size, qt.block_count)):
        out[sl] = codes[idx[sl]] * np.float64(qt.sigma[k]) + np.float64(qt.mu[k])
    return out.reshape(qt.shape)


def pack_indices(indices, bit_width: int) -> bytes:
    """b bits per index, LSB-first within each byte, zero-padded to a byte boundary."""
    idx = np.asarray(indices, dtype=np.uint32).ravel()
    if idx.size and int(idx.max()) >= 2**bit_width:
        raise ValueError(f"index {int(idx.max())} does not fit in {bit_width} bits")
    bits = ((idx[:, None] >> np.arange(bit_width, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_indices(data: bytes, count: int, bit_width: int) -> np.ndarray:
    need = (count * bit_width + 7) // 8
    if len(data) < need:
        raise ValueError(f"need {need} bytes for {count} {bit_width}-bit indices, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data[:need], dtype=np.uint8), bitorder="little")
    bits = bits[: count * bit_width].reshape(count, bit_width).astype(np.uint16)
    vals = bits @ (np.uint16(1) << np.arange(bit_width, dtype=np.uint16))
    return vals.astype(np.uint8 if bit_width <= 8 else np.uint16)
