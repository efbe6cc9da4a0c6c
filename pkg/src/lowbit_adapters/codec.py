"""Binary checkpoint container for quantized adapters (``.badp``).

Layout (all integers little-endian)::

    header   magic "BADP" | version u16 | bit_width u8 | metric u8 | tensor_count u32
    tensor   name_len u16 | name utf-8 | rows u32 | cols u32 | block_count u32 | flag u8 | body
    head     "HEAD" | head_bits u8 | rows u32 | cols u32 | block_count u32 | flag u8 | body
             | bias_len u32 | bias f32[bias_len]                          (optional, last)

``flag`` selects the body:

    0  Gaussian-coded: block_count x (mu f32, sigma f32), then per block the
       packed indices (b bits each, LSB-first, padded to a byte boundary)
    1  raw: rows*cols f32
    2  own codebook: code_count u16, codes f32[code_count], then as flag 0

Only the bodies (and the head bias) count as payload; header, names and
per-tensor shape fields are bookkeeping.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .codebook import Metric
from .quantizer import (
    FULL_PRECISION,
    QuantizedTensor,
    block_slices,
    gaussian_codebook,
    pack_indices,
    quantize_tensor,
    unpack_indices,
)

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "CheckpointError",
    "BadMagicError",
    "TruncatedError",
    "CorruptPayloadError",
    "Head",
    "Checkpoint",
    "pack",
    "unpack",
    "pack_head",
    "tensor_payload_bytes",
    "head_payload_bytes",
    "payload_bytes",
    "measure_payload",
    "size_estimate",
    "inspect_bytes",
]

MAGIC = b"BADP"
HEAD_TAG = b"HEAD"
VERSION = 1
HEADER_SIZE = 12

_HEADER = struct.Struct("<4sHBBI")
_SHAPE = struct.Struct("<IIIB")

FLAG_GAUSSIAN = 0
FLAG_RAW = 1
FLAG_CODES = 2


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint data."""


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CorruptPayloadError(CheckpointError):
    pass


@dataclass
class Head:
    weight: QuantizedTensor
    bias: np.ndarray  # float32, kept at full precision

    @property
    def bits(self) -> int:
        return self.weight.bit_width

    def equals(self, other: "Head") -> bool:
        return (
            self.weight.equals(other.weight)
            and self.bias.dtype == other.bias.dtype
            and np.array_equal(self.bias, other.bias)
        )


@dataclass
class Checkpoint:
    bit_width: int
    metric: Metric = Metric.L1
    tensors: dict = field(default_factory=dict)
    head: Head | None = None

    @classmethod
    def from_pairs(cls, bit_width: int, pairs, metric: Metric | str = Metric.L1, head: Head | None = None):
        ckpt = cls(bit_width, Metric(metric), head=head)
        for name, qt in pairs:
            if name in ckpt.tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            ckpt.tensors[name] = qt
        return ckpt

    def equals(self, other: "Checkpoint") -> bool:
        if (self.bit_width, self.metric) != (other.bit_width, other.metric):
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        if not all(self.tensors[k].equals(other.tensors[k]) for k in self.tensors):
            return False
        if (self.head is None) != (other.head is None):
            return False
        return self.head is None or self.head.equals(other.head)


def _index_bytes(qt: QuantizedTensor) -> int:
    return sum(math.ceil(n * qt.bit_width / 8) for n in qt.block_lengths())


def tensor_payload_bytes(qt: QuantizedTensor) -> int:
    if qt.is_raw:
        return 4 * qt.size
    extra = 2 + 4 * len(qt.codes) if qt.codes is not None else 0
    return extra + 8 * qt.block_count + _index_bytes(qt)


def head_payload_bytes(head: Head) -> int:
    return tensor_payload_bytes(head.weight) + 4 * int(head.bias.size)


def payload_bytes(ckpt: Checkpoint, include_head: bool = True) -> int:
    total = sum(tensor_payload_bytes(qt) for qt in ckpt.tensors.values())
    if include_head and ckpt.head is not None:
        total += head_payload_bytes(ckpt.head)
    return total


def _encode_body(qt: QuantizedTensor) -> tuple[int, bytes]:
    if qt.is_raw:
        raw = np.ascontiguousarray(qt.raw, dtype="<f4").ravel()
        if raw.size != qt.size:
            raise CheckpointError("raw payload does not match tensor shape")
        return FLAG_RAW, raw.tobytes()
    if len(qt.mu) != qt.block_count or len(qt.sigma) != qt.block_count:
        raise CheckpointError("need one (mu, sigma) pair per block")
    parts = []
    flag = FLAG_GAUSSIAN
    if qt.codes is not None:
        flag = FLAG_CODES
        codes = np.asarray(qt.codes, dtype="<f4")
        if codes.size > 2**qt.bit_width:
            raise CheckpointError(f"{codes.size} codes do not fit in {qt.bit_width} bits")
        parts.append(struct.pack("<H", codes.size) + codes.tobytes())
    stats = np.empty(2 * qt.block_count, dtype="<f4")
    stats[0::2] = qt.mu
    stats[1::2] = qt.sigma
    parts.append(stats.tobytes())
    idx = np.asarray(qt.indices).ravel()
    if idx.size != qt.size:
        raise CheckpointError("index count does not match tensor shape")
    for sl in block_slices(qt.size, qt.block_count):
        parts.append(pack_indices(idx[sl], qt.bit_width))
    return flag, b"".join(parts)


def _encode_record(qt: QuantizedTensor) -> bytes:
    rows, cols = qt.shape
    flag, body = _encode_body(qt)
    return _SHAPE.pack(rows, cols, qt.block_count, flag) + body


def pack_head(head_weight, head_bias, bits: int = FULL_PRECISION, metric: Metric | str = Metric.L1) -> bytes:
    """Encode the classification head section.

    ``head_weight`` is either a :class:`QuantizedTensor` or a float matrix;
    a float matrix is quantized with one (mu, sigma) pair when ``bits < 32``.
    The bias always stays float32.
    """
    if isinstance(head_weight, QuantizedTensor):
        qt = head_weight
    else:
        cb = None if bits >= FULL_PRECISION else gaussian_codebook(bits, Metric(metric).value)
        qt = quantize_tensor(head_weight, cb, 1)
    return _encode_head(Head(qt, np.asarray(head_bias, dtype=np.float32).ravel()))


def _encode_head(head: Head) -> bytes:
    bias = np.ascontiguousarray(head.bias, dtype="<f4").ravel()
    return (
        HEAD_TAG
        + struct.pack("<B", head.bits)
        + _encode_record(head.weight)
        + struct.pack("<I", bias.size)
        + bias.tobytes()
    )


def pack(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint; identical input gives identical bytes."""
    if not 1 <= ckpt.bit_width <= FULL_PRECISION:
        raise CheckpointError(f"bit_width {ckpt.bit_width} out of range")
    out = [_HEADER.pack(MAGIC, VERSION, ckpt.bit_width, Metric(ckpt.metric).code, len(ckpt.tensors))]
    seen = set()
    for name, qt in ckpt.tensors.items():
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        if qt.bit_width != ckpt.bit_width:
            raise CheckpointError(
                f"tensor {name!r} is {qt.bit_width}-bit, checkpoint is {ckpt.bit_width}-bit"
            )
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError("tensor name too long")
        out.append(struct.pack("<H", len(encoded)) + encoded + _encode_record(qt))
    if ckpt.head is not None:
        out.append(_encode_head(ckpt.head))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or n > self.remaining:
            raise TruncatedError(f"truncated while reading {what}: need {n} bytes, {self.remaining} left")
        chunk = self.data[self.pos : self.pos + n].tobytes()
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


def _decode_record(r: _Reader, bit_width: int, what: str, spans: list | None = None) -> QuantizedTensor:
    rows, cols, block_count, flag = r.unpack(_SHAPE, f"{what} shape")
    m = rows * cols
    if m == 0:
        raise CorruptPayloadError(f"{what}: empty tensor")
    if block_count < 1 or block_count > m:
        raise CorruptPayloadError(f"{what}: invalid block_count {block_count} for {m} elements")
    start = r.pos
    if flag == FLAG_RAW:
        raw = np.frombuffer(r.take(4 * m, f"{what} raw payload"), dtype="<f4").astype(np.float32)
        qt = QuantizedTensor((rows, cols), bit_width, block_count, raw=raw.reshape(rows, cols))
    elif flag in (FLAG_GAUSSIAN, FLAG_CODES):
        if bit_width > 16:
            raise CorruptPayloadError(f"{what}: {bit_width}-bit indices are not supported")
        codes = None
        if flag == FLAG_CODES:
            (count,) = r.unpack(_U16, f"{what} code count")
            if count < 1 or count > 2**bit_width:
                raise CorruptPayloadError(f"{what}: {count} codes for {bit_width}-bit indices")
            codes = np.frombuffer(r.take(4 * count, f"{what} codes"), dtype="<f4").astype(np.float32)
        # Check the full span up front so nothing is allocated for bogus sizes.
        lengths = [sl.stop - sl.start for sl in block_slices(m, block_count)]
        need = 8 * block_count + sum(math.ceil(n * bit_width / 8) for n in lengths)
        if need > r.remaining:
            raise TruncatedError(f"truncated {what}: need {need} bytes, {r.remaining} left")
        stats = np.frombuffer(r.take(8 * block_count, f"{what} stats"), dtype="<f4").astype(np.float32)
        parts = []
        for n in lengths:
            parts.append(unpack_indices(r.take(math.ceil(n * bit_width / 8), f"{what} indices"), n, bit_width))
        idx = np.concatenate(parts)
        limit = len(codes) if codes is not None else 2**bit_width
        if idx.size and int(idx.max()) >= limit:
            raise CorruptPayloadError(f"{what}: index {int(idx.max())} out of range")
        qt = QuantizedTensor(
            (rows, cols),
            bit_width,
            block_count,
            mu=stats[0::2].copy(),
            sigma=stats[1::2].copy(),
            indices=idx,
            codes=codes,
        )
    else:
        raise CorruptPayloadError(f"{what}: unknown flag {flag}")
    if spans is not None:
        spans.append(r.pos - start)
    return qt


def _decode(data: bytes, spans: dict | None = None) -> Checkpoint:
    r = _Reader(data)
    head = bytes(data[:4])
    if head != MAGIC[: len(head)]:
        raise BadMagicError(f"bad magic {head!r}")
    if r.remaining < HEADER_SIZE:
        raise TruncatedError("truncated header")
    magic, version, bit_width, metric_code, count = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if not 1 <= bit_width <= FULL_PRECISION:
        raise CorruptPayloadError(f"bit_width {bit_width} out of range")
    try:
        metric = Metric.from_code(metric_code)
    except ValueError as exc:
        raise CorruptPayloadError(str(exc)) from None
    # Every tensor record needs at least 15 bytes.
    if count * 15 > r.remaining:
        raise TruncatedError(f"{count} tensors cannot fit in {r.remaining} bytes")
    ckpt = Checkpoint(bit_width, metric)
    for i in range(count):
        (n,) = r.unpack(_U16, f"tensor {i} name length")
        try:
            name = r.take(n, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptPayloadError(f"tensor {i}: name is not valid UTF-8") from None
        if name in ckpt.tensors:
            raise CorruptPayloadError(f"duplicate tensor name {name!r}")
        sizes = [] if spans is not None else None
        ckpt.tensors[name] = _decode_record(r, bit_width, f"tensor {name!r}", sizes)
        if spans is not None:
            spans[name] = sizes[0]
    if r.remaining:
        if r.take(4, "section tag") != HEAD_TAG:
            raise CorruptPayloadError("trailing bytes after tensors")
        (bits,) = r.unpack(_U8, "head bits")
        if not 1 <= bits <= FULL_PRECISION:
            raise CorruptPayloadError(f"head bit width {bits} out of range")
        sizes = [] if spans is not None else None
        weight = _decode_record(r, bits, "head", sizes)
        (nb,) = r.unpack(_U32, "head bias length")
        bias = np.frombuffer(r.take(4 * nb, "head bias"), dtype="<f4").astype(np.float32)
        ckpt.head = Head(weight, bias)
        if spans is not None:
            spans["<head>"] = sizes[0] + 4 * nb
        if r.remaining:
            raise CorruptPayloadError(f"{r.remaining} trailing bytes after head")
    return ckpt


def unpack(data: bytes) -> Checkpoint:
    """Decode a checkpoint; any malformed input raises :class:`CheckpointError`."""
    return _decode(data)


def measure_payload(data: bytes) -> dict:
    """Payload byte spans actually occupied in ``data``, keyed by tensor name."""
    spans: dict = {}
    _decode(data, spans)
    return spans


def size_estimate(d: int, layers: int, h: int, b: int, kind: str = "adaptformer", block_count: int = 1) -> int:
    """Analytic adapter payload in bytes (headers and names excluded).

    AdaptFormer carries two d x h matrices per layer, LoRA four.  Each
    quantized block adds one 32-bit (mu, sigma) pair and pads its indices
    to a whole byte; 32-bit storage is raw.
    """
    if min(d, layers, h, b, block_count) < 1:
        raise ValueError("size_estimate arguments must be positive")
    kind = kind.lower()
    if kind not in ("adaptformer", "lora"):
        raise ValueError(f"unknown adapter kind {kind!r}")
    mats = 2 if kind == "adaptformer" else 4
    if b >= FULL_PRECISION:
        return layers * mats * d * h * 4
    if block_count > d * h:
        raise ValueError("block_count exceeds the matrix size")
    spans = [sl.stop - sl.start for sl in block_slices(d * h, block_count)]
    per_matrix = sum(math.ceil(n * b / 8) + 8 for n in spans)
    return layers * mats * per_matrix


def inspect_bytes(data: bytes) -> dict:
    ckpt = unpack(data)
    spans = measure_payload(data)
    tensors = []
    for name, qt in ckpt.tensors.items():
        tensors.append(
            {
                "name": name,
                "shape": list(qt.shape),
                "block_count": qt.block_count,
                "storage": "raw" if qt.is_raw else ("codes" if qt.codes is not None else "gaussian"),
                "payload_bytes": spans[name],
            }
        )
    head = None
    if ckpt.head is not None:
        head = {
            "bits": ckpt.head.bits,
            "shape": list(ckpt.head.weight.shape),
            "storage": "raw" if ckpt.head.weight.is_raw else "gaussian",
            "payload_bytes": spans["<head>"],
        }
    adapter_payload = sum(spans[t["name"]] for t in tensors)
    return {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "bit_width": ckpt.bit_width,
        "metric": ckpt.metric.value,
        "tensor_count": len(ckpt.tensors),
        "tensors": tensors,
        "head": head,
        "adapter_payload_bytes": adapter_payload,
        "total_payload_bytes": adapter_payload + (head["payload_bytes"] if head else 0),
        "file_bytes": len(data),
    }
