"""Save/load of backbones (raw float32 sidecar) and adapters (quantized checkpoint)."""

from __future__ import annotations

import numpy as np

from ..codebook import Metric
from ..codec import Checkpoint, CheckpointError, Head
from ..quantizer import FULL_PRECISION, gaussian_codebook, quantize_tensor, reconstruct
from .model import ADAPTFORMER, LORA, AdapterSpec, BackboneSpec, ToyViT


def round_to_float32(model: ToyViT) -> None:
    """Snap backbone and head values to float32 so the raw sidecar reloads exactly."""
    for t in model.params.values():
        t.data = t.data.astype(np.float32).astype(np.float64)


def backbone_checkpoint(model: ToyViT) -> Checkpoint:
    ckpt = Checkpoint(FULL_PRECISION)
    for name, t in model.params.items():
        if name.startswith("head."):
            continue
        ckpt.tensors[name] = quantize_tensor(t.data, None)
    ckpt.head = Head(quantize_tensor(model.params["head.weight"].data, None), model.params["head.bias"].data.astype(np.float32))
    return ckpt


def load_backbone(ckpt: Checkpoint, spec: BackboneSpec) -> ToyViT:
    if ckpt.bit_width != FULL_PRECISION:
        raise CheckpointError("backbone sidecar must be stored at 32 bits")
    model = ToyViT(spec)
    expected = {n for n in model.params if not n.startswith("head.")}
    if set(ckpt.tensors) != expected:
        raise CheckpointError("backbone sidecar does not match the backbone spec")
    for name, qt in ckpt.tensors.items():
        target = model.params[name]
        target.data = reconstruct(qt).reshape(target.shape)
    if ckpt.head is not None:
        w = reconstruct(ckpt.head.weight)
        model.reset_head(w.shape[0])
        model.params["head.weight"].data = w
        model.params["head.bias"].data = ckpt.head.bias.astype(np.float64)
    return model


def adapter_checkpoint(model: ToyViT) -> Checkpoint:
    """Stored form of a tuned model: quantized adapters plus the (optionally quantized) head."""
    spec = model.adapter_spec
    if spec is None:
        raise ValueError("model has no adapters")
    cb = gaussian_codebook(spec.bits, spec.metric) if spec.quantized else None
    ckpt = Checkpoint(spec.bits if spec.quantized else FULL_PRECISION, Metric(spec.metric))
    for name, t in model.adapters.items():
        ckpt.tensors[name] = quantize_tensor(t.data, cb, spec.block_count if cb else 1)
    hcb = gaussian_codebook(spec.head_bits, spec.metric) if spec.head_bits < FULL_PRECISION else None
    ckpt.head = Head(
        quantize_tensor(model.params["head.weight"].data, hcb, 1),
        model.params["head.bias"].data.astype(np.float32),
    )
    return ckpt


def infer_adapter_spec(ckpt: Checkpoint, scale: float) -> AdapterSpec:
    names = list(ckpt.tensors)
    if not names:
        raise CheckpointError("checkpoint holds no adapters")
    kind = LORA if any(n.endswith(".A_q") for n in names) else ADAPTFORMER
    first = ckpt.tensors[names[0]]
    head_bits = ckpt.head.bits if ckpt.head is not None else FULL_PRECISION
    return AdapterSpec(
        kind=kind,
        hidden=int(first.shape[1]),
        scale=scale,
        bits=ckpt.bit_width,
        block_count=first.block_count,
        metric=ckpt.metric.value,
        head_bits=head_bits,
    )


def _reconstruct(qt, bits, metric):
    if qt.is_raw or qt.codes is not None:
        return reconstruct(qt)
    return reconstruct(qt, gaussian_codebook(bits, metric))


def load_adapters(backbone: ToyViT, ckpt: Checkpoint, scale: float) -> ToyViT:
    """Copy of ``backbone`` carrying the reconstructed adapters and head from ``ckpt``."""
    spec = infer_adapter_spec(ckpt, scale)
    model = backbone.clone()
    if ckpt.head is not None:
        w = _reconstruct(ckpt.head.weight, ckpt.head.bits, spec.metric)
        model.reset_head(w.shape[0])
        model.params["head.weight"].data = w
        model.params["head.bias"].data = ckpt.head.bias.astype(np.float64)
    model.attach_adapters(spec)
    if set(model.adapters) != set(ckpt.tensors):
        raise CheckpointError("adapter names do not match the backbone depth")
    for name, qt in ckpt.tensors.items():
        target = model.adapters[name]
        target.data = _reconstruct(qt, ckpt.bit_width, spec.metric).reshape(target.shape)
    # Stored values are already quantized; re-quantizing would shift mu/sigma.
    model.fake_quant_adapters = False
    model.fake_quant_head = False
    model.set_mode("frozen")
    return model
