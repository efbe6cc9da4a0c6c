from .autograd import Tensor
from .model import (
    ADAPTFORMER,
    LORA,
    SCALE_GRID,
    AdapterSpec,
    BackboneSpec,
    ToyViT,
    add_parameter_noise,
    forward_adaptformer,
    forward_lora_qv,
    merge_lora,
)
from .optim import AdamW, cosine_lr

__all__ = [
    "ADAPTFORMER",
    "LORA",
    "SCALE_GRID",
    "AdamW",
    "AdapterSpec",
    "BackboneSpec",
    "Tensor",
    "ToyViT",
    "add_parameter_noise",
    "cosine_lr",
    "forward_adaptformer",
    "forward_lora_qv",
    "merge_lora",
]
