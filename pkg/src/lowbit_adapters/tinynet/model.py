"""A small ViT-style backbone with AdaptFormer / LoRA adapter slots."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from ..quantizer import FULL_PRECISION, gaussian_codebook
from . import autograd as ag
from .autograd import Tensor

ADAPTFORMER = "adaptformer"
LORA = "lora"
ADAPTER_KINDS = (ADAPTFORMER, LORA)
SCALE_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass
class BackboneSpec:
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    image_size: int = 8
    patch_size: int = 2
    channels: int = 3
    num_classes: int = 10

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")


@dataclass
class AdapterSpec:
    kind: str = ADAPTFORMER
    hidden: int = 8
    scale: float = 1.0
    bits: int = 1
    block_count: int = 1
    metric: str = "L1"
    head_bits: int = FULL_PRECISION

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ADAPTER_KINDS:
            raise ValueError(f"adapter kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        if self.hidden < 1:
            raise ValueError("hidden dim must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if not 1 <= self.bits <= FULL_PRECISION or 8 < self.bits < FULL_PRECISION:
            raise ValueError("bits must be 1..8 or 32 (full precision)")

    @property
    def quantized(self) -> bool:
        return self.bits < FULL_PRECISION

    def to_dict(self) -> dict:
        return asdict(self)


def forward_adaptformer(x, ffn, w_down, w_up, scale: float):
    """``X + FFN(X) + s * ReLU(X W_down) W_up``; ``ffn`` maps X to FFN(X)."""
    x = ag.as_tensor(x)
    return x + ffn(x) + ag.relu(x @ w_down) @ w_up * scale


def forward_lora_qv(x, w_q, w_v, a_q, b_q, a_v, b_v, scale: float, bias_q=None, bias_v=None):
    """Query/value projections with low-rank updates ``s * X A B``."""
    x = ag.as_tensor(x)
    q = x @ w_q + (x @ a_q) @ b_q * scale
    v = x @ w_v + (x @ a_v) @ b_v * scale
    if bias_q is not None:
        q = q + bias_q
    if bias_v is not None:
        v = v + bias_v
    return q, v


def merge_lora(w, a, b, scale: float) -> np.ndarray:
    """Absorb a low-rank update into the frozen weight."""
    return np.asarray(w, dtype=np.float64) + scale * (np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) images -> (B, num_patches, patch*patch*C) tokens."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def adapter_shapes(kind: str, dim: int, hidden: int) -> list[tuple[str, tuple]]:
    if kind == ADAPTFORMER:
        return [("down", (dim, hidden)), ("up", (hidden, dim))]
    return [("A_q", (dim, hidden)), ("B_q", (hidden, dim)), ("A_v", (dim, hidden)), ("B_v", (hidden, dim))]


class ToyViT:
    """Pre-norm transformer over patch tokens with mean pooling and a linear head.

    ``params`` holds backbone and head tensors, ``adapters`` the adapter
    matrices.  ``set_mode`` decides which of them are trainable; everything
    else is frozen and never receives a gradient.
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.adapters: dict[str, Tensor] = {}
        self.adapter_spec: AdapterSpec | None = None
        # False once adapters hold reconstructed (already quantized) values.
        self.fake_quant_adapters = True
        self.fake_quant_head = False
        self.mode = "frozen"
        rng = np.random.default_rng(seed)
        d, hid = spec.dim, spec.dim * spec.mlp_ratio

        def dense(name, fan_in, fan_out):
            self.params[name + ".weight"] = Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), name=name + ".weight")
            self.params[name + ".bias"] = Tensor(np.zeros(fan_out), name=name + ".bias")

        def norm(name):
            self.params[name + ".gamma"] = Tensor(np.ones(d), name=name + ".gamma")
            self.params[name + ".beta"] = Tensor(np.zeros(d), name=name + ".beta")

        dense("patch_embed", spec.patch_dim, d)
        self.params["pos_embed"] = Tensor(rng.standard_normal((spec.num_patches, d)) * 0.02, name="pos_embed")
        for i in range(spec.depth):
            p = f"blocks.{i}"
            norm(p + ".ln1")
            for proj in ("q", "k", "v", "out"):
                dense(f"{p}.attn.{proj}", d, d)
            norm(p + ".ln2")
            dense(p + ".mlp.fc1", d, hid)
            dense(p + ".mlp.fc2", hid, d)
        norm("norm")
        self.reset_head(spec.num_classes, seed)

    # construction helpers

    def reset_head(self, num_classes: int, seed: int = 0) -> None:
        rng = np.random.default_rng([seed, 7])
        d = self.spec.dim
        self.params["head.weight"] = Tensor(rng.standard_normal((num_classes, d)) * 0.02, name="head.weight")
        self.params["head.bias"] = Tensor(np.zeros(num_classes), name="head.bias")
        self.spec = _with_classes(self.spec, num_classes)
        self.set_mode(self.mode)

    def attach_adapters(self, spec: AdapterSpec, seed: int = 0) -> None:
        """Down/A matrices ~ N(0, 0.02^2), up/B matrices zero."""
        rng = np.random.default_rng([seed, 11])
        self.adapter_spec = spec
        self.adapters = {}
        for i in range(self.spec.depth):
            for name, shape in adapter_shapes(spec.kind, self.spec.dim, spec.hidden):
                full = f"blocks.{i}.adapter.{name}"
                if name in ("down", "A_q", "A_v"):
                    data = rng.standard_normal(shape) * 0.02
                else:
                    data = np.zeros(shape)
                self.adapters[full] = Tensor(data, name=full)
        self.fake_quant_adapters = spec.quantized
        self.fake_quant_head = spec.head_bits < FULL_PRECISION
        self.set_mode(self.mode)

    def detach_adapters(self) -> None:
        self.adapters = {}
        self.adapter_spec = None

    def set_mode(self, mode: str) -> None:
        """``adapter``: adapters + head trainable; ``full``: all backbone + head;
        ``head``: head only; ``frozen``: nothing."""
        if mode not in ("adapter", "full", "head", "frozen"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        for name, t in self.params.items():
            t.requires_grad = mode == "full" or (mode in ("adapter", "head") and name.startswith("head."))
        for t in self.adapters.values():
            t.requires_grad = mode == "adapter"

    def trainable(self) -> list[tuple[str, Tensor]]:
        out = [(n, t) for n, t in self.params.items() if t.requires_grad]
        out += [(n, t) for n, t in self.adapters.items() if t.requires_grad]
        return out

    def frozen(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in {**self.params, **self.adapters}.items() if not t.requires_grad]

    def parameter_count(self, which: str = "backbone") -> int:
        if which == "backbone":
            return sum(t.data.size for n, t in self.params.items() if not n.startswith("head."))
        if which == "head":
            return sum(t.data.size for n, t in self.params.items() if n.startswith("head."))
        if which == "adapters":
            return sum(t.data.size for t in self.adapters.values())
        raise ValueError(which)

    # forward

    def _adapter_weight(self, name: str):
        w = self.adapters[name]
        spec = self.adapter_spec
        if self.fake_quant_adapters and spec.quantized:
            return ag.fake_quant(w, gaussian_codebook(spec.bits, spec.metric), spec.block_count)
        return w

    def _head_weight(self):
        w = self.params["head.weight"]
        spec = self.adapter_spec
        if self.fake_quant_head and spec is not None and spec.head_bits < FULL_PRECISION:
            return ag.fake_quant(w, gaussian_codebook(spec.head_bits, spec.metric), 1)
        return w

    def _dense(self, x, name):
        return x @ self.params[name + ".weight"] + self.params[name + ".bias"]

    def _norm(self, x, name):
        return ag.layer_norm(x, self.params[name + ".gamma"], self.params[name + ".beta"])

    def _attention(self, x, prefix: str, lora: dict | None):
        spec = self.spec
        b, n, d = x.shape
        heads, dh = spec.heads, d // spec.heads
        y = self._norm(x, prefix + ".ln1")
        if lora is None:
            q = self._dense(y, prefix + ".attn.q")
            v = self._dense(y, prefix + ".attn.v")
        else:
            q, v = forward_lora_qv(
                y,
                self.params[prefix + ".attn.q.weight"],
                self.params[prefix + ".attn.v.weight"],
                lora["A_q"], lora["B_q"], lora["A_v"], lora["B_v"],
                self.adapter_spec.scale,
                self.params[prefix + ".attn.q.bias"],
                self.params[prefix + ".attn.v.bias"],
            )
        k = self._dense(y, prefix + ".attn.k")

        def split(t):
            return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

        q, k, v = split(q), split(k), split(v)
        att = ag.softmax(q @ k.transpose(0, 1, 3, 2) * (1.0 / np.sqrt(dh)), axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self._dense(o, prefix + ".attn.out")

    def _ffn(self, prefix: str):
        def ffn(x):
            y = self._norm(x, prefix + ".ln2")
            return self._dense(ag.gelu(self._dense(y, prefix + ".mlp.fc1")), prefix + ".mlp.fc2")

        return ffn

    def features(self, images: np.ndarray) -> Tensor:
        spec = self.spec
        tokens = patchify(np.asarray(images, dtype=np.float64), spec.patch_size)
        x = self._dense(Tensor(tokens), "patch_embed") + self.params["pos_embed"]
        kind = self.adapter_spec.kind if self.adapters else None
        for i in range(spec.depth):
            prefix = f"blocks.{i}"
            lora = None
            if kind == LORA:
                lora = {k: self._adapter_weight(f"{prefix}.adapter.{k}") for k in ("A_q", "B_q", "A_v", "B_v")}
            x = x + self._attention(x, prefix, lora)
            if kind == ADAPTFORMER:
                x = forward_adaptformer(
                    x,
                    self._ffn(prefix),
                    self._adapter_weight(prefix + ".adapter.down"),
                    self._adapter_weight(prefix + ".adapter.up"),
                    self.adapter_spec.scale,
                )
            else:
                x = x + self._ffn(prefix)(x)
        return self._norm(x, "norm").mean(axis=1)

    def forward(self, images: np.ndarray) -> Tensor:
        feats = self.features(images)
        return feats @ self._head_weight().T + self.params["head.bias"]

    __call__ = forward

    def loss(self, images, labels) -> Tensor:
        return ag.cross_entropy(self.forward(images), labels)

    def predict(self, images, batch_size: int = 512) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            out.append(self.forward(images[i : i + batch_size]).data.argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def evaluate(self, images, labels, batch_size: int = 512) -> tuple[float, float]:
        """(accuracy, mean cross-entropy) without building a gradient graph."""
        saved = self._grad_flags()
        self._set_grad_flags(False)
        try:
            correct, total_loss = 0, 0.0
            for i in range(0, len(images), batch_size):
                logits = self.forward(images[i : i + batch_size])
                y = labels[i : i + batch_size]
                correct += int((logits.data.argmax(axis=-1) == y).sum())
                total_loss += ag.cross_entropy(logits, y).item() * len(y)
        finally:
            self._set_grad_flags(saved)
        n = max(len(images), 1)
        return correct / n, total_loss / n

    def _grad_flags(self):
        return {n: t.requires_grad for n, t in {**self.params, **self.adapters}.items()}

    def _set_grad_flags(self, flags):
        for n, t in {**self.params, **self.adapters}.items():
            t.requires_grad = flags if isinstance(flags, bool) else flags[n]

    # state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in {**self.params, **self.adapters}.items()}

    def load_state_dict(self, state: dict) -> None:
        for n, arr in state.items():
            target = self.params.get(n) or self.adapters.get(n)
            if target is None:
                raise KeyError(n)
            target.data = np.array(arr, dtype=np.float64).reshape(target.shape)

    def clone(self) -> "ToyViT":
        other = copy.copy(self)
        other.spec = copy.deepcopy(self.spec)
        other.adapter_spec = copy.deepcopy(self.adapter_spec)
        other.params = {n: Tensor(t.data.copy(), t.requires_grad, n) for n, t in self.params.items()}
        other.adapters = {n: Tensor(t.data.copy(), t.requires_grad, n) for n, t in self.adapters.items()}
        return other

    def merged(self) -> "ToyViT":
        """Copy with LoRA updates absorbed into the query/value weights."""
        if self.adapter_spec is None or self.adapter_spec.kind != LORA:
            raise ValueError("only LoRA adapters can be merged")
        out = self.clone()
        s = self.adapter_spec.scale
        for i in range(self.spec.depth):
            p = f"blocks.{i}"
            for proj in ("q", "v"):
                a = self._effective_adapter(f"{p}.adapter.A_{proj}")
                b = self._effective_adapter(f"{p}.adapter.B_{proj}")
                w = out.params[f"{p}.attn.{proj}.weight"]
                w.data = merge_lora(w.data, a, b, s)
        out.detach_adapters()
        return out

    def _effective_adapter(self, name: str) -> np.ndarray:
        saved = self.adapters[name].requires_grad
        self.adapters[name].requires_grad = False
        try:
            return self._adapter_weight(name).data
        finally:
            self.adapters[name].requires_grad = saved


def _with_classes(spec: BackboneSpec, num_classes: int) -> BackboneSpec:
    new = copy.deepcopy(spec)
    new.num_classes = num_classes
    return new


def add_parameter_noise(model: ToyViT, sigma_ratio: float, seed: int, names=None) -> ToyViT:
    """Copy of ``model`` with N(0, (ratio * std(W))^2) noise added to each named tensor.

    ``names`` defaults to the currently trainable tensors; std is the
    population std of each tensor on its own.
    """
    if sigma_ratio < 0:
        raise ValueError("sigma_ratio must be >= 0")
    out = model.clone()
    if names is None:
        names = [n for n, _ in model.trainable()]
    rng = np.random.default_rng(seed)
    for name in sorted(names):
        t = out.params.get(name) or out.adapters.get(name)
        if t is None:
            raise KeyError(name)
        std = float(np.std(t.data))
        noise = rng.standard_normal(t.shape)
        if sigma_ratio > 0 and std > 0:
            t.data = t.data + noise * (sigma_ratio * std)
    return out
