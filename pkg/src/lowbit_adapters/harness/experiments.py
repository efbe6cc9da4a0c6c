"""Experiment drivers: pre-training, QAT/PTQ/full tuning runs, sweeps, scans."""

from __future__ import annotations

import hashlib
import time
from copy import deepcopy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from ..codec import Checkpoint, Head, head_payload_bytes, pack, payload_bytes, size_estimate, unpack
from ..quantizer import DEFAULT_EPS, FULL_PRECISION, gaussian_codebook, quantize_tensor
from ..tinynet import ToyViT, add_parameter_noise
from ..tinynet.io import adapter_checkpoint, backbone_checkpoint, load_adapters, load_backbone, round_to_float32
from .config import RunConfig
from .ptq import ptq_tensor
from .tasks import Split, TaskData, make_task
from .training import accuracy, fit


class PretrainError(RuntimeError):
    """The source backbone missed its accuracy gate."""


@dataclass
class BackboneArtifact:
    model: ToyViT
    source_accuracy: float
    loss_curve: list
    sidecar: bytes

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.sidecar).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes, config: RunConfig, source_accuracy: float = float("nan")) -> "BackboneArtifact":
        model = load_backbone(unpack(data), config.backbone)
        return cls(model, source_accuracy, [], bytes(data))


@dataclass
class RunReport:
    method: str
    kind: str
    bits: int
    hidden: int
    block_count: int
    head_bits: int
    metric: str
    seed: int
    scale: float
    accuracy: float
    val_accuracy: float
    fake_quant_accuracy: float | None
    scale_search: dict
    loss_curve: list
    payload_estimate_bytes: int
    payload_bytes: int
    head_bytes: int
    total_payload_bytes: int
    file_bytes: int
    backbone_hash: str
    config_hash: str
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except wall time, which legitimately differs between reruns."""
        d = self.to_dict()
        d.pop("wall_time_s")
        return d


@dataclass
class RunResult:
    report: RunReport
    checkpoint: bytes
    model: ToyViT = field(repr=False)


def pretrain_source(config: RunConfig, data: TaskData | None = None) -> BackboneArtifact:
    """Train the backbone on the source task, snap it to float32 and serialize it."""
    data = data or make_task(config.task)
    spec = _backbone_spec(config, config.task.source_classes)
    model = ToyViT(spec, seed=config.backbone_seed)
    model.set_mode("full")
    curve = fit(model, data.source_train, config.pretrain, seed=config.backbone_seed)
    round_to_float32(model)
    model.set_mode("frozen")
    acc = accuracy(model, data.source_test)
    if config.pretrain.epochs > 0 and acc < config.pretrain_threshold:
        raise PretrainError(
            f"source accuracy {acc:.4f} below threshold {config.pretrain_threshold:.2f} "
            f"after {config.pretrain.epochs} epochs (lr {config.pretrain.lr}); loss curve {curve}"
        )
    return BackboneArtifact(model, acc, curve, pack(backbone_checkpoint(model)))


def _backbone_spec(config: RunConfig, num_classes: int):
    spec = deepcopy(config.backbone)
    spec.num_classes = num_classes
    spec.image_size = config.task.image_size
    spec.channels = config.task.channels
    return spec


def _adapter_spec(config: RunConfig, scale: float):
    spec = deepcopy(config.adapter)
    spec.scale = float(scale)
    return spec


def _round_tuned(model: ToyViT) -> None:
    # Stored precision; keeps the full-precision path lossless through the codec.
    for _, t in model.trainable():
        t.data = t.data.astype(np.float32).astype(np.float64)


def train_adapters(config: RunConfig, backbone: ToyViT, data: TaskData, seed: int, scale: float):
    """Fresh head + adapters at ``scale`` trained on the target task."""
    model = backbone.clone()
    model.reset_head(config.task.target_classes, seed)
    model.attach_adapters(_adapter_spec(config, scale), seed)
    model.set_mode("adapter")
    curve = fit(model, data.target_train, config.optim, seed)
    _round_tuned(model)
    return model, curve


def search_scale(config: RunConfig, backbone: ToyViT, data: TaskData, seed: int, grid=None):
    """Train once per candidate; best validation accuracy wins, ties go to the smaller scale."""
    grid = sorted(config.scale_grid if grid is None else grid)
    best, scores = None, {}
    for s in grid:
        model, curve = train_adapters(config, backbone, data, seed, s)
        val = accuracy(model, data.target_val)
        scores[repr(float(s))] = val
        if best is None or val > best[1]:
            best = (s, val, model, curve)
    return best, scores


def _finish(method, config, spec, seed, scale, model_eval, val_acc, fq_acc, scores, curve, ckpt_bytes, data, backbone_hash, t0):
    ckpt = unpack(ckpt_bytes)
    head = head_payload_bytes(ckpt.head) if ckpt.head is not None else 0
    return RunReport(
        method=method,
        kind=spec.kind,
        bits=spec.bits,
        hidden=spec.hidden,
        block_count=spec.block_count,
        head_bits=spec.head_bits,
        metric=spec.metric,
        seed=seed,
        scale=float(scale),
        accuracy=accuracy(model_eval, data.target_test),
        val_accuracy=val_acc,
        fake_quant_accuracy=fq_acc,
        scale_search=scores,
        loss_curve=curve,
        payload_estimate_bytes=size_estimate(
            config.backbone.dim, config.backbone.depth, spec.hidden, spec.bits, spec.kind, spec.block_count if spec.bits < FULL_PRECISION else 1
        ),
        payload_bytes=payload_bytes(ckpt, include_head=False),
        head_bytes=head,
        total_payload_bytes=payload_bytes(ckpt, include_head=True),
        file_bytes=len(ckpt_bytes),
        backbone_hash=backbone_hash,
        config_hash=config.hash(),
        wall_time_s=time.perf_counter() - t0,
    )


def run_qat(config: RunConfig, backbone: BackboneArtifact, data: TaskData | None = None, seed: int | None = None, scale: float | None = None) -> RunResult:
    """Quantization-aware adapter tuning; ``bits == 32`` is plain adapter tuning.

    With ``scale`` given the search is skipped and that value is used.  The
    reported test accuracy comes from the model rebuilt from the packed
    checkpoint, not from the in-memory training copy.
    """
    t0 = time.perf_counter()
    data = data or make_task(config.task)
    seed = config.seed if seed is None else seed
    if scale is None:
        (s, val, model, curve), scores = search_scale(config, backbone.model, data, seed)
    else:
        model, curve = train_adapters(config, backbone.model, data, seed, scale)
        s, val = scale, accuracy(model, data.target_val)
        scores = {repr(float(s)): val}
    fq_acc = accuracy(model, data.target_test)
    ckpt_bytes = pack(adapter_checkpoint(model))
    restored = load_adapters(backbone.model, unpack(ckpt_bytes), s)
    report = _finish("qat" if model.adapter_spec.quantized else "fp", config, model.adapter_spec, seed, s, restored, val, fq_acc, scores, curve, ckpt_bytes, data, backbone.hash, t0)
    return RunResult(report, ckpt_bytes, model)


def ptq_checkpoint(model: ToyViT, bits: int, block_count: int = 1) -> Checkpoint:
    """k-means PTQ of every adapter matrix; the head keeps the model's head setting."""
    spec = model.adapter_spec
    base = adapter_checkpoint(model)
    if bits >= FULL_PRECISION:
        return base
    ckpt = Checkpoint(bits, base.metric, head=base.head)
    for name, t in model.adapters.items():
        ckpt.tensors[name] = ptq_tensor(t.data, bits, block_count)
    if spec.head_bits < FULL_PRECISION:
        ckpt.head = Head(
            quantize_tensor(model.params["head.weight"].data, gaussian_codebook(spec.head_bits, spec.metric)),
            base.head.bias,
        )
    return ckpt


def run_ptq(
    config: RunConfig,
    fp_model: ToyViT,
    backbone: BackboneArtifact,
    bits: int,
    data: TaskData | None = None,
    block_count: int | None = None,
    seed: int | None = None,
) -> RunResult:
    """Post-training quantization of full-precision adapters; no retraining."""
    t0 = time.perf_counter()
    data = data or make_task(config.task)
    if fp_model.adapter_spec is None or fp_model.adapter_spec.quantized:
        raise ValueError("PTQ expects full-precision adapters")
    block_count = config.adapter.block_count if block_count is None else block_count
    seed = config.seed if seed is None else seed
    scale = fp_model.adapter_spec.scale
    ckpt_bytes = pack(ptq_checkpoint(fp_model, bits, block_count))
    restored = load_adapters(backbone.model, unpack(ckpt_bytes), scale)
    spec = _adapter_spec(config, scale)
    spec.bits, spec.block_count = bits, block_count
    spec.head_bits = fp_model.adapter_spec.head_bits
    val = accuracy(restored, data.target_val)
    report = _finish("ptq", config, spec, seed, scale, restored, val, None, {}, [], ckpt_bytes, data, backbone.hash, t0)
    return RunResult(report, ckpt_bytes, restored)


def run_full_finetune(config: RunConfig, backbone: BackboneArtifact, data: TaskData | None = None, seed: int | None = None) -> RunResult:
    """Every backbone tensor plus a fresh head trained; stored raw at 32 bits."""
    t0 = time.perf_counter()
    data = data or make_task(config.task)
    seed = config.seed if seed is None else seed
    model = backbone.model.clone()
    model.detach_adapters()
    model.reset_head(config.task.target_classes, seed)
    model.set_mode("full")
    curve = fit(model, data.target_train, config.full_optim, seed)
    round_to_float32(model)
    ckpt_bytes = pack(backbone_checkpoint(model))
    ckpt = unpack(ckpt_bytes)
    acc = accuracy(model, data.target_test)
    report = RunReport(
        method="full",
        kind="full",
        bits=FULL_PRECISION,
        hidden=0,
        block_count=1,
        head_bits=FULL_PRECISION,
        metric="",
        seed=seed,
        scale=0.0,
        accuracy=acc,
        val_accuracy=accuracy(model, data.target_val),
        fake_quant_accuracy=None,
        scale_search={},
        loss_curve=curve,
        payload_estimate_bytes=4 * model.parameter_count("backbone"),
        payload_bytes=payload_bytes(ckpt, include_head=False),
        head_bytes=head_payload_bytes(ckpt.head),
        total_payload_bytes=payload_bytes(ckpt),
        file_bytes=len(ckpt_bytes),
        backbone_hash=backbone.hash,
        config_hash=config.hash(),
        wall_time_s=time.perf_counter() - t0,
    )
    return RunResult(report, ckpt_bytes, model)


# sweeps


def sweep_bitwidth(config: RunConfig, backbone: BackboneArtifact, data: TaskData | None = None, bits=None, hidden=None) -> list[dict]:
    """One QAT run per (b, h) cell, all with the config seed so cells are paired."""
    data = data or make_task(config.task)
    bits = config.sweeps.bit_widths if bits is None else bits
    hidden = config.sweeps.hidden if hidden is None else hidden
    return [_cell(config, backbone, data, b, h) for h in hidden for b in bits]


def budget_cells(budget: int) -> list[tuple[int, int]]:
    """(bits, hidden) pairs with ``bits * hidden == budget``, widest bits first."""
    return [(b, budget // b) for b in (32, 8, 4, 2, 1) if budget % b == 0]


def sweep_budget(config: RunConfig, backbone: BackboneArtifact, data: TaskData | None = None, budget: int | None = None) -> list[dict]:
    data = data or make_task(config.task)
    budget = config.sweeps.budget if budget is None else budget
    return [_cell(config, backbone, data, b, h) for b, h in budget_cells(budget)]


def sweep_blocks(config: RunConfig, backbone: BackboneArtifact, data: TaskData | None = None, block_counts=None) -> list[dict]:
    data = data or make_task(config.task)
    block_counts = config.sweeps.block_counts if block_counts is None else block_counts
    rows = []
    for k in block_counts:
        cfg = config.replace(**{"adapter.block_count": k})
        rows.append(_row(run_qat(cfg, backbone, data).report))
    return rows


def _cell(config, backbone, data, bits, hidden):
    cfg = config.replace(**{"adapter.bits": bits, "adapter.hidden": hidden})
    return _row(run_qat(cfg, backbone, data).report)


def _row(r: RunReport) -> dict:
    return {
        "bits": r.bits,
        "hidden": r.hidden,
        "block_count": r.block_count,
        "scale": r.scale,
        "accuracy": r.accuracy,
        "val_accuracy": r.val_accuracy,
        "payload_estimate_bytes": r.payload_estimate_bytes,
        "payload_bytes": r.payload_bytes,
        "total_payload_bytes": r.total_payload_bytes,
        "cell_config_hash": r.config_hash,
    }


def noise_targets(model: ToyViT) -> list[str]:
    """Tuned tensors other than the classification head."""
    return [n for n, _ in model.trainable() if not n.startswith("head.")]


def sweep_noise(model: ToyViT, split: Split, sigma_ratios, trials: int, seed: int, names=None) -> list[dict]:
    """Mean accuracy per noise ratio; trial ``t`` reuses one noise draw across ratios."""
    names = noise_targets(model) if names is None else names
    if not names:
        raise ValueError("no tensors to perturb")
    baseline = accuracy(model, split)
    rows = []
    for ratio in sigma_ratios:
        accs = [accuracy(add_parameter_noise(model, ratio, [seed, t], names), split) for t in range(trials)]
        mean = float(np.mean(accs))
        rows.append({"sigma_ratio": float(ratio), "accuracy": mean, "drop": baseline - mean, "trials": accs})
    return rows


@dataclass
class NoiseComparison:
    adapter_rows: list
    full_rows: list
    adapter: RunResult
    full: RunResult

    def drop_at(self, ratio: float) -> tuple[float, float]:
        pick = lambda rows: next(r["drop"] for r in rows if r["sigma_ratio"] == ratio)  # noqa: E731
        return pick(self.adapter_rows), pick(self.full_rows)


def compare_noise(config: RunConfig, backbone: BackboneArtifact, data: TaskData | None = None, seed: int | None = None, scale: float | None = None) -> NoiseComparison:
    """Full-precision adapter tuning vs. full fine-tuning under parameter noise."""
    data = data or make_task(config.task)
    seed = config.seed if seed is None else seed
    fp_cfg = config.replace(**{"adapter.bits": FULL_PRECISION})
    adapter = run_qat(fp_cfg, backbone, data, seed, scale)
    full = run_full_finetune(config, backbone, data, seed)
    ratios, trials = config.sweeps.sigma_ratios, config.sweeps.noise_trials
    return NoiseComparison(
        sweep_noise(adapter.model, data.target_test, ratios, trials, seed),
        sweep_noise(full.model, data.target_test, ratios, trials, seed),
        adapter,
        full,
    )


def _filter_normalized(rng, w: np.ndarray) -> np.ndarray:
    d = rng.standard_normal(w.shape)
    rows_w = w.reshape(w.shape[0], -1) if w.ndim > 1 else w.reshape(1, -1)
    rows_d = d.reshape(rows_w.shape)
    dn = np.linalg.norm(rows_d, axis=1, keepdims=True)
    wn = np.linalg.norm(rows_w, axis=1, keepdims=True)
    rows_d = rows_d * np.divide(wn, dn, out=np.zeros_like(dn), where=dn > 0)
    return rows_d.reshape(w.shape)


def scan_landscape(model: ToyViT, split: Split, half_width: int, step: float, seed: int, names=None) -> list[dict]:
    """Loss on the plane ``theta + a*u + b*v`` spanned by two filter-normalized directions.

    Only the named tensors move (default: the trainable ones).  Rows run
    over ``a`` then ``b`` in ``i * step`` increments, ``i`` in ``-n..n``.
    """
    names = [n for n, _ in model.trainable()] if names is None else list(names)
    if not names:
        raise ValueError("no tensors to scan")
    probe = model.clone()
    probe.set_mode("frozen")
    tensors = {n: probe.params.get(n) or probe.adapters.get(n) for n in names}
    base = {n: t.data.copy() for n, t in tensors.items()}
    rng = np.random.default_rng([seed, 29])
    u = {n: _filter_normalized(rng, base[n]) for n in sorted(names)}
    v = {n: _filter_normalized(rng, base[n]) for n in sorted(names)}
    rows = []
    steps = range(-half_width, half_width + 1)
    for i in steps:
        for j in steps:
            a, b = i * step, j * step
            for n, t in tensors.items():
                t.data = base[n] if i == 0 and j == 0 else base[n] + a * u[n] + b * v[n]
            acc, loss = probe.evaluate(split.x, split.y)
            rows.append({"alpha": a, "beta": b, "loss": loss, "accuracy": acc})
    return rows


def dump_histograms(tensors: dict, bins: int, eps: float = DEFAULT_EPS) -> list[dict]:
    """Per-matrix bin counts, fitted Gaussian (mu, sigma) and excess kurtosis.

    Constant tensors are flagged degenerate and left unfitted.
    """
    out = []
    for name, arr in tensors.items():
        w = np.asarray(arr, dtype=np.float64).ravel()
        counts, edges = np.histogram(w, bins=bins)
        mu, sigma = float(np.mean(w)), float(np.std(w))
        degenerate = sigma <= eps
        out.append(
            {
                "name": name,
                "size": int(w.size),
                "degenerate": degenerate,
                "mu": None if degenerate else mu,
                "sigma": None if degenerate else sigma,
                "excess_kurtosis": None if degenerate else float(stats.kurtosis(w, fisher=True)),
                "counts": counts.tolist(),
                "edges": edges.tolist(),
            }
        )
    return out
