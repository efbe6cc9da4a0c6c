"""Command line entry point: ``lowbit-adapters <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..codebook import Metric
from ..codec import Checkpoint, CheckpointError, Head, inspect_bytes, pack, unpack
from ..quantizer import FULL_PRECISION, QuantizedTensor, gaussian_codebook, quantize_tensor, reconstruct
from ..tinynet.io import load_adapters
from . import experiments as ex
from .config import RunConfig
from .outputs import dumps, write_bytes, write_csv, write_json
from .tasks import make_task
from .training import accuracy


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig JSON; defaults apply when omitted")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--bits", type=int, help="adapter bit width (32 = full precision)")
    common.add_argument("--hidden", type=int, help="adapter hidden dim h")
    common.add_argument("--blocks", type=int, help="quantization blocks per matrix")
    common.add_argument("--head-bits", type=int, help="head bit width (32 = unquantized)")
    common.add_argument("--adapter", choices=["adaptformer", "lora"])
    common.add_argument("--scale", type=float, help="fixed adapter scale; skips the validation search")
    common.add_argument("--backbone", type=Path, help="pre-trained backbone .badp; pre-trains inline when omitted")
    common.add_argument("--checkpoint", type=Path, help="adapter .badp")
    common.add_argument("--input", type=Path, help="input file for pack/unpack/inspect")

    p = argparse.ArgumentParser(prog="lowbit-adapters", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("pretrain", "train and save the frozen source backbone"),
        ("train", "quantization-aware adapter tuning"),
        ("ptq", "full-precision tuning followed by k-means post-training quantization"),
        ("pack", "JSON tensors -> .badp"),
        ("unpack", ".badp -> JSON tensors"),
        ("inspect", "describe a .badp file"),
        ("eval", "evaluate an adapter checkpoint on the target task"),
        ("sweep-bits", "accuracy and payload per bit width"),
        ("sweep-budget", "bit width vs. hidden dim at a fixed bits*hidden budget"),
        ("sweep-noise", "parameter-noise robustness: adapter vs. full fine-tuning"),
        ("landscape", "2-D loss landscape scans"),
        ("hist", "adapter weight histograms and Gaussian fits"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "adapter.bits": args.bits,
        "adapter.hidden": args.hidden,
        "adapter.block_count": args.blocks,
        "adapter.head_bits": args.head_bits,
        "adapter.kind": args.adapter,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg


def _require(path: Path | None, flag: str) -> Path:
    if path is None:
        raise SystemExit(f"{flag} is required for this command")
    return path


class Context:
    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args)
        self.hash = self.cfg.hash()
        self.out: Path = args.out
        self._data = None
        self._backbone = None

    @property
    def data(self):
        if self._data is None:
            self._data = make_task(self.cfg.task)
        return self._data

    @property
    def backbone(self) -> ex.BackboneArtifact:
        if self._backbone is None:
            if self.args.backbone:
                self._backbone = ex.BackboneArtifact.from_bytes(self.args.backbone.read_bytes(), self.cfg)
            else:
                self._backbone = ex.pretrain_source(self.cfg, self.data)
        return self._backbone

    def json(self, name: str, payload: dict) -> Path:
        return write_json(self.out / name, {"config": self.cfg.to_dict(), **payload}, self.hash)

    def csv(self, name: str, rows: list[dict]) -> Path:
        write_json(self.out / "config.json", {"config": self.cfg.to_dict()}, self.hash)
        return write_csv(self.out / name, rows, self.hash)

    def report(self, result: ex.RunResult, stem: str) -> None:
        write_bytes(self.out / f"{stem}.badp", result.checkpoint)
        self.json("report.json", {"report": result.report.comparable()})
        # Timing lives apart so reports stay byte-identical across reruns.
        write_json(self.out / "timing.json", {"wall_time_s": result.report.wall_time_s}, self.hash)


def cmd_pretrain(ctx: Context) -> None:
    art = ctx.backbone
    write_bytes(ctx.out / "backbone.badp", art.sidecar)
    ctx.json(
        "pretrain.json",
        {"source_accuracy": art.source_accuracy, "backbone_hash": art.hash, "loss_curve": art.loss_curve},
    )


def cmd_train(ctx: Context) -> None:
    ctx.report(ex.run_qat(ctx.cfg, ctx.backbone, ctx.data, scale=ctx.args.scale), "adapter")


def cmd_ptq(ctx: Context) -> None:
    bits = ctx.cfg.adapter.bits
    if ctx.args.checkpoint:
        scale = ctx.args.scale if ctx.args.scale is not None else ctx.cfg.adapter.scale
        fp_model = load_adapters(ctx.backbone.model, unpack(ctx.args.checkpoint.read_bytes()), scale)
    else:
        fp_cfg = ctx.cfg.replace(**{"adapter.bits": FULL_PRECISION})
        fp = ex.run_qat(fp_cfg, ctx.backbone, ctx.data, scale=ctx.args.scale)
        write_bytes(ctx.out / "fp_adapter.badp", fp.checkpoint)
        fp_model = fp.model
    ctx.report(ex.run_ptq(ctx.cfg, fp_model, ctx.backbone, bits, ctx.data), "ptq")


def _record_from_json(entry, cb, block_count: int) -> QuantizedTensor:
    if not isinstance(entry, dict):
        return quantize_tensor(np.asarray(entry, dtype=np.float64), cb, block_count if cb else 1)
    shape = tuple(entry["shape"])
    bits = int(entry["bits"])
    if "raw" in entry:
        return QuantizedTensor(shape, bits, 1, raw=np.asarray(entry["raw"], dtype=np.float32).reshape(shape))
    codes = entry.get("codes")
    return QuantizedTensor(
        shape,
        bits,
        int(entry["block_count"]),
        mu=np.asarray(entry["mu"], dtype=np.float32),
        sigma=np.asarray(entry["sigma"], dtype=np.float32),
        indices=np.asarray(entry["indices"], dtype=np.uint8),
        codes=None if codes is None else np.asarray(codes, dtype=np.float32),
    )


def _record_to_json(qt: QuantizedTensor, values: np.ndarray) -> dict:
    out = {"shape": list(qt.shape), "bits": qt.bit_width, "block_count": qt.block_count}
    if qt.is_raw:
        out["raw"] = qt.raw.astype(np.float64).tolist()
    else:
        out["mu"] = qt.mu.astype(np.float64).tolist()
        out["sigma"] = qt.sigma.astype(np.float64).tolist()
        out["indices"] = qt.indices.astype(int).tolist()
        if qt.codes is not None:
            out["codes"] = qt.codes.astype(np.float64).tolist()
    out["values"] = values.tolist()
    return out


def tensors_to_checkpoint(doc: dict) -> Checkpoint:
    """JSON document -> checkpoint.

    ``tensors`` maps names either to nested lists, which are quantized with
    the Gaussian codebook at ``bit_width`` using ``block_count`` blocks, or to
    stored records as written by ``unpack``, which are taken verbatim.  The
    optional ``head`` is a stored record or ``{"weight", "bias", "bits"}``.
    """
    bits = int(doc.get("bit_width", 1))
    metric = Metric(doc.get("metric", "L1"))
    cb = gaussian_codebook(bits, metric.value) if bits < FULL_PRECISION else None
    default_blocks = int(doc.get("block_count", 1))
    pairs = [(name, _record_from_json(entry, cb, default_blocks)) for name, entry in doc.get("tensors", {}).items()]
    head = None
    if "head" in doc:
        h = doc["head"]
        hbits = int(h.get("bits", FULL_PRECISION))
        hcb = gaussian_codebook(hbits, metric.value) if hbits < FULL_PRECISION else None
        head = Head(_record_from_json(h["weight"], hcb, 1), np.asarray(h["bias"], dtype=np.float32))
    return Checkpoint.from_pairs(bits, pairs, metric, head)


def checkpoint_to_tensors(ckpt: Checkpoint) -> dict:
    """Stored records plus reconstructed ``values`` for every tensor."""

    def values(qt, bits):
        if qt.is_raw or qt.codes is not None:
            return reconstruct(qt)
        return reconstruct(qt, gaussian_codebook(bits, ckpt.metric.value))

    doc = {
        "bit_width": ckpt.bit_width,
        "metric": ckpt.metric.value,
        "tensors": {n: _record_to_json(qt, values(qt, ckpt.bit_width)) for n, qt in ckpt.tensors.items()},
    }
    if ckpt.head is not None:
        w = ckpt.head.weight
        doc["head"] = {
            "bits": ckpt.head.bits,
            "weight": _record_to_json(w, values(w, ckpt.head.bits)),
            "bias": ckpt.head.bias.astype(np.float64).tolist(),
        }
    return doc


def cmd_pack(ctx: Context) -> None:
    src = _require(ctx.args.input, "--input")
    ckpt = tensors_to_checkpoint(json.loads(src.read_text()))
    write_bytes(ctx.out / (src.stem + ".badp"), pack(ckpt))


def cmd_unpack(ctx: Context) -> None:
    src = _require(ctx.args.input, "--input")
    doc = checkpoint_to_tensors(unpack(src.read_bytes()))
    path = ctx.out / (src.stem + ".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))


def cmd_inspect(ctx: Context) -> None:
    src = _require(ctx.args.input or ctx.args.checkpoint, "--input")
    info = inspect_bytes(src.read_bytes())
    write_json(ctx.out / (src.stem + ".inspect.json"), info, ctx.hash)
    sys.stdout.write(dumps(info))


def cmd_eval(ctx: Context) -> None:
    src = _require(ctx.args.checkpoint, "--checkpoint")
    scale = ctx.args.scale if ctx.args.scale is not None else ctx.cfg.adapter.scale
    model = load_adapters(ctx.backbone.model, unpack(src.read_bytes()), scale)
    test_acc, test_loss = model.evaluate(ctx.data.target_test.x, ctx.data.target_test.y)
    ctx.json(
        "eval.json",
        {
            "checkpoint": src.name,
            "scale": scale,
            "test_accuracy": test_acc,
            "test_loss": test_loss,
            "val_accuracy": accuracy(model, ctx.data.target_val),
            "backbone_hash": ctx.backbone.hash,
        },
    )


def cmd_sweep_bits(ctx: Context) -> None:
    ctx.csv("sweep_bits.csv", ex.sweep_bitwidth(ctx.cfg, ctx.backbone, ctx.data))


def cmd_sweep_budget(ctx: Context) -> None:
    ctx.csv("sweep_budget.csv", ex.sweep_budget(ctx.cfg, ctx.backbone, ctx.data))


def cmd_sweep_noise(ctx: Context) -> None:
    cmp = ex.compare_noise(ctx.cfg, ctx.backbone, ctx.data, scale=ctx.args.scale)
    rows = [{"regime": "adapter", **r} for r in cmp.adapter_rows]
    rows += [{"regime": "full", **r} for r in cmp.full_rows]
    ctx.csv("sweep_noise.csv", rows)


def cmd_landscape(ctx: Context) -> None:
    sw = ctx.cfg.sweeps
    adapter = ex.run_qat(ctx.cfg, ctx.backbone, ctx.data, scale=ctx.args.scale).model
    full = ex.run_full_finetune(ctx.cfg, ctx.backbone, ctx.data).model
    rows = []
    for regime, model in (("adapter", adapter), ("full", full)):
        grid = ex.scan_landscape(model, ctx.data.target_val, sw.landscape_half_width, sw.landscape_step, ctx.cfg.seed)
        rows += [{"regime": regime, **r} for r in grid]
    ctx.csv("landscape.csv", rows)


def cmd_hist(ctx: Context) -> None:
    if ctx.args.checkpoint:
        doc = checkpoint_to_tensors(unpack(ctx.args.checkpoint.read_bytes()))
        tensors = {n: np.asarray(rec["values"]) for n, rec in doc["tensors"].items()}
    else:
        fp_cfg = ctx.cfg.replace(**{"adapter.bits": FULL_PRECISION})
        model = ex.run_qat(fp_cfg, ctx.backbone, ctx.data, scale=ctx.args.scale).model
        tensors = {n: t.data for n, t in model.adapters.items()}
    hists = ex.dump_histograms(tensors, ctx.cfg.sweeps.hist_bins)
    bins = []
    for h in hists:
        for i, count in enumerate(h["counts"]):
            bins.append({"name": h["name"], "bin": i, "left": h["edges"][i], "right": h["edges"][i + 1], "count": count})
    fits = [{k: h[k] for k in ("name", "size", "degenerate", "mu", "sigma", "excess_kurtosis")} for h in hists]
    ctx.csv("hist.csv", bins)
    ctx.csv("hist_fit.csv", fits)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "ptq": cmd_ptq,
    "pack": cmd_pack,
    "unpack": cmd_unpack,
    "inspect": cmd_inspect,
    "eval": cmd_eval,
    "sweep-bits": cmd_sweep_bits,
    "sweep-budget": cmd_sweep_budget,
    "sweep-noise": cmd_sweep_noise,
    "landscape": cmd_landscape,
    "hist": cmd_hist,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        COMMANDS[args.command](Context(args))
    except (ex.PretrainError, CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
