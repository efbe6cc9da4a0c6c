"""Bit-width sweep at fixed hidden size and the fixed bits*hidden budget sweep.

    python3 scripts/storage_sweeps.py --out runs/sweeps [--scale 10]
"""

import argparse
from pathlib import Path

from lowbit_adapters.harness import experiments as ex
from lowbit_adapters.harness.config import RunConfig
from lowbit_adapters.harness.outputs import write_csv
from lowbit_adapters.harness.tasks import make_task


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path)
    p.add_argument("--scale", type=float, help="fix the adapter scale instead of searching it per cell")
    p.add_argument("--out", type=Path, default=Path("runs/sweeps"))
    args = p.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.scale is not None:
        cfg = cfg.replace(scale_grid=[args.scale])
    data = make_task(cfg.task)
    backbone = ex.pretrain_source(cfg, data)
    for name, rows in (
        ("bits", ex.sweep_bitwidth(cfg, backbone, data)),
        ("budget", ex.sweep_budget(cfg, backbone, data)),
        ("blocks", ex.sweep_blocks(cfg, backbone, data)),
    ):
        for r in rows:
            print(f"{name:>6} b={r['bits']:<2} h={r['hidden']:<2} k={r['block_count']} acc={r['accuracy']:.4f} bytes={r['payload_bytes']}", flush=True)
        print("wrote", write_csv(args.out / f"sweep_{name}.csv", rows, cfg.hash()))


if __name__ == "__main__":
    main()
