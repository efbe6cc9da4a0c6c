"""Accuracy under parameter noise: full-precision adapters vs. full fine-tuning.

    python3 scripts/noise_robustness.py --seeds 0 1 2 --out runs/noise
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
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--scale", type=float, default=10.0, help="adapter scale (skips the search)")
    p.add_argument("--out", type=Path, default=Path("runs/noise"))
    args = p.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    data = make_task(cfg.task)
    backbone = ex.pretrain_source(cfg, data)
    rows = []
    for seed in args.seeds:
        cmp = ex.compare_noise(cfg, backbone, data, seed, args.scale)
        for regime, table in (("adapter", cmp.adapter_rows), ("full", cmp.full_rows)):
            for r in table:
                rows.append({"seed": seed, "regime": regime, **r})
                print(f"seed {seed} {regime:>7} ratio={r['sigma_ratio']:<4} acc={r['accuracy']:.4f} drop={r['drop']:.4f}", flush=True)
    print("wrote", write_csv(args.out / "noise.csv", rows, cfg.hash()))


if __name__ == "__main__":
    main()
