"""Paired 1-bit QAT / full-precision / 1-bit PTQ runs over several seeds.

    python3 scripts/qat_vs_ptq.py --seeds 0 1 2 3 4 --bits 1 --out runs/qat_vs_ptq

Writes one CSV row per (seed, method) plus a mean row per method.
"""

import argparse
from pathlib import Path

import numpy as np

from lowbit_adapters.harness import experiments as ex
from lowbit_adapters.harness.config import RunConfig
from lowbit_adapters.harness.outputs import write_csv
from lowbit_adapters.harness.tasks import make_task


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--bits", type=int, default=1)
    p.add_argument("--search-every-seed", action="store_true", help="rerun the scale search per seed (about 5x slower)")
    p.add_argument("--out", type=Path, default=Path("runs/qat_vs_ptq"))
    args = p.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    data = make_task(cfg.task)
    backbone = ex.pretrain_source(cfg, data)
    q_cfg = cfg.replace(**{"adapter.bits": args.bits})
    f_cfg = cfg.replace(**{"adapter.bits": 32})
    rows, q_scale, f_scale = [], None, None
    for seed in args.seeds:
        q = ex.run_qat(q_cfg, backbone, data, seed, None if args.search_every_seed else q_scale)
        f = ex.run_qat(f_cfg, backbone, data, seed, None if args.search_every_seed else f_scale)
        q_scale, f_scale = q.report.scale, f.report.scale
        ptq = ex.run_ptq(cfg, f.model, backbone, args.bits, data, seed=seed)
        for r in (q.report, f.report, ptq.report):
            rows.append({"seed": seed, "method": r.method, "bits": r.bits, "scale": r.scale, "accuracy": r.accuracy, "payload_bytes": r.payload_bytes})
            print(f"seed {seed} {r.method:>4} b={r.bits:<2} s={r.scale:<6} acc={r.accuracy:.4f}", flush=True)
    for method in ("qat", "fp", "ptq"):
        accs = [r["accuracy"] for r in rows if r["method"] == method]
        rows.append({"seed": "mean", "method": method, "accuracy": float(np.mean(accs))})
        print(f"mean {method:>4} acc={np.mean(accs):.4f}")
    print("wrote", write_csv(args.out / "qat_vs_ptq.csv", rows, cfg.hash()))


if __name__ == "__main__":
    main()
