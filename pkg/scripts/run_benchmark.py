"""Synthetic benchmark: trained vs untrained vs random correspondences and shape-model quality.

Usage: python scripts/run_benchmark.py [--seed 0] [--fold 0] [--iterations 500] [--out result.json]
"""
import argparse
import json
import logging
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from specssm.benchmark import BenchmarkConfig, run_benchmark


def to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, list)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--fold", type=int, default=0)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--out", help="write the result dictionary as JSON")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = replace(BenchmarkConfig(), seed=args.seed, fold=args.fold)
    if args.iterations is not None:
        cfg = replace(cfg, train=replace(cfg.train, iterations=args.iterations))
    with threadpool_limits(limits=1):
        out = run_benchmark(cfg)
    out.pop("history")
    e_t, e_u, e_r = out["trained_error"], out["untrained_error"], out["random_error"]
    print(f"correspondence error  trained {e_t:.4f}  untrained {e_u:.4f}  random {e_r:.3f}")
    print(f"ratios  trained/untrained {e_t / e_u:.3f}  trained/random {e_t / e_r:.4f}")
    print(f"generality   predicted {out['generality'][0]:.3f}  oracle {out['gt_generality'][0]:.3f}")
    print(f"specificity  predicted {out['specificity'][0]:.3f}  oracle {out['gt_specificity'][0]:.3f}")
    print(f"runtime {out['seconds']:.0f} s")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({k: to_jsonable(v) for k, v in out.items()}, fh, indent=2)


if __name__ == "__main__":
    main()
