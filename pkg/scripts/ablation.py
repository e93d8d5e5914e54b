"""Train the full model and each ablation config on the same synthetic split."""
import argparse
import json
from pathlib import Path

import torch

from composer_gar import benchmark, config, synth

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
DEFAULT = ["desk", "no_mst", "no_cluster", "no_aux", "scales_1", "scales_2", "scales_3"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("variants", nargs="*", default=DEFAULT,
                    help="config names under configs/ (default: all desk-scale variants)")
    ap.add_argument("--n-clips", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0, help="dataset seed")
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()

    torch.set_num_threads(1)
    data = benchmark.synthetic_data(synth.SynthConfig(n_clips=args.n_clips, seed=args.seed))
    results = {}
    for name in args.variants:
        cfg = config.load(CONFIGS / f"{name}.txt")
        if args.epochs is not None:
            cfg.epochs = args.epochs
        res = benchmark.run(cfg, data)
        results[name] = res.accuracy
        print(f"{name:12s} {res.accuracy:.4f}  ({res.seconds:.0f}s)", flush=True)
    print(json.dumps(results))


if __name__ == "__main__":
    main()
