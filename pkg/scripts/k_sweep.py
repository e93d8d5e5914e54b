"""Test accuracy as a function of the prototype count K."""
import argparse
import json

import torch

from composer_gar import benchmark, config, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--K", type=int, nargs="+", default=[8, 32, 128])
    ap.add_argument("--n-clips", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0, help="dataset seed")
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()

    torch.set_num_threads(1)
    data = benchmark.synthetic_data(synth.SynthConfig(n_clips=args.n_clips, seed=args.seed))
    results = {}
    for K in args.K:
        cfg = config.desk()
        cfg.cluster.K = K
        if args.epochs is not None:
            cfg.epochs = args.epochs
        res = benchmark.run(cfg.validate(), data)
        results[K] = res.accuracy
        print(f"K={K:4d} {res.accuracy:.4f}  ({res.seconds:.0f}s)", flush=True)
    print(json.dumps(results))
    print(f"spread {max(results.values()) - min(results.values()):.4f}")


if __name__ == "__main__":
    main()
