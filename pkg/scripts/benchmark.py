"""Full model against the majority and linear baselines on the synthetic set."""
import argparse
import json

import torch

from composer_gar import benchmark, config, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="desk", help="preset name or flat config file")
    ap.add_argument("--n-clips", type=int, default=400)
    ap.add_argument("--noise-px", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0, help="dataset seed")
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = config.PRESETS[args.config]() if args.config in config.PRESETS else config.load(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    data = benchmark.synthetic_data(synth.SynthConfig(n_clips=args.n_clips, noise_px=args.noise_px,
                                                      seed=args.seed))
    scores = benchmark.baselines(data)
    print(f"majority {scores['majority']:.4f}  linear {scores['linear']:.4f}", flush=True)
    res = benchmark.run(cfg, data, on_epoch=lambda r: print(
        f"epoch {r['epoch']:3d} loss {r['loss_total']:.3f} train {r['train_acc']:.3f}", flush=True))
    scores["model"] = res.accuracy
    print(json.dumps({**scores, "seconds": round(res.seconds, 1)}))


if __name__ == "__main__":
    main()
