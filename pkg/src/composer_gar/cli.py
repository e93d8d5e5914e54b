"""Command-line entry points: train, eval, export-attention, gradcheck, synth-gen."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config, synth, train
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import CONFIG_KEYS, PRESETS, ConfigError, TrainConfig
from .dataset import (DatasetError, Manifest, RawClip, compute_stats, load_dataset, load_manifest,
                      manifest_path_for, save_dataset)
from .features import collate, featurize
from .tokens import scale_lengths

log = logging.getLogger("composer_gar")

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_CLIP = 4
GRADCHECK_TOL = 1e-4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _key_help() -> str:
    defaults = config.to_flat(config.desk())
    lines = ["config keys (desk preset values shown):"]
    lines += [f"  {k} = {defaults[k]}" for k in CONFIG_KEYS]
    lines.append("")
    lines.append("exit codes: 0 ok, 1 gradcheck failure, 2 config/data error, "
                 "3 malformed checkpoint, 4 unknown clip_id")
    return "\n".join(lines)


def resolve_key(key: str) -> str:
    """Accept full keys (``model.num_scales``) or unambiguous suffixes (``num_scales``)."""
    if key in CONFIG_KEYS:
        return key
    hits = [k for k in CONFIG_KEYS if k.split(".", 1)[1] == key]
    if len(hits) != 1:
        raise ConfigError(f"unknown config key: {key}" if not hits else
                          f"ambiguous config key {key}: {', '.join(hits)}", key)
    return hits[0]


def build_config(args) -> TrainConfig:
    source = args.config or "desk"
    if source in PRESETS:
        cfg = PRESETS[source]()
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file not found: {source}")
        cfg = config.load(path)
    for item in getattr(args, "ablate", None) or []:
        if "=" not in item:
            raise ConfigError(f"--ablate expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        config.set_key(cfg, resolve_key(key.strip()), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def set_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _load_data(path: str, manifest: Manifest | None = None) -> list[RawClip]:
    clips = load_dataset(path, manifest)
    if not clips:
        raise DatasetError(f"{path}: no clips")
    return clips


def _dataset_manifest(path: str) -> Manifest:
    mpath = manifest_path_for(path)
    if not mpath.exists():
        raise DatasetError(f"{path}: no manifest.json next to the data file")
    return load_manifest(mpath)


def cmd_train(args) -> int:
    cfg = build_config(args)
    manifest = _dataset_manifest(args.data)
    clips = _load_data(args.data, manifest)
    if args.val:
        train_clips, val_clips = clips, _load_data(args.val, manifest)
    elif args.val_fraction > 0:
        train_clips, val_clips = synth.stratified_split(clips, args.val_fraction, cfg.seed)
    else:
        train_clips, val_clips = clips, []

    P, J, E, G = manifest.max_persons, manifest.num_keypoint_types, manifest.max_objects, manifest.num_groups
    counts = scale_lengths(P, J, E, G)[: cfg.model.num_scales] if cfg.model.multiscale else ()
    log.info("token counts per scale: %s", ", ".join(map(str, counts)) or "none (no multiscale)")
    log.info("training on %d clips, validating on %d", len(train_clips), len(val_clips))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(cfg, out / "config.txt")
    result = train.fit(cfg, train_clips, manifest, val_clips or None,
                       augment_data=not args.no_augment)
    (out / "metrics.csv").write_text(train.format_csv(result.history))
    save_checkpoint(out / "checkpoint", result.model, cfg, manifest, result.stats, result.T,
                    epoch=cfg.epochs, history=result.history, optimizer=result.optimizer)
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint'}")
    return 0


def eval_json(ckpt, clips: list[RawClip]) -> dict:
    res = train.evaluate(ckpt.model, clips, ckpt.manifest, ckpt.stats, ckpt.config)
    return {"accuracy": res.accuracy, "confusion": res.confusion,
            "person_accuracy": res.person_accuracy, "n": res.n,
            "class_names": list(ckpt.manifest.class_names)}


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    clips = _load_data(args.data, ckpt.manifest)
    print(json.dumps(eval_json(ckpt, clips), indent=1))
    return 0


def attention_json(ckpt, clip: RawClip) -> dict:
    model = ckpt.model.eval()
    dtype = next(model.parameters()).dtype
    batch = collate([featurize(clip, ckpt.manifest, ckpt.stats, ckpt.config.model.grouping)], dtype)
    with torch.no_grad():
        out = model(batch)
    blocks = []
    for m, scales in enumerate(out.attention):
        entries = []
        for s, w in enumerate(scales):
            entries.append({
                "scale": s + 1,
                "tokens": [list(t) for t in out.tags[s]],
                "heads": [w[0, h].double().tolist() for h in range(w.shape[1])],
            })
        blocks.append({"block": m + 1, "scales": entries})
    return {"clip_id": clip.clip_id, "blocks": blocks}


def cmd_export_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    clips = {c.clip_id: c for c in _load_data(args.data, ckpt.manifest)}
    if args.clip_id not in clips:
        raise CliError(f"unknown clip_id: {args.clip_id}", EXIT_CLIP)
    payload = attention_json(ckpt, clips[args.clip_id])
    Path(args.out).write_text(json.dumps(payload))
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = build_config(args)
    if args.data:
        manifest = _dataset_manifest(args.data)
        clips = _load_data(args.data, manifest)[: args.clips]
    else:
        clips, manifest = synth.generate_dataset(synth.SynthConfig(n_clips=args.clips, seed=cfg.seed))
    stats = compute_stats(clips)
    model = train.build_model(cfg, manifest, clips[0].T)
    batch = train.make_batch(clips, manifest, stats, cfg)
    report = train.grad_check(model, batch, cfg, args.n_coords, args.step, cfg.seed)
    print(f"max relative error {report.max_rel_error:.3e} over {len(report.entries)} coordinates")
    if report.kinks:
        print(f"{len(report.kinks)} coordinates skipped: the difference stencil crosses a ReLU kink")
    print("worst coordinates:")
    for e in report.worst:
        print(f"  {e['param']}[{e['index']}] analytic={e['analytic']:.6e} "
              f"numeric={e['numeric']:.6e} rel={e['rel_error']:.3e}")
    ok = report.max_rel_error <= args.tol
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_synth_gen(args) -> int:
    sc = synth.SynthConfig(n_clips=args.n_clips, T=args.T, persons=args.persons,
                           noise_px=args.noise_px, seed=args.seed if args.seed is not None else 0)
    try:
        clips, manifest = synth.generate_dataset(sc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(clips, args.out, manifest)
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels")
    common.add_argument("--config", default=None,
                        help=f"flat config file or preset name ({', '.join(PRESETS)}); default desk")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="composer-gar", description=__doc__,
                                     epilog=_key_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], epilog=_key_help(), formatter_class=fmt,
                       help="train a model and write metrics.csv plus a checkpoint")
    p.add_argument("--data", required=True, help="NDJSON clip file with manifest.json beside it")
    p.add_argument("--val", default=None, help="separate validation NDJSON file")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="stratified hold-out when --val is absent (0 disables)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ablate", action="append", metavar="KEY=VALUE",
                   help="override a config key; repeatable")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-attention", parents=[common],
                       help="per-block, per-scale attention matrices of one clip as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("gradcheck", parents=[common], epilog=_key_help(), formatter_class=fmt,
                       help="finite-difference check of the full loss gradient")
    p.add_argument("--data", default=None, help="clips to use (default: synthetic)")
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--n-coords", type=int, default=200)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    p.add_argument("--ablate", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="NDJSON path; manifest.json goes beside it")
    p.add_argument("--n-clips", type=int, default=400)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--persons", type=int, default=6)
    p.add_argument("--noise-px", type=float, default=2.0)
    p.set_defaults(func=cmd_synth_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    set_determinism(args.deterministic)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
