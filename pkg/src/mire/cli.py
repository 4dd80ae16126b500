"""Command-line entry point.

Subcommands: generate | mix | gradcam | train | evaluate | ablate | report.
Defaults annotated "[paper]" come from the published hyperparameters; the rest
are marked "[chosen]". Exit codes: 2 config error, 3 contract error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import cdm, pipeline, report, synthdata
from .errors import ConfigError, MireError
from .nets import load_checkpoint, save_checkpoint
from .pipeline import AblationFlags, TrainConfig
from .saliency import grad_cam_batch, merge_masks
from .synthdata import DatasetSpec


def _ensure_fresh(path, force):
    if path and os.path.exists(path) and os.listdir(path) and not force:
        raise ConfigError(f"output dir '{path}' exists; pass --force to overwrite")


def _add_spec_args(p):
    p.add_argument("--K", type=int, default=5, help="class count [chosen]")
    p.add_argument("--N", type=int, default=4, help="domain count [chosen]")
    p.add_argument("--samples", type=int, default=600,
                   help="samples per domain [chosen]")
    p.add_argument("--image-size", type=int, default=32,
                   help="image side length [chosen]")
    p.add_argument("--rho", type=float, default=0.9,
                   help="spurious correlation strength [chosen]")
    p.add_argument("--seed", type=int, default=0, help="generator seed [chosen]")


def _add_train_args(p):
    p.add_argument("--epochs", type=int, default=None,
                   help="training epochs, split across phases 2 and 3 "
                        "[paper: 100, desk default 30]")
    p.add_argument("--phase0-epochs", type=int, default=5,
                   help="warm-up epochs for the saliency heads [chosen]")
    p.add_argument("--batch-size", type=int, default=16,
                   help="batch size [paper]")
    p.add_argument("--lr", type=float, default=0.01,
                   help="learning rate [chosen; paper is silent]")
    p.add_argument("--phi", type=float, default=0.5,
                   help="aggregation/EMA mixing constant [paper]")
    p.add_argument("--lam", type=float, default=0.1,
                   help="consistency loss weight [paper]")
    p.add_argument("--xi", type=float, default=2.0,
                   help="contrastive margin [paper]")
    p.add_argument("--threshold", type=float, default=0.2,
                   help="foreground mask threshold [paper]")
    p.add_argument("--crop-ratio", type=float, default=1.0 / 8.0,
                   help="background crop area ratio [paper]")
    p.add_argument("--train-seeds", type=int, nargs="+", default=None,
                   help="training seed list [paper: 10 runs, desk default 5]")
    p.add_argument("--paper-scale", action="store_true",
                   help="use the paper-scale epoch and seed counts")
    for name in AblationFlags.names():
        p.add_argument(f"--{name.replace('_', '-')}", action="store_true",
                       help=f"ablation flag {name} [chosen]")
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file; unknown keys are rejected")


def _spec_from_args(args):
    return DatasetSpec(num_classes=args.K, num_domains=args.N,
                       samples_per_domain=args.samples,
                       image_size=args.image_size,
                       spurious_strength=args.rho, seed=args.seed)


def _config_from_args(args):
    flags = AblationFlags(**{name: getattr(args, name)
                             for name in AblationFlags.names()})
    kw = {"phase0_epochs": args.phase0_epochs, "batch_size": args.batch_size,
          "lr": args.lr, "phi": args.phi, "lam": args.lam, "xi": args.xi,
          "threshold": args.threshold, "crop_ratio": args.crop_ratio,
          "flags": flags}
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.train_seeds is not None:
        kw["seeds"] = tuple(args.train_seeds)
    cfg = TrainConfig.paper_scale(**kw) if args.paper_scale else TrainConfig(**kw)
    if args.config:
        cfg = _apply_config_file(cfg, args.config)
    cfg.validate()
    return cfg


def _apply_config_file(cfg, path):
    with open(path) as fh:
        data = json.load(fh)
    known = {f.name for f in fields(TrainConfig)}
    flag_names = set(AblationFlags.names())
    for key, value in data.items():
        if key == "flags":
            for fk, fv in value.items():
                if fk not in flag_names:
                    raise ConfigError(f"unknown ablation flag '{fk}' in {path}")
                setattr(cfg.flags, fk, bool(fv))
        elif key in known:
            if key == "seeds":
                value = tuple(value)
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key '{key}' in {path}")
    return cfg


def cmd_generate(args):
    spec = _spec_from_args(args)
    _ensure_fresh(args.out, args.force)
    bundle = synthdata.generate(spec, heldout_domain=args.heldout)
    synthdata.save(bundle, args.out)
    print(f"wrote {sum(len(d) for d in bundle.domains)} samples to {args.out}")
    return 0


def cmd_mix(args):
    cfg = _config_from_args(args)
    bundle = synthdata.load(args.dataset)
    sources = list(range(bundle.spec.num_domains)) if args.sources is None \
        else args.sources
    _ensure_fresh(args.out, args.force)
    if args.checkpoint:
        nets = load_checkpoint(args.checkpoint)
    else:
        nets = pipeline.phase0_pretrain(bundle, cfg, args.seed, sources)
    augmented = pipeline.phase1_mix(bundle, nets, cfg, sources)
    synthdata.save(augmented, args.out)
    mixed = cdm.count_mixed(augmented)
    print(f"wrote {mixed} mixed + "
          f"{sum(len(d) for d in bundle.domains)} original samples to {args.out}")
    if args.export_pgm:
        os.makedirs(args.export_pgm, exist_ok=True)
        exported = 0
        for s in augmented.all_samples():
            if s.provenance is None or exported >= 8:
                continue
            base = os.path.join(args.export_pgm, s.sample_id)
            for c, ch in enumerate("rgb"):
                report.write_pgm(f"{base}_{ch}.pgm", s.image[c])
            exported += 1
        print(f"exported {exported} mixed samples as PGM to {args.export_pgm}")
    return 0


def cmd_gradcam(args):
    cfg = _config_from_args(args)
    bundle = synthdata.load(args.dataset)
    sources = list(range(bundle.spec.num_domains))
    if args.checkpoint:
        nets = load_checkpoint(args.checkpoint)
    else:
        nets = pipeline.phase0_pretrain(bundle, cfg, args.seed, sources)
    _ensure_fresh(args.out, args.force)
    os.makedirs(args.out, exist_ok=True)
    domain_map = {d: i for i, d in enumerate(sources)}
    samples = bundle.all_samples()[:args.count]
    images = np.stack([s.image for s in samples])
    ys = np.array([s.y for s in samples])
    ds = np.array([domain_map[s.d] for s in samples])
    mc = grad_cam_batch(nets, images, ys, "class", cfg.saliency_config())
    md = grad_cam_batch(nets, images, ds, "domain", cfg.saliency_config())
    from . import tensor as T
    for i, s in enumerate(samples):
        mask = merge_masks(mc[i], md[i], cfg.saliency_config())
        for tag, arr in (("class", mc[i]), ("domain", md[i]),
                         ("mask", mask.values)):
            report.write_pgm(os.path.join(args.out, f"{s.sample_id}_{tag}.pgm"),
                             arr)
            with open(os.path.join(args.out, f"{s.sample_id}_{tag}.mirt"),
                      "wb") as fh:
                T.write_array(fh, arr)
    print(f"exported saliency maps for {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args):
    spec = _spec_from_args(args)
    cfg = _config_from_args(args)
    _ensure_fresh(args.out, args.force)
    result = pipeline.run_fold(spec, cfg, args.target, args.train_seed,
                               run_dir=args.out)
    if args.out:
        with open(os.path.join(args.out, "spec.json"), "w") as fh:
            json.dump({"spec": asdict(spec), "target_domain": args.target},
                      fh, indent=2, sort_keys=True)
    print(f"target {args.target}: DeepAll "
          f"{result['deepall_test_accuracy']:.2f}%, "
          f"MiRe {result['test_accuracy']:.2f}%")
    return 0


def cmd_evaluate(args):
    spec = _spec_from_args(args)
    cfg = _config_from_args(args)
    _ensure_fresh(args.out, args.force)
    rep = pipeline.evaluate_lodo(spec, cfg, run_dir=args.out)
    print(rep.to_csv())
    return 0


def cmd_ablate(args):
    spec = _spec_from_args(args)
    cfg = _config_from_args(args)
    _ensure_fresh(args.out, args.force)
    results = pipeline.ablate(spec, cfg, run_dir=args.out)
    width = max(len(name) for name in results)
    print(f"{'method'.ljust(width)}  accuracy")
    for name, rep in results.items():
        print(f"{name.ljust(width)}  {rep.summary['average']['mire_mean']:.2f}")
    return 0


def cmd_report(args):
    _ensure_fresh(args.out, args.force)
    written = report.render_run(args.run, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mire",
        description="Mix-and-reason domain generalization on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a dataset directory")
    _add_spec_args(p)
    p.add_argument("--heldout", type=int, default=None,
                   help="domain generated without the spurious cue")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("mix", help="phase 0 + saliency-guided mixing")
    _add_train_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="phase-0 checkpoint; trained on the fly if omitted")
    p.add_argument("--sources", type=int, nargs="+", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--export-pgm", default=None,
                   help="also dump mixed samples as PGM images")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_mix)

    p = sub.add_parser("gradcam", help="export saliency maps")
    _add_train_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gradcam)

    p = sub.add_parser("train", help="run phases 0-3 for one fold")
    _add_spec_args(p)
    _add_train_args(p)
    p.add_argument("--target", type=int, required=True,
                   help="held-out target domain")
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="leave-one-domain-out sweep")
    _add_spec_args(p)
    _add_train_args(p)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the full ablation table")
    _add_spec_args(p)
    _add_train_args(p)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render SVG plots and a summary")
    p.add_argument("--run", required=True, help="fold run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MireError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
