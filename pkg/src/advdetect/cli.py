"""Command-line entry point orchestrating the train/attack/evaluate workflows.

Subcommands: make-synthetic, train-detector, train-generator, attack, eval,
bench. Every subcommand accepts --config (YAML run configuration) and
--seed (overrides the config's seed). The attack methods are named
``uea`` (the one-pass generative attack) and ``dag`` (the iterative
gradient baseline); ``generative``/``iterative`` are accepted as aliases.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from advdetect import checkpoints, data as datamod
from advdetect.boxes import FrameSequence
from advdetect.config import RunConfig, load_config, save_config
from advdetect.detectors import train_toy_detector
from advdetect.evaluation import evaluate_attack, results_table, timing_benchmark, write_results
from advdetect.genattack import generate, generate_video, train_ablation, train_generator
from advdetect.iterattack import iterative_attack
from advdetect.losses import LossWeights

METHOD_ALIASES = {"uea": "uea", "generative": "uea", "dag": "dag", "iterative": "dag"}


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
        config.detector = replace(config.detector, seed=args.seed)
        config.generator = replace(config.generator, seed=args.seed)
        config.iterative = replace(config.iterative, seed=args.seed)
    return config


def _parse_weights(spec: str, base: LossWeights) -> LossWeights:
    """Parse overrides like 'alpha=0.1,beta=2,eps=1e-4:2e-4'."""
    kwargs = {}
    for part in spec.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key == "alpha":
            kwargs["alpha"] = float(value)
        elif key == "beta":
            kwargs["beta"] = float(value)
        elif key in ("eps", "epsilons"):
            kwargs["epsilons"] = tuple(float(v) for v in value.split(":"))
        else:
            raise ValueError(f"unknown loss weight {key!r}")
    return replace(base, **kwargs)


def cmd_make_synthetic(args) -> int:
    config = _load_run_config(args)
    d = config.data
    out = Path(args.out or d.root)
    train = datamod.generate_synthetic_dataset(
        d.num_images,
        d.num_classes,
        seed=config.seed,
        image_size=d.image_size,
        split="train",
        class_colors=d.class_colors,
    )
    test = datamod.generate_synthetic_dataset(
        d.num_test_images,
        d.num_classes,
        seed=config.seed + 1,
        image_size=d.image_size,
        split="test",
        class_colors=d.class_colors,
    )
    datamod.save_dataset(train, out)
    datamod.save_dataset(test, out)
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")
    return 0


def cmd_train_detector(args) -> int:
    config = _load_run_config(args)
    train = datamod.load_dataset(args.data, "train")
    test = datamod.load_dataset(args.data, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    families = ["proposal", "regression"] if args.family == "both" else [args.family]
    backbone = None
    for family in families:
        detector = train_toy_detector(family, train, test, config.detector, backbone=backbone)
        if backbone is None:
            backbone = detector.backbone
        path = out / f"{family}.pt"
        checkpoints.save_detector(detector, path)
        print(f"{family} detector: val mAP {detector.val_map:.3f} -> {path}")
    save_config(config, out / "run_config.yaml")
    return 0


def cmd_train_generator(args) -> int:
    config = _load_run_config(args)
    if args.epochs is not None:
        config.generator = replace(config.generator, epochs=args.epochs)
    weights = config.weights
    if args.weights:
        weights = _parse_weights(args.weights, weights)
    train = datamod.load_dataset(args.data, "train")
    victim = checkpoints.load_detector(args.victim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = train_ablation if args.no_feature_loss else train_generator
    result = trainer(
        victim,
        train,
        weights=weights,
        config=config.generator,
        log_path=out / "training_log.jsonl",
        checkpoint_dir=out / "checkpoints",
    )
    checkpoints.save_generator_bundle(result, out / "generator.pt")
    save_config(config, out / "run_config.yaml")
    last = result.log[-1].as_dict() if result.log else {}
    print(f"generator trained ({config.generator.epochs} epochs) -> {out / 'generator.pt'}")
    if last:
        print(f"final losses: {json.dumps(last)}")
    return 0


def cmd_attack(args) -> int:
    config = _load_run_config(args)
    method = METHOD_ALIASES[args.method]
    out = Path(args.out)
    records = []
    if args.input == "image":
        paths = [Path(args.source)]
        if paths[0].is_dir():
            paths = sorted(
                p for p in paths[0].iterdir() if p.suffix.lower() in datamod.IMAGE_EXTENSIONS
            )
        out.mkdir(parents=True, exist_ok=True)
        if method == "uea":
            bundle = checkpoints.load_generator_bundle(args.generator)
            for p in paths:
                art = generate(bundle.generator, datamod.load_image(p))
                datamod.save_image(art.adversarial, out / p.name)
                records.append(
                    {"image": p.name, "time": art.wall_time, "l2": art.mean_l2, "linf": art.linf}
                )
        else:
            victim = checkpoints.load_detector(args.victim)
            for p in paths:
                art, iters = iterative_attack(victim, datamod.load_image(p), config.iterative)
                datamod.save_image(art.adversarial, out / p.name)
                records.append(
                    {
                        "image": p.name,
                        "time": art.wall_time,
                        "l2": art.mean_l2,
                        "linf": art.linf,
                        "iterations": iters,
                    }
                )
    else:  # frames
        frames = datamod.load_frames(args.source)
        if method == "uea":
            bundle = checkpoints.load_generator_bundle(args.generator)
            adv, total = generate_video(bundle.generator, frames)
            datamod.save_frames(adv, out)
            records.append({"frames": len(adv), "total_time": total})
        else:
            victim = checkpoints.load_detector(args.victim)
            adv_frames = []
            total = 0.0
            for f in frames.frames:
                art, iters = iterative_attack(victim, f, config.iterative)
                adv_frames.append(art.adversarial)
                total += art.wall_time
            datamod.save_frames(FrameSequence(tuple(adv_frames), fps=frames.fps), out)
            records.append({"frames": len(adv_frames), "total_time": total})
    with open(out / "attack_records.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    print(f"attacked {args.input} input with {method} -> {out}")
    return 0


def _detect_fn(detector):
    return lambda img: detector.detect(img, 0.0)


def cmd_eval(args) -> int:
    _load_run_config(args)
    test = datamod.load_dataset(args.data, args.split)
    clean = [e.load() for e in test.entries]
    gts = [list(e.objects) for e in test.entries]
    adv_dir = Path(args.adv)
    adv = []
    for e in test.entries:
        path = adv_dir / f"{e.image_id}.png"
        adv.append(datamod.load_image(path, e.image_id) if path.is_file() else e.load())
    detector = checkpoints.load_detector(args.victim)
    report = evaluate_attack(_detect_fn(detector), clean, adv, gts, test.num_classes)
    out = Path(args.out or "eval_results.jsonl")
    per_image = [
        {"image": e.image_id, "fooled": flags}
        for e, flags in zip(test.entries, report.fooled_flags)
    ]
    write_results(out, {detector.family: report}, per_image)
    print(json.dumps(report.summary()))
    print(f"mAP drop: {report.map_drop:.4f} -> {out}")
    return 0


def cmd_bench(args) -> int:
    config = _load_run_config(args)
    test = datamod.load_dataset(args.data, "test")
    images = [e.load() for e in test.entries[: args.num]]
    bundle = checkpoints.load_generator_bundle(args.generator)
    victim = checkpoints.load_detector(args.victim)
    gen_stats = timing_benchmark(lambda img: generate(bundle.generator, img), images)
    iter_stats = timing_benchmark(
        lambda img: iterative_attack(victim, img, config.iterative), images
    )
    ratio = iter_stats.mean / max(gen_stats.mean, 1e-12)
    table = results_table(
        {
            "UEA": {"time": gen_stats.mean},
            "DAG": {"time": iter_stats.mean},
        }
    )
    print(table)
    print(f"speed ratio (DAG / UEA): {ratio:.1f}x")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advdetect")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("make-synthetic", help="render a synthetic shapes dataset")
    common(p)
    p.add_argument("--out", help="output directory (default: config data root)")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train-detector", help="train the toy victim detectors")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--family", choices=["proposal", "regression", "both"], default="both")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-generator", help="train the adversarial generator")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--victim", required=True, help="proposal detector checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-feature-loss", action="store_true", help="class-loss-only ablation")
    p.add_argument("--weights", help="loss weight overrides, e.g. alpha=0.1,eps=1e-4:2e-4")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("attack", help="generate adversarial images or frames")
    common(p)
    p.add_argument("--method", choices=sorted(METHOD_ALIASES), required=True)
    p.add_argument("--input", choices=["image", "frames"], default="image")
    p.add_argument("--source", required=True, help="image file/dir or frame directory")
    p.add_argument("--out", required=True)
    p.add_argument("--generator", help="generator bundle (uea)")
    p.add_argument("--victim", help="proposal detector checkpoint (dag)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="evaluate an attack (mAP drop)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--adv", required=True, help="directory of adversarial images")
    p.add_argument("--victim", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="timing comparison of the two attacks")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--num", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        raise
    except Exception as e:  # noqa: BLE001 - single diagnostic line, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
