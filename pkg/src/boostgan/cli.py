"""Command-line entry point: ``boostgan <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evalkit, gradcheck
from .checkpoint import CheckpointError
from .facedata import (load_image, load_manifest, load_sample, make_quadruple,
                       make_random_quadruple, FaceSample, KeypointSet, sample_seed, save_image)
from .fixture import write_fixture
from .generator import tensor_to_images
from .identity import train_standin
from .losses import TrainingFault
from .trainer import (ConfigError, TrainConfig, load_extractor, load_generators, save_extractor,
                      train)

log = logging.getLogger("boostgan")


class UsageError(ValueError):
    pass


def cmd_fixture(args):
    path = write_fixture(args.out, args.identities, seed=args.seed)
    print(path)


def cmd_standin(args):
    manifest = load_manifest(args.manifest)
    ext, acc = train_standin(manifest, args.epochs, args.seed, return_accuracy=True)
    save_extractor(ext, args.out)
    print(f"stand-in extractor written to {args.out} (training accuracy {acc:.3f})")


def cmd_occlude(args):
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(manifest.records):
        sample = load_sample(manifest, i)
        quad = make_quadruple(sample, args.mode, sample_seed(args.seed, i))
        stem = f"{i:05d}_{Path(rec.profile_path).stem}"
        for k, img in enumerate(quad.images, start=1):
            save_image(out / f"{stem}_b{k}.png", img)
        sidecar = {
            "record": i,
            "profile_path": rec.profile_path,
            "mode": args.mode,
            "seed": args.seed,
            "keypoints": rec.keypoints.flat(),
            "occlusions": [s.to_json() for s in quad.specs],
        }
        (out / f"{stem}_occlusion.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {4 * len(manifest)} occluded images for {len(manifest)} records to {out}")


def cmd_train(args):
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    if not config.manifest:
        raise ConfigError("manifest: required")
    final = train(config)
    print(final)


def _synth_inputs(args):
    if args.manifest:
        manifest = load_manifest(args.manifest)
        for i, rec in enumerate(manifest.records):
            yield (f"{i:05d}_{Path(rec.profile_path).stem}",
                   make_quadruple(load_sample(manifest, i), args.mode, sample_seed(args.seed, i)))
        return
    if args.mode != "random":
        raise UsageError("--mode keypoint needs --manifest (raw images carry no keypoints)")
    for i, path in enumerate(args.images):
        img = load_image(path)
        dummy = KeypointSet((0, 0), (0, 0), (0, 0), (0, 0))
        sample = FaceSample(img, img, dummy, 0, 0)
        yield Path(path).stem, make_random_quadruple(sample, sample_seed(args.seed, i))


def cmd_synthesize(args):
    if not args.manifest and not args.images:
        raise UsageError("give --manifest or one or more image paths")
    generator, booster = load_generators(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for stem, quad in _synth_inputs(args):
        coarse, boosted = evalkit.frontalize(generator, booster, quad)
        for k, c in enumerate(coarse, start=1):
            save_image(out / f"{stem}_c{k}.png", tensor_to_images(c.full)[0])
        save_image(out / f"{stem}_boost.png", tensor_to_images(boosted)[0])
        count += 1
    print(f"synthesized {count} inputs into {out}")


def cmd_evaluate(args):
    manifest = load_manifest(args.manifest)
    extractor = load_extractor(args.extractor)
    generator, booster = load_generators(args.checkpoint)
    records = evalkit.frontalize_and_embed(generator, booster, extractor, manifest, args.mode,
                                           args.seed, args.tap, frontalize_probes=not args.baseline)
    if args.protocol == "rank1":
        report = evalkit.rank1(*evalkit.split(records))
    else:
        report = evalkit.verify_10fold(evalkit.make_pairs(records, args.seed))
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.dumps() + "\n")
    return report


def cmd_gradcheck(args):
    results = gradcheck.run_all(args.seed)
    print(gradcheck.format_table(results))
    bad = [k for k, v in results.items() if v > gradcheck.TOLERANCE]
    if bad:
        raise TrainingFault(f"gradient check failed for: {', '.join(bad)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boostgan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("fixture", cmd_fixture, "render the synthetic face fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=8)

    p = add("standin", cmd_standin, "train the stand-in identity extractor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)

    p = add("occlude", cmd_occlude, "write occluded quadruples and their mask specs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("keypoint", "random"), default="keypoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.set_defaults(func=cmd_train)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="overrides the config out_dir")

    p = add("synthesize", cmd_synthesize, "frontalize images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=("keypoint", "random"), default="keypoint")
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="*")

    p = add("evaluate", cmd_evaluate, "run a recognition protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=("rank1", "verify"), default="rank1")
    p.add_argument("--mode", choices=("keypoint", "random"), default="keypoint")
    p.add_argument("--tap", choices=("fc", "pool"), default="fc")
    p.add_argument("--baseline", action="store_true",
                   help="embed the occluded profiles directly, without frontalization")
    p.add_argument("--out", help="write the JSON report here")

    add("gradcheck", cmd_gradcheck, "finite-difference gradient checks of every loss")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, CheckpointError, FloatingPointError, IndexError) as exc:
        # ConfigError, ManifestError, UsageError and TrainingFault land here too
        print(f"boostgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
