"""Command-line entry point for the extractor.

Mirrors the training tool's flag style.  Exit codes: 0 success,
1 runtime failure (missing weights, download failure), 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encoders import EncoderUnavailable, load_dataset
from .extract import extract_image_features, extract_text_proxies
from .jobs import DEFAULT_TEMPLATE, ExtractionJob


def cmd_images(args) -> int:
    job = ExtractionJob(
        dataset=args.dataset,
        encoder=args.encoder,
        output_prefix=args.out,
        batch_size=args.batch_size,
        device=args.device,
        extra={"root": args.root},
    )
    manifest = extract_image_features(job)
    print(f"wrote {manifest['n']} x {manifest['dim']} features from "
          f"{manifest['encoder']} to {args.out}")
    return 0


def cmd_proxies(args) -> int:
    if args.class_names:
        names = [line for line in Path(args.class_names).read_text(encoding="utf-8").splitlines()]
    elif args.dataset:
        _, names = load_dataset(args.dataset, root=args.root)
    else:
        raise ValueError("provide --class-names FILE or --dataset NAME")
    encoder_args = {}
    if args.pooling:
        encoder_args["pooling"] = args.pooling
    job = ExtractionJob(
        dataset=args.dataset or "",
        encoder=args.encoder,
        output_prefix=args.out,
        prompt_template=args.template,
        category=args.category,
        batch_size=args.batch_size,
        device=args.device,
        extra={"encoder_args": encoder_args},
    )
    manifest = extract_text_proxies(job, names, ensemble=args.ensemble)
    print(f"wrote {manifest['n_classes']} x {manifest['dim']} proxies from "
          f"{manifest['encoder']} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tes-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("images", help="dump image embeddings to TESF/TESL files")
    p.add_argument("--dataset", required=True,
                   help="cifar10-train | cifar10-test | imagefolder:PATH | synthetic-rgb:CxN")
    p.add_argument("--encoder", required=True,
                   help="clip-vit-b32 | resnet18 | resnet50 | vit-b32 | stubD")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--device", default="cpu")
    p.add_argument("--root", default="datasets", help="dataset download/cache directory")
    p.set_defaults(func=cmd_images)

    p = sub.add_parser("proxies", help="dump class-name text proxies to a TESF file")
    p.add_argument("--encoder", required=True, help="clip-vit-b32 | bert-base | stubD")
    p.add_argument("--out", required=True)
    p.add_argument("--class-names", dest="class_names",
                   help="file with one class name per line")
    p.add_argument("--dataset", help="take class names from this dataset instead")
    p.add_argument("--template", default=DEFAULT_TEMPLATE)
    p.add_argument("--category", default="", help="fills the optional {category} slot")
    p.add_argument("--ensemble", action="store_true",
                   help="average a prompt ensemble per class (normalized after averaging)")
    p.add_argument("--pooling", choices=["cls", "mean"],
                   help="text pooling for BERT-style encoders")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--device", default="cpu")
    p.add_argument("--root", default="datasets")
    p.set_defaults(func=cmd_proxies)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EncoderUnavailable, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
