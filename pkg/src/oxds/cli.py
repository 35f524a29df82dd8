"""Command-line entry point: ``oxds train|embed|search|eval|fewshot|hash|synth``.

Exit status is 0 on success, 2 when input fails validation and 1 on any other
error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import harness, itq
from .dataset import load_dataset, read_manifest, write_features
from .errors import ValidationError
from .hypersphere import spherical_average
from .mapper import TrainConfig
from .metrics import format_value, parse_metrics, write_report
from .search import GalleryIndex, search
from .synth import SynthConfig, generate, parse_sigmas

log = logging.getLogger("oxds")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2
CLI_EPOCHS = 100


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True, help="directory holding <domain>.map files")
    p.add_argument("--sources", nargs="+", default=["all"],
                   help="domain sets; 'all' means each domain on its own, 'a+b' a multi-source set")
    p.add_argument("--targets", nargs="+", default=["all"])
    p.add_argument("--metrics", default="map,prec,nn,ft,st,e,dcg,ia_map")
    p.add_argument("--k", type=int, default=100, help="cutoff for prec and bare ia_map")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="refinement weight (default 0.4 seen / 0.7 unseen)")
    p.add_argument("--scale", type=float, default=20.0,
                   help="softmax scale; recorded only, cosine ranking does not depend on it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.add_argument("--plot", action="store_true", help="also write one heatmap PNG per metric next to --out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oxds", description="Open cross-domain visual search.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one domain's mapper")
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--epochs", type=int, default=CLI_EPOCHS)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--scale", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("embed", help="embed a domain's items into the shared space")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--split", choices=("all", "train", "eval"), default="eval")
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", help="rank a target gallery for one query")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--query", nargs="+", required=True, metavar="DOMAIN:ITEM",
                   help="query items; several are averaged into one query")
    p.add_argument("--targets", nargs="+", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--refine", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("eval", help="retrieval metrics over source/target domain sets")
    _add_eval_flags(p)

    p = sub.add_parser("hash", help="retrieval metrics with ITQ binary codes")
    _add_eval_flags(p)
    p.add_argument("--bits", type=int, default=itq.DEFAULT_BITS)
    p.add_argument("--iterations", type=int, default=itq.DEFAULT_ITERATIONS)
    p.add_argument("--codes", help="also write the target gallery codes to this file")

    p = sub.add_parser("fewshot", help="few-shot classification of unseen categories")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--mode", choices=harness.FEWSHOT_MODES, default="w2v")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--runs", type=int, default=500)
    p.add_argument("--lambda", dest="lam", type=float, default=harness.LAMBDA_UNSEEN)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("synth", help="write a synthetic multi-domain benchmark")
    p.add_argument("--categories", type=int, default=20)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--feat-dim", type=int, default=32)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--sigma", default="0.05", help="one value, or a comma list with one per domain")
    p.add_argument("--kappa", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--zero-shot-frac", type=float, default=0.0)
    p.add_argument("--nonlinear", action="store_true")
    return parser


def _emit(args, rows, comments=()):
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            write_report(rows, fh, comments)
        if getattr(args, "plot", False):
            from .plotting import plot_report

            for png in plot_report(rows, out):
                log.info("wrote %s", png)
    else:
        if getattr(args, "plot", False):
            raise ValidationError("--plot needs --out")
        write_report(rows, sys.stdout, comments)


def _run_train(args) -> None:
    cfg = TrainConfig(scale_s=args.scale, learning_rate=args.lr, momentum=args.momentum,
                      batch_size=args.batch, epochs=args.epochs, seed=args.seed)
    path = harness.cmd_train(args.manifest, args.domain, args.models, cfg)
    log.info("wrote %s", path)


def _run_embed(args) -> None:
    ds = load_dataset(args.manifest, domains=[args.domain])
    mapper = harness.load_models(args.models, [args.domain])[args.domain]
    if args.split == "all":
        ids = None
    elif args.split == "train":
        ids = ds.training_rows(args.domain).ids
    else:
        ids = ds.eval_query_ids | ds.eval_gallery_ids
    emb = harness.embed_domain(ds, mapper, args.domain, ids)
    write_features(args.out, emb.ids, emb.vectors)


def _run_search(args) -> None:
    members = []
    for tok in args.query:
        dom, sep, item = tok.partition(":")
        if not sep or not dom or not item:
            raise ValidationError(f"query {tok!r} is not DOMAIN:ITEM")
        members.append((dom, item))
    targets = sorted({d for t in args.targets for d in t.split("+") if d})
    domains = sorted({d for d, _ in members} | set(targets))
    ds = load_dataset(args.manifest, domains=domains)
    mappers = harness.load_models(args.models, domains)
    vecs = []
    for dom, item in members:
        emb = harness.embed_domain(ds, mappers[dom], dom, [item])
        if not emb.ids:
            raise ValidationError(f"item {item!r} not found in domain {dom!r}")
        vecs.append(emb.vectors[0])
    q = vecs[0] if len(vecs) == 1 else spherical_average(vecs)
    parts = [harness.embed_domain(ds, mappers[d], d) for d in targets]
    index = GalleryIndex([i for p in parts for i in p.ids],
                         [p.domain for p in parts for _ in p.ids],
                         [c for p in parts for c in p.categories],
                         np.vstack([p.vectors for p in parts]))
    exclude = tuple(item for _, item in members if item in index)
    if args.refine:
        lam = harness.default_lambda(ds.mode) if args.lam is None else args.lam
        q = harness.refine_vector(q, index, lam, exclude)
    ranking = search(q, index, args.k, exclude)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("rank", "item_id", "domain", "category", "score"))
    for r, hit in enumerate(ranking, 1):
        w.writerow((r, hit.item_id, hit.domain, hit.category, format_value(float(hit.score))))


def _run_eval(args) -> None:
    metrics = parse_metrics(args.metrics, args.k)
    rows = harness.cmd_eval(args.manifest, args.models, args.sources, args.targets, metrics,
                            args.refine, args.lam, args.seed)
    _emit(args, rows)


def _run_hash(args) -> None:
    metrics = parse_metrics(args.metrics, args.k)
    rows, model = harness.cmd_hash(args.manifest, args.models, args.sources, args.targets, metrics,
                                   args.bits, args.iterations, args.refine, args.lam, args.seed)
    _emit(args, rows, comments=("binary=true", f"bits={model.bits}"))
    if args.codes:
        ds_domains = list(read_manifest(args.manifest).features)
        targets = sorted({d for s in harness.expand_domain_sets(args.targets, ds_domains) for d in s})
        ds = load_dataset(args.manifest, domains=targets)
        ctx = harness.EvalContext(ds, harness.load_models(args.models, targets))
        g = ctx.gallery(targets)
        itq.write_codes(args.codes, itq.encode_many(model, g.item_ids, g.embeddings))


def _run_fewshot(args) -> None:
    row, res = harness.cmd_fewshot(args.manifest, args.models, args.source, args.target, args.mode,
                                   args.n, args.runs, args.lam, args.seed)
    _emit(args, [row], comments=(f"mode={res.mode}", f"runs={len(res.runs)}"))


def _run_synth(args) -> None:
    sig = parse_sigmas(args.sigma)
    cfg = SynthConfig(num_categories=args.categories, num_domains=args.domains, embed_dim=args.dim,
                      feature_dim=args.feat_dim, per_class=args.per_class,
                      sigma=sig[0] if len(sig) == 1 else sig, kappa=args.kappa, seed=args.seed,
                      zero_shot_frac=args.zero_shot_frac, nonlinear=args.nonlinear)
    print(generate(cfg, args.out))


COMMANDS = {
    "train": _run_train,
    "embed": _run_embed,
    "search": _run_search,
    "eval": _run_eval,
    "hash": _run_hash,
    "fewshot": _run_fewshot,
    "synth": _run_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which is already the validation code.
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"oxds: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"oxds: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
