"""Command-line entry point: ``gtloc <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Errors are printed to stderr as a single JSON line with ``error``,
``origin`` and ``message`` keys.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigFile, load_config, serialize_config
from .datastore import (
    load_dataset,
    make_splits,
    read_embeddings,
    subsample,
    synth_generate,
    write_dataset,
)
from .diffnet import l2_normalize
from .errors import DataError, GTLocError, InvalidInputError
from .geotime import DateTuple, GeoCoord, tuple2cyclic, tuple2cyclic_daily
from .retrieval import (
    DEFAULT_THRESHOLDS_KM,
    build_gallery,
    build_image_gallery,
    composed_retrieval,
    eval_geo,
    eval_time,
    format_table,
    load_gallery,
    refresh_gallery,
    retrieve,
    sample_gallery_labels,
    save_gallery,
    time_histogram,
    write_histogram_csv,
    write_metrics_csv,
)
from .trainer import (
    TrainingAborted,
    TrainConfig,
    desk_config,
    load_checkpoint,
    resume,
    save_checkpoint,
    train,
)

log = logging.getLogger("gtloc")

MODE_ALIASES = {"gtloc": "gtloc", "timeloc": "timeloc", "geoloc": "geoloc_only", "geoloc_only": "geoloc_only"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInputError(message, "cli")


def _emit_error(exc: GTLocError) -> int:
    rec = {"error": exc.kind, "origin": exc.origin or "gtloc", "message": str(exc)}
    print(json.dumps(rec), file=sys.stderr)
    return exc.exit_code


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"expected comma-separated numbers, got {text!r}", "cli") from exc


def _train_part(ds):
    return ds.part("train") if ds.split is not None else ds


def _eval_part(ds, name: str):
    if ds.split is None:
        return ds
    part = ds.part(name)
    if len(part) == 0:
        raise DataError(f"dataset has no rows in split {name!r}", "cli")
    return part


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    ds = synth_generate(
        args.n, seed=args.seed, dim=args.dim, n_sources=args.sources, noise_std=args.noise,
        time_dist=args.time_dist, wrap_spread=args.wrap_spread,
    )
    if args.split != "none":
        ds = ds.with_split(make_splits(ds, args.split, (1 - args.eval_fraction, args.eval_fraction), args.seed))
    out = write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {out}")
    return 0


def _train_config(args) -> tuple[TrainConfig, dict]:
    base = desk_config() if args.preset == "desk" else TrainConfig()
    cf = load_config(args.config, base) if args.config else ConfigFile(base, {})
    cfg = cf.train
    if args.mode:
        cfg = replace(cfg, mode=MODE_ALIASES[args.mode])
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, model=replace(cfg.model, seed=args.seed))
    if args.label_noise is not None:
        cfg = replace(cfg, noise=replace(cfg.noise, label_noise_sigma=args.label_noise))
    return cfg, cf.paths


def cmd_train(args) -> int:
    cfg, paths = _train_config(args)
    data = args.data or paths.get("data")
    out = args.out or paths.get("out")
    if not data or not out:
        raise InvalidInputError("--data and --out are required (or [paths] data/out in the config)", "cli")
    log_path = args.log or paths.get("log") or str(out) + ".log.jsonl"
    ds = _train_part(load_dataset(data))
    if args.subsample is not None:
        ds = subsample(ds, args.subsample, cfg.seed)
    try:
        if args.resume:
            ckpt = load_checkpoint(args.resume)
            res = resume(ckpt, ds, {"epochs": cfg.epochs}, log_path=log_path)
        else:
            res = train(ds, cfg, log_path=log_path)
    except TrainingAborted as exc:
        save_checkpoint(exc.checkpoint, out)
        raise
    h = save_checkpoint(res.checkpoint, out)
    print(f"trained {res.checkpoint.step} steps; checkpoint {out} ({h[:12]})")
    return 0


def cmd_make_gallery(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    h = ckpt.content_hash
    if args.kind == "image":
        g = build_image_gallery(ckpt.model, _eval_part(ds, args.split), ckpt.config.time_scale, h)
    else:
        labels = sample_gallery_labels(_train_part(ds), args.kind, args.size, args.seed, ckpt.config.time_scale)
        g = build_gallery(args.kind, labels, ckpt.model, h)
    save_gallery(g, args.out)
    print(f"wrote {args.kind} gallery of {len(g)} items to {args.out}")
    return 0


def _gallery(path, ckpt, kind: str):
    g = load_gallery(path)
    if g.kind != kind:
        raise DataError(f"{path} is a {g.kind} gallery, expected {kind}", "cli")
    return refresh_gallery(g, ckpt.model, ckpt.content_hash)


def cmd_eval(args) -> int:
    if not args.time_gallery and not args.gps_gallery:
        raise InvalidInputError("give --time-gallery and/or --gps-gallery", "cli")
    ckpt = load_checkpoint(args.ckpt)
    ds = _eval_part(load_dataset(args.data), args.split)
    rows = []
    if args.time_gallery:
        rows += eval_time(ckpt.model, ds, _gallery(args.time_gallery, ckpt, "time"), ckpt.config.time_scale).rows()
    if args.gps_gallery:
        rows += eval_geo(ckpt.model, ds, _gallery(args.gps_gallery, ckpt, "gps"), _floats(args.thresholds)).rows()
    if args.out:
        write_metrics_csv(args.out, rows)
    print(format_table(rows))
    return 0


def _query_embeddings(ckpt, path, space: str) -> np.ndarray:
    emb = read_embeddings(path)
    cfg = ckpt.model.cfg
    if space == "auto":
        if emb.shape[1] == cfg.backbone_dim:
            space = "backbone"
        elif emb.shape[1] == cfg.embed_dim:
            space = "joint"
        else:
            raise DataError(
                f"{path}: {emb.shape[1]}-d vectors match neither the backbone ({cfg.backbone_dim}) "
                f"nor the embedding ({cfg.embed_dim}) dimension", "cli",
            )
    if space == "backbone":
        return ckpt.model.embed_images(emb)
    if emb.shape[1] != cfg.embed_dim:
        raise DataError(f"{path}: joint-space queries must be {cfg.embed_dim}-d", "cli")
    return l2_normalize(emb.astype(np.float32))[0]


def cmd_predict(args) -> int:
    if not args.time_gallery and not args.gps_gallery:
        raise InvalidInputError("give --time-gallery and/or --gps-gallery", "cli")
    ckpt = load_checkpoint(args.ckpt)
    Q = _query_embeddings(ckpt, args.embedding_file, args.space)
    galleries = []
    if args.time_gallery:
        galleries.append(_gallery(args.time_gallery, ckpt, "time"))
    if args.gps_gallery:
        galleries.append(_gallery(args.gps_gallery, ckpt, "gps"))
    for g in galleries:
        if not 1 <= args.topk <= len(g):
            raise InvalidInputError(f"--topk {args.topk} outside [1, {len(g)}] for the {g.kind} gallery", "cli")
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    hists = []
    try:
        w = csv.writer(out)
        w.writerow(["query", "kind", "rank", "index", "a", "b", "similarity"])
        for i, q in enumerate(Q):
            for g in galleries:
                r = retrieve(q, g, args.topk)
                for rank, (j, s) in enumerate(zip(r.indices, r.similarities), 1):
                    a, b = g.items[j]
                    w.writerow([i, g.kind, rank, int(j), repr(float(a)), repr(float(b)), repr(float(s))])
            if args.histogram and args.time_gallery:
                tg = galleries[0]
                hm, hh = time_histogram(q, tg, topk=min(args.histogram_topk, len(tg)))
                hists.append((str(i), hm, hh))
    finally:
        if out is not sys.stdout:
            out.close()
    if args.histogram:
        if not args.time_gallery:
            raise InvalidInputError("--histogram needs --time-gallery", "cli")
        write_histogram_csv(args.histogram, hists)
    return 0


_TIME_RE = re.compile(r"^\s*(\d{1,2})-(\d{1,2})\s+(\d{1,2}):(\d{2})\s*$")


def parse_query_time(text: str, scale: str = "monthly"):
    """``"MM-DD HH:MM"`` to cyclic time."""
    m = _TIME_RE.match(text)
    if not m:
        raise InvalidInputError(f"time {text!r} is not in 'MM-DD HH:MM' form", "cli")
    month, day, hour, minute = (int(v) for v in m.groups())
    d = DateTuple(month, day, hour, minute)
    return tuple2cyclic_daily(d) if scale == "daily" else tuple2cyclic(d)


def cmd_compose(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    t = parse_query_time(args.time, ckpt.config.time_scale)
    geo = GeoCoord(args.lat, args.lon)
    g = load_gallery(args.image_gallery)
    if g.kind != "image":
        raise DataError(f"{args.image_gallery} is a {g.kind} gallery, expected image", "cli")
    if g.ckpt_hash != ckpt.content_hash:
        raise DataError("image gallery was built with a different checkpoint; rebuild it", "cli")
    r = composed_retrieval(t, geo, ckpt.model, g, args.topk)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["rank", "id", "lat", "lon", "theta", "phi", "similarity"])
        for rank, (j, s) in enumerate(zip(r.indices, r.similarities), 1):
            w.writerow([rank, g.ids[j], repr(float(g.items[j, 0])), repr(float(g.items[j, 1])),
                        repr(float(g.times[j, 0])), repr(float(g.times[j, 1])), repr(float(s))])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_config(args) -> int:
    base = desk_config() if args.preset == "desk" else TrainConfig()
    cf = load_config(args.config, base) if args.config else ConfigFile(base, {})
    sys.stdout.write(serialize_config(cf))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gtloc", description="Joint time and geo-location retrieval over image embeddings.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads; 1 guarantees bit-identical reruns")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--dim", type=int, default=768, help="backbone vector dimension")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--sources", type=int, default=None, help="number of camera sites (default n/20)")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std on backbone vectors")
    s.add_argument("--time-dist", choices=["uniform", "wrap"], default="uniform",
                   help="'wrap' clusters times around New Year and midnight")
    s.add_argument("--wrap-spread", type=float, default=0.2, help="spread of 'wrap' times, torus units")
    s.add_argument("--split", choices=["random", "cross_source", "none"], default="random",
                   help="how to assign train/eval rows")
    s.add_argument("--eval-fraction", type=float, default=0.25, help="fraction of rows (or sources) held out")
    s.set_defaults(func=cmd_synth)

    def add_train_opts(t):
        t.add_argument("--config", help="INI config file; flags override it")
        t.add_argument("--preset", choices=["desk", "full"], default="desk",
                       help="base settings before the config file (default desk)")
        t.add_argument("--mode", choices=sorted(MODE_ALIASES), help="which losses to train")
        t.add_argument("--epochs", type=int, help="override the epoch count")
        t.add_argument("--seed", type=int, help="override the run and initialization seed")
        t.add_argument("--label-noise", type=float, help="Gaussian label noise sigma (months/hours)")

    t = sub.add_parser("train", help="train a checkpoint")
    t.add_argument("--data", help="dataset directory (train split is used if present)")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="JSONL training log (default <out>.log.jsonl)")
    t.add_argument("--subsample", type=float, help="train on this fraction of the training rows")
    t.add_argument("--resume", help="continue from this checkpoint")
    add_train_opts(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("config", help="print the effective training configuration")
    c.add_argument("--config", help="INI config file")
    c.add_argument("--preset", choices=["desk", "full"], default="desk", help="base settings")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("make-gallery", help="encode a gallery of labels or images")
    g.add_argument("--ckpt", required=True, help="checkpoint path")
    g.add_argument("--data", required=True, help="dataset directory")
    g.add_argument("--kind", choices=["gps", "time", "image"], required=True, help="gallery kind")
    g.add_argument("--size", type=int, default=4096, help="labels to sample from the train split")
    g.add_argument("--seed", type=int, default=0, help="sampling seed")
    g.add_argument("--split", default="eval", help="split whose images form an image gallery")
    g.add_argument("--out", required=True, help="gallery path (a .csv label sidecar is written next to it)")
    g.set_defaults(func=cmd_make_gallery)

    e = sub.add_parser("eval", help="time and geo-location metrics on the eval split")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--time-gallery", help="time gallery path")
    e.add_argument("--gps-gallery", help="gps gallery path")
    e.add_argument("--thresholds", default=",".join(str(int(t)) for t in DEFAULT_THRESHOLDS_KM),
                   help="comma-separated km thresholds")
    e.add_argument("--split", default="eval", help="split to evaluate")
    e.add_argument("--out", help="metric CSV path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="rank gallery labels for query embeddings")
    r.add_argument("--ckpt", required=True, help="checkpoint path")
    r.add_argument("--embedding-file", required=True, help="query vectors in the embedding blob format")
    r.add_argument("--space", choices=["auto", "backbone", "joint"], default="auto",
                   help="whether queries are backbone vectors or already in the joint space")
    r.add_argument("--time-gallery", help="time gallery path")
    r.add_argument("--gps-gallery", help="gps gallery path")
    r.add_argument("--topk", type=int, default=1, help="results per query and gallery")
    r.add_argument("--histogram", help="write month/hour histograms to this CSV")
    r.add_argument("--histogram-topk", type=int, default=1000, help="retrieved times per histogram")
    r.add_argument("--out", help="prediction CSV path (default stdout)")
    r.set_defaults(func=cmd_predict)

    m = sub.add_parser("compose", help="retrieve images for a joint time and place query")
    m.add_argument("--ckpt", required=True, help="checkpoint path")
    m.add_argument("--time", required=True, help="query time as 'MM-DD HH:MM' (UTC)")
    m.add_argument("--lat", type=float, required=True, help="query latitude")
    m.add_argument("--lon", type=float, required=True, help="query longitude")
    m.add_argument("--image-gallery", required=True, help="image gallery path")
    m.add_argument("--topk", type=int, default=10, help="images to return")
    m.add_argument("--out", help="result CSV path (default stdout)")
    m.set_defaults(func=cmd_compose)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise InvalidInputError("--threads must be at least 1", "cli")
        if args.threads is None:
            return args.func(args)
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except GTLocError as exc:
        return _emit_error(exc)
    except OSError as exc:
        return _emit_error(DataError(f"{exc.filename or ''}: {exc.strerror}", "cli"))


if __name__ == "__main__":
    sys.exit(main())
