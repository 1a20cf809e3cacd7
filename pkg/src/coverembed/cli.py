"""Command-line pipeline: preprocess, train, embed, query, evaluate, stats.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import frontend, preprocess
from .dataset import Manifest, Split, load_manifest, save_manifest, split_by_work
from .encoder import Encoder, EncoderConfig, embed_tracks
from .errors import ConfigError, CoverEmbedError, DataError
from .metrics import DistanceHistogramPair, evaluate, pair_distances, posterior_curve, roc
from .store import EmbeddingStore, export_rankings_csv
from .training import TrackSet, TripletConfig, train

logger = logging.getLogger("coverembed")

_TRIP = TripletConfig()
_ENC = EncoderConfig()


def _safe_name(track_id: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9._-]", "_", track_id)[:80]
    return f"{stem}-{hashlib.sha1(track_id.encode()).hexdigest()[:8]}.f0"


def load_input(manifest: Manifest, record) -> np.ndarray:
    """1024x36 encoder input for a record: cached, raw F0, or computed from audio."""
    path = manifest.resolve(record.f0_path)
    if path is not None and path.exists():
        f0 = frontend.load_f0(path)
        if f0.shape == (preprocess.OUT_TIME, preprocess.OUT_FREQ) and f0.bins_per_semitone == 1:
            return f0.salience
    else:
        audio_path = manifest.resolve(record.audio_path)
        if audio_path is None or not audio_path.exists():
            raise DataError(f"no input file for track {record.track_id!r}")
        audio, sr = frontend.load_wav(audio_path)
        f0 = frontend.extract_f0_baseline(frontend.compute_cqt(audio, sr), track_id=record.track_id)
    f0.track_id = record.track_id
    return preprocess.preprocess_pipeline(f0).values


def _load_track_set(manifest: Manifest, track_ids) -> TrackSet:
    recs = manifest.by_track()
    ids, works, mats = [], [], []
    for tid in track_ids:
        try:
            mats.append(load_input(manifest, recs[tid]))
        except (CoverEmbedError, OSError) as exc:
            logger.warning("skipping %s: %s", tid, exc)
            continue
        ids.append(tid)
        works.append(recs[tid].work_id)
    if not mats:
        raise DataError("no usable tracks")
    return TrackSet(np.stack(mats), np.array(works), ids)


# --- subcommands -------------------------------------------------------------

def cmd_preprocess(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, failures = [], []
    for rec in manifest:
        try:
            values = load_input(manifest, rec)
        except (CoverEmbedError, OSError) as exc:
            logger.warning("track %s failed: %s", rec.track_id, exc)
            failures.append({"track_id": rec.track_id, "error": str(exc)})
            continue
        name = _safe_name(rec.track_id)
        blob = frontend.encode_f0(preprocess.to_f0(preprocess.PreprocessedInput(values, rec.track_id)))
        target = out / name
        if not target.exists() or target.read_bytes() != blob:
            target.write_bytes(blob)
        records.append(type(rec)(rec.track_id, rec.work_id, rec.duration_sec, name, rec.audio_path))
    save_manifest(Manifest(records), out / "manifest.jsonl")
    (out / "failures.json").write_text(json.dumps(failures, indent=1))
    logger.info("preprocessed %d tracks, %d failures", len(records), len(failures))
    if manifest.records and not records:
        return DataError.exit_code
    return 0


def _configs(args) -> tuple[EncoderConfig, TripletConfig]:
    if args.batch_size % args.covers_per_work:
        raise ConfigError("--batch-size must be a multiple of --covers-per-work")
    enc = EncoderConfig(k_kernels=args.k_kernels, embed_dim=args.embed_dim)
    trip = TripletConfig(margin=args.margin, batch_size=args.batch_size,
                         works_per_batch=args.batch_size // args.covers_per_work,
                         covers_per_work=args.covers_per_work, initial_lr=args.lr,
                         plateau_window=args.plateau_window, max_steps=args.max_steps,
                         eval_every=args.eval_every, eval_batches=args.eval_batches, seed=args.seed)
    return enc, trip


def cmd_train(args) -> int:
    enc_cfg, trip_cfg = _configs(args)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_split, eval_split = split_by_work(manifest, args.eval_fraction, args.covers_per_work, args.seed)
    train_split.save(out / "train_split.json")
    eval_split.save(out / "eval_split.json")
    result = train(_load_track_set(manifest, train_split.track_ids),
                   _load_track_set(manifest, eval_split.track_ids), enc_cfg, trip_cfg,
                   log_path=out / "train_log.csv", checkpoint_path=out / "checkpoint.cvnw",
                   progress_every=args.eval_every)
    logger.info("best eval loss %.4f at step %d (%s)", result.best_eval_loss, result.best_step, result.stop_reason)
    return 0


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _embed_manifest(manifest: Manifest, checkpoint, parallelism: int, batch_size: int) -> EmbeddingStore:
    encoder, _ = Encoder.load(checkpoint)
    items = [(r.track_id, (lambda r=r: load_input(manifest, r))) for r in manifest]
    embeddings, failures = embed_tracks(items, encoder, parallelism, batch_size)
    for tid, err in failures:
        logger.warning("embedding failed for %s: %s", tid, err)
    if manifest.records and not embeddings:
        raise DataError("every track failed to embed")
    return EmbeddingStore.from_embeddings(embeddings, encoder.config.embed_dim, _file_hash(checkpoint))


def cmd_embed(args) -> int:
    manifest = load_manifest(args.manifest)
    store = _embed_manifest(manifest, args.checkpoint, args.parallelism, args.infer_batch_size)
    store.save(args.out)
    logger.info("wrote %d embeddings to %s", len(store), args.out)
    return 0


def _select(store: EmbeddingStore, split_path) -> EmbeddingStore:
    if split_path is None:
        return store
    wanted = Split.load(split_path).track_ids
    missing = [t for t in wanted if t not in store._index]
    if missing:
        raise DataError(f"{len(missing)} split tracks absent from the store (first: {missing[0]})")
    sub = EmbeddingStore(store.dim, store.checkpoint_hash)
    sub.extend(wanted, np.array([store.vector(t) for t in wanted]).reshape(-1, store.dim))
    return sub


def _rankings(args):
    store = EmbeddingStore.load(args.store)
    reference = _select(store, args.reference_split)
    if args.query_store:
        queries = EmbeddingStore.load(args.query_store)
    else:
        queries = _select(store, args.query_split)
    work_of = None
    if args.manifest:
        work_of = {r.track_id: r.work_id for r in load_manifest(args.manifest)}
    results = reference.cross_distances(queries.ids, queries.matrix, work_of, args.exclude_self)
    return results, reference


def cmd_query(args) -> int:
    results, _ = _rankings(args)
    export_rankings_csv(results, args.out, top_k=args.top_k)
    return 0


def cmd_evaluate(args) -> int:
    if not args.manifest:
        raise ConfigError("--manifest is required to label cover pairs")
    results, reference = _rankings(args)
    report = evaluate(results, n_reference=len(reference), bins=args.bins, laplace=args.laplace)
    Path(args.out).write_text(json.dumps(report, indent=1))
    if args.roc_csv:
        cov, non = pair_distances(results)
        r = roc(cov, non)
        with open(args.roc_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            w.writerows(zip(r.thresholds.tolist(), r.fpr.tolist(), r.tpr.tolist()))
    logger.info("MAP %.3f MT10 %.2f MR1 %.1f AuC %.3f", report["MAP"], report["MT10"], report["MR1"], report["AuC"])
    return 0


def cmd_stats(args) -> int:
    if not args.manifest:
        raise ConfigError("--manifest is required to label cover pairs")
    results, _ = _rankings(args)
    cov, non = pair_distances(results)
    hist = DistanceHistogramPair.from_distances(cov, non, bins=args.bins, laplace=args.laplace)
    p_c, p_nc = hist.densities()
    post = posterior_curve(hist, args.prior)
    out = Path(args.out)
    payload = {
        "bin_centers": hist.centers.tolist(), "edges": hist.edges.tolist(),
        "p_cover": p_c.tolist(), "p_noncover": p_nc.tolist(),
        "posterior": [None if np.isnan(v) else float(v) for v in post],
        "cover_prior": hist.cover_prior() if args.prior is None else args.prior,
        "laplace_smoothing": args.laplace,
    }
    out.write_text(json.dumps(payload, indent=1))
    with out.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "p_cover", "p_noncover", "posterior"])
        for row in zip(hist.centers, p_c, p_nc, post):
            w.writerow([f"{v:.6g}" for v in row])
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="coverembed", description=__doc__, formatter_class=fmt)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="cache 1024x36 inputs for every manifest track", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="cache directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the encoder with triplet loss", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--k-kernels", type=int, default=_ENC.k_kernels, help="first-block channels K")
    p.add_argument("--embed-dim", type=int, default=_ENC.embed_dim, help="embedding size E")
    p.add_argument("--batch-size", type=int, default=_TRIP.batch_size, help="tracks per batch")
    p.add_argument("--covers-per-work", type=int, default=_TRIP.covers_per_work, help="tracks of each work in a batch")
    p.add_argument("--margin", type=float, default=_TRIP.margin, help="triplet margin")
    p.add_argument("--lr", type=float, default=_TRIP.initial_lr, help="initial Adam learning rate")
    p.add_argument("--max-steps", type=int, default=_TRIP.max_steps, help="step budget")
    p.add_argument("--eval-every", type=int, default=_TRIP.eval_every, help="steps between evaluations")
    p.add_argument("--eval-batches", type=int, default=_TRIP.eval_batches, help="fixed evaluation batches")
    p.add_argument("--plateau-window", type=int, default=_TRIP.plateau_window, help="steps without improvement before halving lr")
    p.add_argument("--eval-fraction", type=float, default=1244 / 7460, help="fraction of works held out for evaluation")
    p.add_argument("--seed", type=int, default=42, help="random seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed manifest tracks into a store", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="store file (.cvre)")
    p.add_argument("--parallelism", type=int, default=1, help="worker threads")
    p.add_argument("--infer-batch-size", type=int, default=32, help="tracks per forward pass")
    p.set_defaults(func=cmd_embed)

    for name, func, help_ in [("query", cmd_query, "rank references for each query (CSV)"),
                              ("evaluate", cmd_evaluate, "ranking and separation metrics (JSON)"),
                              ("stats", cmd_stats, "distance histograms and cover posterior")]:
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--store", required=True, help="reference embeddings (.cvre)")
        p.add_argument("--query-store", help="query embeddings; default: queries drawn from --store")
        p.add_argument("--query-split", help="split JSON selecting query tracks from --store")
        p.add_argument("--reference-split", help="split JSON selecting reference tracks from --store")
        p.add_argument("--manifest", help="manifest giving work ids for cover labels")
        p.add_argument("--exclude-self", action="store_true", help="drop query==reference pairs")
        p.add_argument("--out", required=True)
        if name == "query":
            p.add_argument("--top-k", type=int, default=10, help="references written per query")
        else:
            p.add_argument("--bins", type=int, default=200, help="histogram bins on [0, 4]")
            p.add_argument("--laplace", action="store_true", help="add one count per bin and class")
        if name == "evaluate":
            p.add_argument("--roc-csv", help="also write ROC points here")
        if name == "stats":
            p.add_argument("--prior", type=float, help="cover prior; default: empirical pair fraction")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "top_k", 1) is not None and getattr(args, "top_k", 1) < 1:
        logger.error("--top-k must be >= 1")
        return ConfigError.exit_code
    try:
        return args.func(args)
    except CoverEmbedError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
