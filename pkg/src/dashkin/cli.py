"""Command-line pipeline: decode, build, synth, train, grid, report, events.

Each subcommand maps to one pipeline stage and leaves inspectable files
behind. Exit code 0 on success, 2 on input-format errors, 1 on any other
module error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import cansig, datastore, evalreport, events as events_mod, models, sync, synthgen, train as train_mod

log = logging.getLogger("dashkin")

DEFAULT_VAL_FRACTION = 2.5 / 18.0


class ManifestError(ValueError):
    """The build manifest is malformed."""


@dataclass(frozen=True)
class ManifestEntry:
    video_path: Path
    video_start_time_s: float
    video_fps: float
    can_csv_path: Path


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Manifest JSON: a list of {video_path, video_start_time_s,
    video_fps, can_csv_path}; relative paths resolve against the manifest
    directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise ManifestError(f"{path}: manifest must be a JSON list")
    entries = []
    base = path.parent
    required = ("video_path", "video_start_time_s", "video_fps", "can_csv_path")
    for i, item in enumerate(doc):
        missing = [k for k in required if k not in item]
        if missing:
            raise ManifestError(f"{path}: entry {i} missing keys {missing}")
        entries.append(ManifestEntry(
            video_path=base / item["video_path"],
            video_start_time_s=float(item["video_start_time_s"]),
            video_fps=float(item["video_fps"]),
            can_csv_path=base / item["can_csv_path"],
        ))
    return entries


def _drive_ingest(entry: ManifestEntry, specs_by_name: dict[str, cansig.SignalSpec]
                  ) -> tuple[str, datastore.VideoFileFrameSource,
                             dict[str, tuple[np.ndarray, np.ndarray]],
                             list[sync.TimeInterval]]:
    """One manifest entry -> (drive id, frame source, per-attribute series,
    usable blocks where video and every signal overlap)."""
    drive = entry.video_path.stem
    source = datastore.VideoFileFrameSource(entry.video_path, entry.video_start_time_s,
                                            entry.video_fps)
    frames = cansig.parse_can_csv(entry.can_csv_path)
    series: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    frame_times = source.frame_times()
    blocks = [sync.TimeInterval(float(frame_times[0]),
                                float(frame_times[-1]) + 1.0 / entry.video_fps)]
    for name in datastore.ATTRIBUTES:
        if name not in specs_by_name:
            raise ManifestError(f"signal specs missing attribute {name!r}")
        samples = cansig.extract_attribute_series(frames, specs_by_name[name])
        times = np.array([s.time for s in samples])
        values = np.array([s.value for s in samples])
        series[name] = (times, values)
        blocks = sync.usable_blocks(blocks, sync.coverage_intervals(times))
    return drive, source, series, blocks


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_decode(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    specs = cansig.load_signal_specs(args.specs)
    by_name = cansig.specs_by_name(specs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total_blocks = 0
    for entry in manifest:
        drive, _, series, blocks = _drive_ingest(entry, by_name)
        drive_dir = out / drive
        drive_dir.mkdir(parents=True, exist_ok=True)
        for name, (times, values) in series.items():
            with open(drive_dir / f"{name}.csv", "w") as fh:
                fh.write("time,value\n")
                for t, v in zip(times, values):
                    fh.write(f"{float(t)!r},{float(v)!r}\n")
        (drive_dir / "blocks.json").write_text(json.dumps(
            [{"start": b.start, "end": b.end} for b in blocks], indent=1))
        total_blocks += len(blocks)
        log.info("decoded %s: %d usable blocks", drive, len(blocks))
    if total_blocks == 0:
        log.warning("no usable blocks in any drive")
    return 0


def cmd_build(args: argparse.Namespace) -> int:
    chunk_seconds, frame_size = args.chunk_seconds, args.frame_size
    if args.desk_scale:
        chunk_seconds, frame_size = 4.0, 64
    manifest = load_manifest(args.manifest)
    specs_by_name = cansig.specs_by_name(cansig.load_signal_specs(args.specs))
    store = datastore.ChunkStore(args.out).create()
    built = rejected = 0
    for entry in manifest:
        drive, source, series, blocks = _drive_ingest(entry, specs_by_name)
        counter = 0
        for block in blocks:
            for grid in sync.chunk_block(block, chunk_seconds=chunk_seconds, fps=args.fps):
                chunk_id = f"{drive}-c{counter:04d}"
                counter += 1
                try:
                    chunk, track = datastore.build_chunk(grid, source, series,
                                                         chunk_id, frame_size=frame_size)
                except datastore.ChunkRejected as exc:
                    log.warning("rejected: %s", exc)
                    rejected += 1
                    continue
                store.add(chunk, track, drive_id=drive, fps=args.fps)
                built += 1
    log.info("built %d chunks (%d rejected)", built, rejected)
    if built == 0:
        log.warning("no usable blocks / no chunks built")
        return 0
    _write_split(store, args.out, args.val_fraction, args.seed)
    return 0


def _write_split(store: datastore.ChunkStore, out: str | Path,
                 val_fraction: float, seed: int) -> None:
    try:
        split = datastore.split_dataset(store.metas(), val_fraction, seed)
    except datastore.SplitError as exc:
        log.warning("split not written: %s", exc)
        return
    (Path(out) / "split.json").write_text(json.dumps(
        {"train_ids": list(split.train_ids), "val_ids": list(split.val_ids)}, indent=1))


def _read_split(store_root: str | Path) -> datastore.DatasetSplit:
    path = Path(store_root) / "split.json"
    if not path.exists():
        raise FileNotFoundError(
            f"{path}: no split file; run build/synth first or split manually")
    doc = json.loads(path.read_text())
    return datastore.DatasetSplit(train_ids=tuple(doc["train_ids"]),
                                  val_ids=tuple(doc["val_ids"]))


def cmd_synth(args: argparse.Namespace) -> int:
    if args.raw:
        manifest = synthgen.generate_drive_files(
            args.out, n_drives=args.drives, chunks_per_drive=args.chunks_per_drive,
            seed=args.seed, difficulty=args.difficulty, frame_size=args.frame_size,
            fps=args.fps, chunk_seconds=args.chunk_seconds, noise=args.noise)
        log.info("wrote raw drives and manifest %s", manifest)
        return 0
    store = synthgen.make_corpus(args.out, n_chunks=args.n_chunks,
                                 difficulty=args.difficulty, seed=args.seed,
                                 frame_size=args.frame_size, fps=args.fps,
                                 chunk_seconds=args.chunk_seconds, noise=args.noise)
    _write_split(store, args.out, args.val_fraction, args.seed)
    log.info("synthesized %d chunks into %s", len(store.metas()), args.out)
    return 0


def _prepare_latents(store: datastore.ChunkStore, split: datastore.DatasetSplit,
                     configs: list[train_mod.RunConfig], out_dir: str | Path
                     ) -> tuple[datastore.LatentStore | None, models.StandinEncoder | None]:
    external = [c for c in configs if c.encoder == "external_latents"]
    if not external:
        return None, None
    widths = {c.latent_dim for c in external}
    if len(widths) != 1:
        raise ValueError(f"runs disagree on latent_dim: {sorted(widths)}")
    width = widths.pop()
    # Cache next to the run outputs, keyed by width: the chunk store stays
    # read-only and a width change can never pick up stale files.
    latent_store = datastore.LatentStore(Path(out_dir) / f"standin-{width}d").create()
    standin = models.StandinEncoder(latent_dim=width)
    pairs: set[train_mod.Pair] = set(train_mod.plain_pairs(split.val_ids))
    for config in external:
        pairs.update(train_mod.expand_training_pairs(
            split.train_ids, config.augment, config.attribute))
    n = train_mod.precompute_latents(store, latent_store, standin, sorted(
        pairs, key=lambda p: (p[0], p[1] or "")))
    if n:
        log.info("precomputed %d latent files", n)
    return latent_store, standin


def _emit_predictions(store: datastore.ChunkStore, out_dir: Path,
                      predictions: dict[str, np.ndarray], attribute: str,
                      fps: float) -> None:
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for chunk_id, values in predictions.items():
        track = store.load_labels(chunk_id)
        track = replace(track, **{attribute: values})
        track = datastore.apply_lead_sentinels(track)
        datastore.write_label_json(pred_dir / f"{chunk_id}.json", track, fps)


def cmd_train(args: argparse.Namespace) -> int:
    store = datastore.ChunkStore(args.store)
    split = _read_split(args.store)
    frame_size = 64 if args.desk_scale else args.frame_size
    config = train_mod.RunConfig(
        attribute=args.attribute, encoder=args.encoder, head=args.head,
        batch_size=args.batch_size, learning_rate=args.lr, epochs=args.epochs,
        seed=args.seed, augment=args.augment, lead_mask=args.lead_mask,
        rel_speed_classes=args.rel_speed_classes, frame_size=frame_size,
        hidden=args.hidden, latent_dim=args.latent_dim,
        checkpoint_every=args.checkpoint_every)
    latent_store, standin = _prepare_latents(store, split, [config], args.out)
    provider = train_mod.ClipProvider(store, config, latent_store=latent_store,
                                      standin=standin)
    train_pairs = train_mod.expand_training_pairs(split.train_ids, config.augment,
                                                  config.attribute)
    val_pairs = train_mod.plain_pairs(split.val_ids)
    out = Path(args.out)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = runs_dir / config.run_id if config.checkpoint_every else None
    result, model, stats = train_mod.train_run(provider, train_pairs, val_pairs, config,
                                               checkpoint_dir=ckpt_dir, return_model=True)
    train_mod.write_run_result(runs_dir / f"{config.run_id}.json", result)
    if args.emit_predictions:
        fps = store.metas()[0].fps if store.metas() else sync.LABEL_FPS
        preds = train_mod.predict_tracks(model, provider, val_pairs, stats)
        _emit_predictions(store, out, preds, config.attribute, fps)
    status = "diverged" if result.diverged else f"final metric {result.final:.6g}"
    log.info("run %s: %s (%.1fs)", config.run_id, status, result.wall_time)
    return 0


def cmd_grid(args: argparse.Namespace) -> int:
    store = datastore.ChunkStore(args.store)
    split = _read_split(args.store)
    attributes = args.attribute or list(datastore.ATTRIBUTES)
    frame_size = 64 if args.desk_scale else args.frame_size
    configs = train_mod.grid_configs(attributes=attributes, epochs=args.epochs,
                                     seed=args.seed, frame_size=frame_size,
                                     hidden=args.hidden, latent_dim=args.latent_dim)
    latent_store, standin = _prepare_latents(store, split, configs, args.out)

    def progress(message: str, _result) -> None:
        log.info("%s", message)

    results = train_mod.run_grid(store, split, configs, args.out,
                                 latent_store=latent_store, standin=standin,
                                 resume=args.resume, parallel=args.parallel,
                                 progress=progress)
    diverged = sum(r.diverged for r in results)
    failed = sum(1 for r in results if r.error)
    log.info("grid complete: %d runs, %d diverged, %d failed",
             len(results), diverged, failed)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    results = train_mod.load_run_results(args.runs)
    written = evalreport.write_report(results, args.out)
    log.info("report: %d runs, tables for %s", len(results),
             sorted(written) if written else "no complete attribute")
    return 0


def cmd_events(args: argparse.Namespace) -> int:
    tracks_dir = Path(args.tracks)
    rules = events_mod.rules_from_json(args.rules) if args.rules else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_chunk: dict[str, list[events_mod.DetectedEvent]] = {}
    paths = sorted(tracks_dir.glob("*.json"))
    if not paths:
        log.warning("no track files in %s", tracks_dir)
    for path in paths:
        track, fps = datastore.read_label_json(path)
        per_chunk[track.chunk_id] = events_mod.detect_events(track, fps, rules=rules)
    count = events_mod.write_events_jsonl(out / "events.jsonl", per_chunk)
    log.info("detected %d events over %d tracks", count, len(per_chunk))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dashkin",
        description="Dashcam kinematics pipeline: CAN decoding, chunk dataset "
                    "construction, model grid training, reports, event detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("decode", help="decode CAN signal series per drive")
    p.add_argument("--manifest", required=True)
    p.add_argument("--specs", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("build", help="materialize the chunk dataset from drives")
    p.add_argument("--manifest", required=True)
    p.add_argument("--specs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=sync.LABEL_FPS)
    p.add_argument("--chunk-seconds", type=float, default=sync.CHUNK_SECONDS)
    p.add_argument("--frame-size", type=int, default=256)
    p.add_argument("--val-fraction", type=float, default=DEFAULT_VAL_FRACTION)
    p.add_argument("--desk-scale", action="store_true",
                   help="small frames and short chunks for quick runs")
    add_common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("synth", help="generate a synthetic corpus or raw drives")
    p.add_argument("--out", required=True)
    p.add_argument("--n-chunks", type=int, default=64)
    p.add_argument("--difficulty", choices=synthgen.DIFFICULTIES, default="standard")
    p.add_argument("--fps", type=float, default=sync.LABEL_FPS)
    p.add_argument("--chunk-seconds", type=float, default=4.0)
    p.add_argument("--frame-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--raw", action="store_true",
                   help="emit raw drive files (video + CAN CSV + manifest) instead")
    p.add_argument("--drives", type=int, default=2)
    p.add_argument("--chunks-per-drive", type=int, default=2)
    add_common(p)
    p.set_defaults(func=cmd_synth)

    def add_train_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--store", required=True, help="chunk store directory")
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int, default=250)
        p.add_argument("--frame-size", type=int, default=256)
        p.add_argument("--hidden", type=int, default=models.LATENT_DIM)
        p.add_argument("--latent-dim", type=int, default=models.LATENT_DIM)
        p.add_argument("--desk-scale", action="store_true")
        add_common(p)

    p = sub.add_parser("train", help="train one configuration")
    add_train_common(p)
    p.add_argument("--attribute", required=True, choices=datastore.ATTRIBUTES)
    p.add_argument("--encoder", choices=models.ENCODERS, default="external_latents")
    p.add_argument("--head", choices=models.HEADS, default="gru")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--augment", choices=train_mod.AUGMENTS, default="flip")
    p.add_argument("--lead-mask", action="store_true")
    p.add_argument("--rel-speed-classes", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=25)
    p.add_argument("--emit-predictions", action="store_true",
                   help="write predicted label tracks for the validation chunks")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run the full model grid")
    add_train_common(p)
    p.add_argument("--attribute", action="append", choices=datastore.ATTRIBUTES,
                   help="restrict to an attribute (repeatable; default all)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="tables, curves and best configs from run results")
    p.add_argument("--runs", required=True, help="directory of run result JSONs")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("events", help="detect driving events over label-shaped tracks")
    p.add_argument("--tracks", required=True, help="directory of track JSONs")
    p.add_argument("--out", required=True)
    p.add_argument("--rules", help="JSON array of event rules")
    add_common(p)
    p.set_defaults(func=cmd_events)
    return parser


FORMAT_ERRORS = (
    cansig.CanFormatError,
    cansig.DecodeError,
    datastore.StoreFormatError,
    ManifestError,
)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FORMAT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # noqa: BLE001 - structured nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
