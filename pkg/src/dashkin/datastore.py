"""Chunk dataset: frame/label materialization, splits, augmentation, stats.

A chunk is one training unit: n frames (default 200 at 5 fps, i.e. 40 s)
plus five aligned label arrays. Frames live in a packed binary file per
chunk, labels in a JSON file per chunk, and an index JSON ties chunk ids
to their source drives.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import sync
from .sync import CoverageError, LabelGrid

log = logging.getLogger(__name__)

ATTRIBUTES = ("speed", "yaw", "lead_present", "lead_distance", "lead_rel_speed")

# Radar reports these when no lead vehicle is tracked.
LEAD_DISTANCE_ABSENT = 252.0
LEAD_REL_SPEED_ABSENT = 0.0

LEAD_PRESENT_THRESHOLD = 0.5

FRAME_MAGIC = b"DKCH"
FRAME_VERSION = 1

REL_SPEED_CLASSES = ("approaching", "steady", "receding")
APPROACHING, STEADY, RECEDING = 0, 1, 2


class ChunkRejected(ValueError):
    """A grid could not be materialized into a chunk (coverage gap etc.)."""


class StoreFormatError(ValueError):
    """A packed chunk / label / index file is malformed."""


class InvalidTargetError(ValueError):
    """An augmented track was asked for an attribute it does not preserve."""


class SplitError(ValueError):
    """The corpus cannot be split as requested."""


@dataclass
class LabelTrack:
    """Per-chunk label arrays, one value per frame.

    speed km/h; yaw deg/s (negative = left turn); lead_present in [0, 1]
    (fractional values come from interpolation); lead_distance m with the
    absent sentinel 252; lead_rel_speed km/h with 0 when absent.
    `valid_targets` shrinks under time reversal, which scrambles the
    ego-motion attributes.
    """

    chunk_id: str
    speed: np.ndarray
    yaw: np.ndarray
    lead_present: np.ndarray
    lead_distance: np.ndarray
    lead_rel_speed: np.ndarray
    valid_targets: tuple[str, ...] = ATTRIBUTES

    def array(self, attribute: str) -> np.ndarray:
        if attribute not in ATTRIBUTES:
            raise KeyError(f"unknown attribute {attribute!r}")
        return getattr(self, attribute)

    def target_array(self, attribute: str) -> np.ndarray:
        if attribute not in self.valid_targets:
            raise InvalidTargetError(
                f"{attribute!r} is not a valid training target for chunk "
                f"{self.chunk_id!r} (valid: {self.valid_targets})"
            )
        return self.array(attribute)

    @property
    def n(self) -> int:
        return len(self.speed)

    def validate(self, n: int | None = None) -> None:
        lengths = {a: len(self.array(a)) for a in ATTRIBUTES}
        if len(set(lengths.values())) != 1:
            raise ValueError(f"label arrays disagree in length: {lengths}")
        if n is not None and self.n != n:
            raise ValueError(f"expected {n} label samples, got {self.n}")
        for a in ATTRIBUTES:
            if not np.all(np.isfinite(self.array(a))):
                raise ValueError(f"non-finite values in {a!r}")
        if np.any(self.lead_present < 0) or np.any(self.lead_present > 1):
            raise ValueError("lead_present outside [0, 1]")
        absent = self.lead_present == 0.0
        if not np.all(self.lead_distance[absent] == LEAD_DISTANCE_ABSENT):
            raise ValueError("lead_distance must be 252 wherever lead_present == 0")
        if not np.all(self.lead_rel_speed[absent] == LEAD_REL_SPEED_ABSENT):
            raise ValueError("lead_rel_speed must be 0 wherever lead_present == 0")


@dataclass
class VideoChunk:
    """Packed frames for one chunk: (n, 3, h, w) uint8, RGB, frame-major."""

    chunk_id: str
    frames: np.ndarray
    t0: float

    def validate(self, n: int | None = None) -> None:
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be (n, 3, h, w), got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if self.frames.shape[2] != self.frames.shape[3]:
            raise ValueError(f"frames must be square, got {self.frames.shape}")
        if n is not None and self.frames.shape[0] != n:
            raise ValueError(f"expected {n} frames, got {self.frames.shape[0]}")


@dataclass(frozen=True)
class ChunkMeta:
    chunk_id: str
    drive_id: str
    t0: float
    n: int
    fps: float

    @property
    def duration_s(self) -> float:
        return self.n / self.fps


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise ValueError(f"train/val overlap: {sorted(overlap)[:5]}")


def apply_lead_sentinels(track: LabelTrack) -> LabelTrack:
    """Force the exact no-lead convention wherever lead_present is exactly 0."""
    absent = track.lead_present == 0.0
    ld = track.lead_distance.copy()
    ls = track.lead_rel_speed.copy()
    ld[absent] = LEAD_DISTANCE_ABSENT
    ls[absent] = LEAD_REL_SPEED_ABSENT
    return replace(track, lead_distance=ld, lead_rel_speed=ls)


# ---------------------------------------------------------------------------
# Packed frame file + label JSON formats
# ---------------------------------------------------------------------------

def write_chunk_frames(path: str | Path, frames: np.ndarray) -> None:
    """Write a packed frame file: magic, version u32, dims 4xu32, raw bytes.

    All integers little-endian; data is frame-major, channel-major,
    row-major uint8.
    """
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    if frames.ndim != 4:
        raise ValueError(f"frames must be 4-D (n, c, h, w), got {frames.shape}")
    n, c, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<5I", FRAME_VERSION, n, c, h, w))
        fh.write(frames.tobytes())


def read_chunk_frames(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FRAME_MAGIC:
            raise StoreFormatError(f"{path}: bad magic {magic!r}")
        version, n, c, h, w = struct.unpack("<5I", fh.read(20))
        if version != FRAME_VERSION:
            raise StoreFormatError(f"{path}: unsupported version {version}")
        data = fh.read(n * c * h * w)
    if len(data) != n * c * h * w:
        raise StoreFormatError(f"{path}: truncated frame data")
    return np.frombuffer(data, dtype=np.uint8).reshape(n, c, h, w)


def write_label_json(path: str | Path, track: LabelTrack, fps: float) -> None:
    doc = {
        "chunk_id": track.chunk_id,
        "fps": fps,
        "n": track.n,
        "speed": track.speed.tolist(),
        "yaw": track.yaw.tolist(),
        "lead_present": track.lead_present.tolist(),
        "lead_distance": track.lead_distance.tolist(),
        "lead_rel_speed": track.lead_rel_speed.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def read_label_json(path: str | Path) -> tuple[LabelTrack, float]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"{path}: not valid JSON: {exc}") from exc
    missing = [k for k in ("chunk_id", "fps", "n", *ATTRIBUTES) if k not in doc]
    if missing:
        raise StoreFormatError(f"{path}: missing keys {missing}")
    track = LabelTrack(
        chunk_id=doc["chunk_id"],
        **{a: np.asarray(doc[a], dtype=np.float64) for a in ATTRIBUTES},
    )
    track.validate(n=int(doc["n"]))
    return track, float(doc["fps"])


LATENT_MAGIC = b"DKLT"


def write_latents(path: str | Path, latents: np.ndarray) -> None:
    """Write per-frame latent vectors: magic, n u32, d u32, float32 rows."""
    latents = np.ascontiguousarray(latents, dtype=np.float32)
    if latents.ndim != 2:
        raise ValueError(f"latents must be (n, d), got {latents.shape}")
    n, d = latents.shape
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<2I", n, d))
        fh.write(latents.tobytes())


def read_latents(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LATENT_MAGIC:
            raise StoreFormatError(f"{path}: bad magic {magic!r}")
        n, d = struct.unpack("<2I", fh.read(8))
        data = fh.read(n * d * 4)
    if len(data) != n * d * 4:
        raise StoreFormatError(f"{path}: truncated latent data")
    return np.frombuffer(data, dtype=np.float32).reshape(n, d).copy()


class LatentStore:
    """latents/<chunk_id>.dklt, or latents/<chunk_id>__<variant>.dklt for
    augmented variants (flip, reverse)."""

    def __init__(self, root: str | Path):
        self.dir = Path(root) / "latents"

    def create(self) -> "LatentStore":
        self.dir.mkdir(parents=True, exist_ok=True)
        return self

    def _path(self, chunk_id: str, variant: str | None) -> Path:
        stem = chunk_id if variant in (None, "") else f"{chunk_id}__{variant}"
        return self.dir / f"{stem}.dklt"

    def put(self, chunk_id: str, latents: np.ndarray, variant: str | None = None) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self._path(chunk_id, variant)
        write_latents(path, latents)
        return path

    def get(self, chunk_id: str, variant: str | None = None) -> np.ndarray:
        path = self._path(chunk_id, variant)
        if not path.exists():
            raise KeyError(f"no latents for chunk {chunk_id!r} variant {variant!r}")
        return read_latents(path)

    def has(self, chunk_id: str, variant: str | None = None) -> bool:
        return self._path(chunk_id, variant).exists()


# ---------------------------------------------------------------------------
# Chunk store on disk
# ---------------------------------------------------------------------------

class ChunkStore:
    """Directory layout: chunks/<id>.dkch, labels/<id>.json, index.json."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.chunks_dir = self.root / "chunks"
        self.labels_dir = self.root / "labels"
        self.index_path = self.root / "index.json"

    def create(self) -> "ChunkStore":
        self.chunks_dir.mkdir(parents=True, exist_ok=True)
        self.labels_dir.mkdir(parents=True, exist_ok=True)
        if not self.index_path.exists():
            self.index_path.write_text("[]")
        return self

    def add(self, chunk: VideoChunk, track: LabelTrack, drive_id: str, fps: float) -> ChunkMeta:
        chunk.validate()
        track.validate(n=chunk.frames.shape[0])
        if chunk.chunk_id != track.chunk_id:
            raise ValueError(f"chunk/track id mismatch: {chunk.chunk_id!r} vs {track.chunk_id!r}")
        write_chunk_frames(self.chunks_dir / f"{chunk.chunk_id}.dkch", chunk.frames)
        write_label_json(self.labels_dir / f"{chunk.chunk_id}.json", track, fps)
        meta = ChunkMeta(chunk_id=chunk.chunk_id, drive_id=drive_id, t0=chunk.t0,
                         n=chunk.frames.shape[0], fps=fps)
        metas = [m for m in self.metas() if m.chunk_id != meta.chunk_id]
        metas.append(meta)
        self._write_index(metas)
        return meta

    def metas(self) -> list[ChunkMeta]:
        if not self.index_path.exists():
            return []
        entries = json.loads(self.index_path.read_text())
        return [ChunkMeta(**e) for e in entries]

    def _write_index(self, metas: Iterable[ChunkMeta]) -> None:
        entries = [
            {"chunk_id": m.chunk_id, "drive_id": m.drive_id, "t0": m.t0, "n": m.n, "fps": m.fps}
            for m in sorted(metas, key=lambda m: m.chunk_id)
        ]
        self.index_path.write_text(json.dumps(entries, indent=1))

    def load_frames(self, chunk_id: str) -> np.ndarray:
        return read_chunk_frames(self.chunks_dir / f"{chunk_id}.dkch")

    def load_labels(self, chunk_id: str) -> LabelTrack:
        track, _ = read_label_json(self.labels_dir / f"{chunk_id}.json")
        return track

    def load_chunk(self, chunk_id: str) -> tuple[VideoChunk, LabelTrack]:
        meta = {m.chunk_id: m for m in self.metas()}.get(chunk_id)
        if meta is None:
            raise KeyError(f"chunk {chunk_id!r} not in index")
        chunk = VideoChunk(chunk_id=chunk_id, frames=self.load_frames(chunk_id), t0=meta.t0)
        return chunk, self.load_labels(chunk_id)


# ---------------------------------------------------------------------------
# Chunk construction from a frame source + signal series
# ---------------------------------------------------------------------------

class FrameSource(Protocol):
    """Timestamped frames; get_frames returns (k, h, w, 3) uint8 RGB."""

    def frame_times(self) -> np.ndarray: ...

    def get_frames(self, indices: np.ndarray) -> np.ndarray: ...


class ArrayFrameSource:
    """Frames held in memory as (k, h, w, 3) uint8 RGB."""

    def __init__(self, frames: np.ndarray, start_time: float, fps: float):
        self.frames = np.asarray(frames, dtype=np.uint8)
        self.start_time = float(start_time)
        self.fps = float(fps)

    def frame_times(self) -> np.ndarray:
        return self.start_time + np.arange(self.frames.shape[0]) / self.fps

    def get_frames(self, indices: np.ndarray) -> np.ndarray:
        return self.frames[np.asarray(indices)]


class VideoFileFrameSource:
    """Frames read from a video file (via OpenCV) or an .npy frame stack."""

    def __init__(self, path: str | Path, start_time: float, fps: float):
        self.path = Path(path)
        self.start_time = float(start_time)
        self.fps = float(fps)
        if self.path.suffix == ".npy":
            self._stack = np.load(self.path)
            if self._stack.ndim != 4 or self._stack.shape[-1] != 3:
                raise StoreFormatError(f"{self.path}: expected (k, h, w, 3) array")
            self._count = self._stack.shape[0]
        else:
            import cv2

            cap = cv2.VideoCapture(str(self.path))
            if not cap.isOpened():
                raise StoreFormatError(f"cannot open video {self.path}")
            self._count = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
            cap.release()
            self._stack = None

    def frame_times(self) -> np.ndarray:
        return self.start_time + np.arange(self._count) / self.fps

    def get_frames(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        if self._stack is not None:
            return self._stack[indices].astype(np.uint8)
        import cv2

        cap = cv2.VideoCapture(str(self.path))
        wanted = {int(i) for i in indices}
        by_index: dict[int, np.ndarray] = {}
        pos = 0
        last = max(wanted)
        while pos <= last:
            ok, frame = cap.read()
            if not ok:
                break
            if pos in wanted:
                by_index[pos] = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
            pos += 1
        cap.release()
        missing = wanted - set(by_index)
        if missing:
            raise StoreFormatError(f"{self.path}: could not read frames {sorted(missing)[:5]}")
        return np.stack([by_index[int(i)] for i in indices])


def resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    """Anisotropic stretch of (k, h, w, 3) frames to a square size x size."""
    if frames.shape[1] == size and frames.shape[2] == size:
        return frames
    import cv2

    out = np.empty((frames.shape[0], size, size, 3), dtype=np.uint8)
    for i, f in enumerate(frames):
        out[i] = cv2.resize(f, (size, size), interpolation=cv2.INTER_AREA)
    return out


def build_chunk(
    grid: LabelGrid,
    frame_source: FrameSource,
    series: dict[str, tuple[np.ndarray, np.ndarray]],
    chunk_id: str,
    frame_size: int = 256,
) -> tuple[VideoChunk, LabelTrack]:
    """Materialize one chunk: nearest-in-time frames plus resampled labels.

    `series` maps each attribute to (times, values). Raises ChunkRejected,
    naming the missing coverage, when the grid is not fully covered.
    """
    missing = [a for a in ATTRIBUTES if a not in series]
    if missing:
        raise ChunkRejected(f"{chunk_id}: no series for {missing}")

    ts = grid.timestamps()
    frame_times = frame_source.frame_times()
    if frame_times.size == 0:
        raise ChunkRejected(f"{chunk_id}: frame source is empty")
    idx = np.searchsorted(frame_times, ts)
    idx = np.clip(idx, 1, max(frame_times.size - 1, 1))
    left, right = frame_times[idx - 1], frame_times[np.minimum(idx, frame_times.size - 1)]
    nearest = np.where(np.abs(ts - left) <= np.abs(right - ts), idx - 1, idx)
    nearest = np.clip(nearest, 0, frame_times.size - 1)
    # a grid point with no frame within half a label period is a coverage gap
    max_dt = 0.5 / grid.fps + 1e-9
    gaps = np.abs(frame_times[nearest] - ts) > max_dt
    if np.any(gaps):
        t_bad = ts[int(np.argmax(gaps))]
        raise ChunkRejected(f"{chunk_id}: no frame within {max_dt:.3f}s of grid time {t_bad:.3f}")

    arrays = {}
    for attr in ATTRIBUTES:
        try:
            arrays[attr] = sync.resample_linear(series[attr], grid)
        except CoverageError as exc:
            raise ChunkRejected(f"{chunk_id}: attribute {attr!r}: {exc}") from exc

    raw = frame_source.get_frames(nearest)
    raw = resize_frames(raw, frame_size)
    frames = np.ascontiguousarray(raw.transpose(0, 3, 1, 2))

    track = apply_lead_sentinels(LabelTrack(chunk_id=chunk_id, **arrays))
    chunk = VideoChunk(chunk_id=chunk_id, frames=frames, t0=grid.t0)
    chunk.validate(n=grid.n)
    track.validate(n=grid.n)
    return chunk, track


# ---------------------------------------------------------------------------
# Train/validation split
# ---------------------------------------------------------------------------

def split_dataset(metas: Sequence[ChunkMeta], val_fraction: float, seed: int) -> DatasetSplit:
    """Assign whole drives to train or validation.

    Consecutive chunks of one recording are near-duplicates; splitting at
    drive granularity avoids leakage. Greedy assignment walks the seeded
    drive shuffle and keeps any drive that moves the validation total
    closer to the target duration.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if not metas:
        raise SplitError("empty corpus")
    drives: dict[str, list[ChunkMeta]] = {}
    for m in metas:
        drives.setdefault(m.drive_id, []).append(m)
    if len(drives) < 2:
        raise SplitError(
            f"corpus has a single drive {next(iter(drives))!r}; a drive-level "
            "split needs at least two drives (split manually instead)"
        )
    total = sum(m.duration_s for m in metas)
    target = val_fraction * total
    import random

    order = sorted(drives)
    random.Random(seed).shuffle(order)
    val_drives: list[str] = []
    val_total = 0.0
    for d in order:
        d_dur = sum(m.duration_s for m in drives[d])
        if abs(val_total + d_dur - target) < abs(val_total - target) and len(val_drives) < len(drives) - 1:
            val_drives.append(d)
            val_total += d_dur
    if not val_drives:
        # tiny fraction vs drive size: take the single closest drive
        val_drives = [min(order, key=lambda d: abs(sum(m.duration_s for m in drives[d]) - target))]
    val_set = set(val_drives)
    train_ids = tuple(m.chunk_id for m in metas if m.drive_id not in val_set)
    val_ids = tuple(m.chunk_id for m in metas if m.drive_id in val_set)
    return DatasetSplit(train_ids=train_ids, val_ids=val_ids)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_track(labels: LabelTrack) -> LabelTrack:
    """Label side of a horizontal flip: negate yaw, keep everything else."""
    return replace(labels, yaw=-labels.yaw)


def flip_horizontal(chunk: VideoChunk, labels: LabelTrack) -> tuple[VideoChunk, LabelTrack]:
    """Mirror frames along width; negate yaw, keep every other label."""
    flipped = VideoChunk(
        chunk_id=chunk.chunk_id,
        frames=np.ascontiguousarray(chunk.frames[:, :, :, ::-1]),
        t0=chunk.t0,
    )
    return flipped, flip_track(labels)


REVERSE_PRESERVED = ("lead_present", "lead_distance")


def reverse_track(labels: LabelTrack) -> LabelTrack:
    """Label side of time reversal.

    Only lead presence and lead distance survive as targets: reversed
    ego-motion (speed sign, yaw direction, closing speed) no longer matches
    what the frames show.
    """
    return LabelTrack(
        chunk_id=labels.chunk_id,
        speed=labels.speed[::-1].copy(),
        yaw=labels.yaw[::-1].copy(),
        lead_present=labels.lead_present[::-1].copy(),
        lead_distance=labels.lead_distance[::-1].copy(),
        lead_rel_speed=labels.lead_rel_speed[::-1].copy(),
        valid_targets=REVERSE_PRESERVED,
    )


def reverse_time(chunk: VideoChunk, labels: LabelTrack) -> tuple[VideoChunk, LabelTrack]:
    """Play the chunk backwards; see reverse_track for what stays valid."""
    reversed_chunk = VideoChunk(
        chunk_id=chunk.chunk_id,
        frames=np.ascontiguousarray(chunk.frames[::-1]),
        t0=chunk.t0,
    )
    return reversed_chunk, reverse_track(labels)


def mask_lead_absent(labels: LabelTrack, threshold: float = LEAD_PRESENT_THRESHOLD) -> np.ndarray:
    """True where a lead vehicle counts as present (for LD/LS loss masking)."""
    return labels.lead_present >= threshold


def rel_speed_to_classes(lead_rel_speed: np.ndarray, dead_band: float = 2.0) -> np.ndarray:
    """Classify relative speed: receding (> dead_band), approaching
    (< -dead_band), else steady. The boundary itself counts as steady."""
    if dead_band < 0:
        raise ValueError("dead_band must be non-negative")
    v = np.asarray(lead_rel_speed)
    out = np.full(v.shape, STEADY, dtype=np.int64)
    out[v > dead_band] = RECEDING
    out[v < -dead_band] = APPROACHING
    return out


# ---------------------------------------------------------------------------
# Distribution statistics
# ---------------------------------------------------------------------------

def histogram(values: np.ndarray, bin_edges: np.ndarray) -> np.ndarray:
    """Counts per bin; the last bin includes its right edge (numpy rule)."""
    values = np.asarray(values, dtype=np.float64)
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    if bin_edges.ndim != 1 or bin_edges.size < 2 or np.any(np.diff(bin_edges) <= 0):
        raise ValueError("bin_edges must be strictly increasing with >= 2 entries")
    counts, _ = np.histogram(values[np.isfinite(values)], bins=bin_edges)
    return counts


def export_histogram(
    values: np.ndarray,
    bin_edges: np.ndarray,
    out_prefix: str | Path,
    title: str = "",
) -> np.ndarray:
    """Write <prefix>.csv plus linear and log-scale bar plots."""
    counts = histogram(values, bin_edges)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(out_prefix.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for left, right, c in zip(bin_edges[:-1], bin_edges[1:], counts):
            writer.writerow([left, right, int(c)])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = 0.5 * (np.asarray(bin_edges[:-1]) + np.asarray(bin_edges[1:]))
    widths = np.diff(bin_edges)
    for scale in ("linear", "log"):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(centers, counts, width=widths, edgecolor="black", linewidth=0.3)
        ax.set_yscale(scale)
        ax.set_title(f"{title} ({scale})" if title else scale)
        ax.set_ylabel("frequency")
        fig.tight_layout()
        fig.savefig(f"{out_prefix}_{scale}.png", dpi=100)
        plt.close(fig)
    return counts


DEFAULT_BIN_SPECS = {
    "speed": np.linspace(0.0, 160.0, 33),
    "yaw": np.linspace(-40.0, 40.0, 33),
    "lead_present": np.linspace(0.0, 1.0, 21),
    "lead_distance": np.linspace(0.0, 260.0, 27),
    "lead_rel_speed": np.linspace(-60.0, 60.0, 25),
}


def export_corpus_stats(store: ChunkStore, out_dir: str | Path, split: DatasetSplit | None = None) -> None:
    """Per-attribute histograms over the whole corpus and per split side."""
    out_dir = Path(out_dir)
    metas = store.metas()
    tracks = {m.chunk_id: store.load_labels(m.chunk_id) for m in metas}
    groups = {"all": [m.chunk_id for m in metas]}
    if split is not None:
        groups["train"] = list(split.train_ids)
        groups["val"] = list(split.val_ids)
    for attr in ATTRIBUTES:
        for group, ids in groups.items():
            if not ids:
                continue
            values = np.concatenate([tracks[c].array(attr) for c in ids])
            export_histogram(values, DEFAULT_BIN_SPECS[attr], out_dir / f"{attr}_{group}",
                             title=f"{attr} ({group})")
