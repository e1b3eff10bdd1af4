"""Synthetic dashcam footage with exactly known kinematics.

The renderer draws a fixed corpus-wide sinusoid texture that scrolls
vertically at a rate proportional to ego speed and shears horizontally
with yaw; a dark rectangle whose apparent width goes as 1/distance stands
in for a lead vehicle. A single frame carries no speed information (the
initial scroll phase is random per chunk), so speed is recoverable only
from inter-frame motion.

Labels are the generating profiles themselves, so every downstream result
can be checked against exact ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cansig, datastore
from .cansig import CanFrame, SignalSpec
from .datastore import (
    ChunkStore,
    LabelTrack,
    VideoChunk,
    apply_lead_sentinels,
)

TEXTURE_SEED = 20

# texture scroll in px per km/h per frame, at 64 px frames; scales with size
SCROLL_GAIN_64 = 0.2
# bottom-row shear in px per deg/s per frame, at 64 px frames
SHEAR_GAIN_64 = 0.3

SPEED_RANGE = (5.0, 75.0)

DIFFICULTIES = ("plain", "standard")


class GenerationError(ValueError):
    """Scene parameters are inconsistent."""


@dataclass
class SceneParams:
    """Per-frame generating profiles for one chunk.

    lead_distance / lead_rel_speed matter only where lead_present >= 0.5;
    elsewhere the emitted labels carry the absent sentinels.
    """

    chunk_id: str
    fps: float
    frame_size: int
    speed: np.ndarray
    yaw: np.ndarray
    lead_present: np.ndarray
    lead_distance: np.ndarray
    lead_rel_speed: np.ndarray
    noise: float = 0.02
    seed: int = 0
    texture_seed: int = TEXTURE_SEED

    @property
    def n(self) -> int:
        return len(self.speed)

    @property
    def duration_s(self) -> float:
        return self.n / self.fps

    def validate(self) -> None:
        lengths = {len(self.speed), len(self.yaw), len(self.lead_present),
                   len(self.lead_distance), len(self.lead_rel_speed)}
        if len(lengths) != 1:
            raise GenerationError(f"{self.chunk_id}: profile lengths disagree: {lengths}")
        if self.n < 2:
            raise GenerationError(f"{self.chunk_id}: need at least 2 frames")
        if self.fps <= 0 or self.frame_size < 8:
            raise GenerationError(f"{self.chunk_id}: bad fps/frame_size")
        if self.noise < 0:
            raise GenerationError(f"{self.chunk_id}: negative noise")
        for name in ("speed", "yaw", "lead_present"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise GenerationError(f"{self.chunk_id}: non-finite {name} profile")
        lp = self.lead_present
        if np.any(lp < 0) or np.any(lp > 1):
            raise GenerationError(f"{self.chunk_id}: lead_present outside [0, 1]")
        present = lp >= datastore.LEAD_PRESENT_THRESHOLD
        d = self.lead_distance[present]
        v = self.lead_rel_speed[present]
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(v))):
            raise GenerationError(
                f"{self.chunk_id}: lead schedule undefined while lead present")
        if np.any(d <= 0):
            raise GenerationError(f"{self.chunk_id}: non-positive lead distance")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

# (amplitude, vertical cycles, horizontal cycles); frequencies stay low so
# per-frame texture motion is sub-Nyquist across the whole speed range
_COMPONENT_AMPS = (0.22, 0.13, 0.09, 0.06)
_COMPONENT_FY = (1.0, 2.0, 2.0, 1.0)
_COMPONENT_FX = (0.0, 1.0, 2.0, 1.0)


def _texture_phases(texture_seed: int) -> np.ndarray:
    rng = np.random.default_rng(texture_seed)
    return rng.uniform(0.0, 2.0 * math.pi, size=len(_COMPONENT_AMPS))


def _render_gray(params: SceneParams) -> np.ndarray:
    """(n, H, W) float brightness in [0, 1], analytic texture evaluation."""
    size = params.frame_size
    n = params.n
    phases = _texture_phases(params.texture_seed)
    rng = np.random.default_rng((params.seed, params.texture_seed, size))
    scroll = rng.uniform(0.0, size)
    shear = rng.uniform(0.0, size)
    scroll_gain = SCROLL_GAIN_64 * size / 64.0
    shear_gain = SHEAR_GAIN_64 * size / 64.0

    ys = np.arange(size, dtype=np.float64)[:, None]
    xs = np.arange(size, dtype=np.float64)[None, :]
    frames = np.empty((n, size, size), dtype=np.float64)
    for t in range(n):
        img = np.full((size, size), 0.5)
        x_eff = xs + shear * (ys / size)
        for a, fy, fx, ph in zip(_COMPONENT_AMPS, _COMPONENT_FY, _COMPONENT_FX, phases):
            arg = 2.0 * math.pi * (fy * (ys + scroll) / size + fx * x_eff / size) + ph
            img = img + a * np.sin(arg)
        if params.lead_present[t] >= datastore.LEAD_PRESENT_THRESHOLD:
            _draw_lead(img, params.lead_distance[t])
        frames[t] = img
        scroll += scroll_gain * params.speed[t]
        shear += shear_gain * params.yaw[t]
    if params.noise > 0:
        frames += rng.normal(0.0, params.noise, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)


def _draw_lead(img: np.ndarray, distance: float) -> None:
    """Dark rectangle, apparent width proportional to 1/distance."""
    size = img.shape[0]
    width = np.clip(size * 6.0 / max(distance, 5.0), 2.0, 0.5 * size)
    height = 0.7 * width
    xc, yc = size / 2.0, 0.42 * size
    x0, x1 = int(round(xc - width / 2)), int(round(xc + width / 2))
    y0, y1 = int(round(yc - height / 2)), int(round(yc + height / 2))
    img[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] *= 0.25


def render(params: SceneParams) -> tuple[VideoChunk, LabelTrack]:
    """Deterministic scene render plus exact labels on the frame grid."""
    params.validate()
    gray = _render_gray(params)
    pixels = np.round(gray * 255.0).astype(np.uint8)
    frames = np.repeat(pixels[:, None, :, :], 3, axis=1)
    chunk = VideoChunk(chunk_id=params.chunk_id, frames=np.ascontiguousarray(frames), t0=0.0)
    track = apply_lead_sentinels(LabelTrack(
        chunk_id=params.chunk_id,
        speed=params.speed.astype(np.float64).copy(),
        yaw=params.yaw.astype(np.float64).copy(),
        lead_present=params.lead_present.astype(np.float64).copy(),
        lead_distance=params.lead_distance.astype(np.float64).copy(),
        lead_rel_speed=params.lead_rel_speed.astype(np.float64).copy(),
    ))
    track.validate(n=params.n)
    return chunk, track


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------

def _empty_lead(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.zeros(n), np.full(n, datastore.LEAD_DISTANCE_ABSENT),
            np.full(n, datastore.LEAD_REL_SPEED_ABSENT))


def sample_scene(chunk_id: str, n: int, fps: float, frame_size: int,
                 rng: np.random.Generator, difficulty: str = "standard",
                 noise: float = 0.02) -> SceneParams:
    """One random scene.

    plain: constant speed only, the cleanest learnability setting.
    standard: adds a small constant yaw and an optional lead episode.
    """
    if difficulty not in DIFFICULTIES:
        raise GenerationError(f"difficulty must be one of {DIFFICULTIES}")
    speed = np.full(n, rng.uniform(*SPEED_RANGE))
    yaw = np.zeros(n)
    lead_present, lead_distance, lead_rel_speed = _empty_lead(n)
    if difficulty == "standard":
        yaw = np.full(n, rng.uniform(-3.0, 3.0))
        if rng.uniform() < 0.6:
            length = int(rng.integers(max(2, n // 4), n + 1))
            a = int(rng.integers(0, n - length + 1))
            b = a + length
            d0 = rng.uniform(20.0, 120.0)
            rel = rng.uniform(-15.0, 15.0)
            steps = np.arange(length) / fps
            d = np.clip(d0 + (rel / 3.6) * steps, 5.0, 250.0)
            lead_present[a:b] = 1.0
            lead_distance[a:b] = d
            lead_rel_speed[a:b] = rel
    seed = int(rng.integers(0, 2**31 - 1))
    return SceneParams(chunk_id=chunk_id, fps=fps, frame_size=frame_size,
                       speed=speed, yaw=yaw, lead_present=lead_present,
                       lead_distance=lead_distance, lead_rel_speed=lead_rel_speed,
                       noise=noise, seed=seed)


@dataclass(frozen=True)
class ScriptedPhase:
    """One constant-kinematics stretch of a scripted scene."""

    duration_s: float
    speed: float = 50.0
    yaw: float = 0.0
    lead: tuple[float, float] | None = None  # (initial distance m, rel speed km/h)


def scripted_scene(chunk_id: str, phases: Sequence[ScriptedPhase], fps: float = 5.0,
                   frame_size: int = 64, noise: float = 0.0, seed: int = 0) -> SceneParams:
    """Concatenate phases into per-frame profiles (for event oracles)."""
    speed, yaw, lp, ld, ls = [], [], [], [], []
    for phase in phases:
        k = int(round(phase.duration_s * fps))
        speed.extend([phase.speed] * k)
        yaw.extend([phase.yaw] * k)
        if phase.lead is None:
            lp.extend([0.0] * k)
            ld.extend([datastore.LEAD_DISTANCE_ABSENT] * k)
            ls.extend([datastore.LEAD_REL_SPEED_ABSENT] * k)
        else:
            d0, rel = phase.lead
            lp.extend([1.0] * k)
            ld.extend(list(np.clip(d0 + (rel / 3.6) * np.arange(k) / fps, 5.0, 250.0)))
            ls.extend([rel] * k)
    return SceneParams(chunk_id=chunk_id, fps=fps, frame_size=frame_size,
                       speed=np.array(speed), yaw=np.array(yaw),
                       lead_present=np.array(lp), lead_distance=np.array(ld),
                       lead_rel_speed=np.array(ls), noise=noise, seed=seed)


# ---------------------------------------------------------------------------
# Corpus generation straight into the chunk store
# ---------------------------------------------------------------------------

def make_corpus(out_dir: str | Path, n_chunks: int, difficulty: str = "standard",
                seed: int = 0, frame_size: int = 64, fps: float = 5.0,
                chunk_seconds: float = 4.0, noise: float = 0.02) -> ChunkStore:
    """Render n_chunks scenes into a chunk store, one synthetic drive per
    chunk so train/val splitting can cut anywhere with identical
    generator distributions on both sides."""
    if n_chunks < 2:
        raise GenerationError("a corpus needs at least 2 chunks")
    n = int(round(chunk_seconds * fps))
    store = ChunkStore(out_dir).create()
    rng = np.random.default_rng(seed)
    for i in range(n_chunks):
        chunk_id = f"synth-{i:04d}"
        params = sample_scene(chunk_id, n, fps, frame_size, rng,
                              difficulty=difficulty, noise=noise)
        chunk, track = render(params)
        store.add(chunk, track, drive_id=f"drive-{i:04d}", fps=fps)
    return store


# ---------------------------------------------------------------------------
# Raw drive files: video + CAN CSV + manifest, for full-pipeline runs
# ---------------------------------------------------------------------------

# synthetic bus layout: one message id per signal, 8-byte payloads
def default_signal_specs() -> list[SignalSpec]:
    return [
        SignalSpec(name="speed", message_id=0x100, start_bit=0, length_bits=16,
                   byte_order="little_endian", signed=False, scale=0.01, unit="km/h"),
        SignalSpec(name="yaw", message_id=0x101, start_bit=0, length_bits=16,
                   byte_order="little_endian", signed=True, scale=0.01, unit="deg/s"),
        SignalSpec(name="lead_present", message_id=0x102, start_bit=0, length_bits=8,
                   byte_order="little_endian", signed=False, scale=1.0, unit=""),
        SignalSpec(name="lead_distance", message_id=0x103, start_bit=0, length_bits=16,
                   byte_order="little_endian", signed=False, scale=0.01, unit="m"),
        SignalSpec(name="lead_rel_speed", message_id=0x104, start_bit=0, length_bits=16,
                   byte_order="little_endian", signed=True, scale=0.01, unit="km/h"),
    ]


def encode_signal_frame(spec: SignalSpec, value: float, time: float,
                        payload_bytes: int = 8) -> CanFrame:
    """Inverse of signal decoding: quantize and place the raw field."""
    raw = int(round((value - spec.offset) / spec.scale))
    lo, hi = ((-(1 << (spec.length_bits - 1)), (1 << (spec.length_bits - 1)) - 1)
              if spec.signed else (0, (1 << spec.length_bits) - 1))
    if not lo <= raw <= hi:
        raise ValueError(f"{spec.name}: value {value} out of field range")
    mask = (1 << spec.length_bits) - 1
    payload_int = (raw & mask) << spec.start_bit
    order = "little" if spec.byte_order == "little_endian" else "big"
    payload = payload_int.to_bytes(payload_bytes, order)
    return CanFrame(time=time, bus=0, message_id=spec.message_id, payload=payload)


def write_can_csv(path: str | Path, frames: Sequence[CanFrame]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cansig.CSV_COLUMNS) + "\n")
        for f in frames:
            fh.write(f"{float(f.time)!r},{f.bus},{f.message_id},"
                     f"{f.payload.hex().upper()},{len(f.payload)}\n")


def generate_drive_files(out_dir: str | Path, n_drives: int = 2,
                         chunks_per_drive: int = 2, seed: int = 0,
                         difficulty: str = "standard", frame_size: int = 64,
                         fps: float = 5.0, chunk_seconds: float = 4.0,
                         noise: float = 0.02, start_time_s: float = 100.0) -> Path:
    """Emit drives as raw inputs (video stack + CAN CSV) plus the manifest
    and signal-spec files the ingestion pipeline consumes.

    Paths inside the manifest are relative to the manifest's directory.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    (out_dir / "drives").mkdir(parents=True, exist_ok=True)
    (out_dir / "can").mkdir(parents=True, exist_ok=True)
    specs = default_signal_specs()
    spec_by_name = {s.name: s for s in specs}
    rng = np.random.default_rng(seed)
    n = int(round(chunk_seconds * fps))
    manifest = []
    for d in range(n_drives):
        scenes = [sample_scene(f"drive{d}-part{k}", n, fps, frame_size, rng,
                               difficulty=difficulty, noise=noise)
                  for k in range(chunks_per_drive)]
        frames = []
        tracks = {name: [] for name in datastore.ATTRIBUTES}
        for scene in scenes:
            chunk, track = render(scene)
            frames.append(chunk.frames)
            for name in datastore.ATTRIBUTES:
                tracks[name].append(track.array(name))
        stack = np.concatenate(frames).transpose(0, 2, 3, 1)  # (k, h, w, 3)
        video_rel = f"drives/drive-{d:04d}.npy"
        np.save(out_dir / video_rel, np.ascontiguousarray(stack))

        total = n * chunks_per_drive
        times = start_time_s + np.arange(total) / fps
        series = {name: np.concatenate(tracks[name]) for name in datastore.ATTRIBUTES}
        can_frames: list[CanFrame] = []
        for i in range(total):
            for name in datastore.ATTRIBUTES:
                can_frames.append(encode_signal_frame(
                    spec_by_name[name], float(series[name][i]), float(times[i])))
        can_rel = f"can/drive-{d:04d}.csv"
        write_can_csv(out_dir / can_rel, can_frames)
        manifest.append({
            "video_path": video_rel,
            "video_start_time_s": start_time_s,
            "video_fps": fps,
            "can_csv_path": can_rel,
        })
    specs_path = out_dir / "specs.json"
    specs_path.write_text(json.dumps(
        [{"name": s.name, "message_id": s.message_id, "start_bit": s.start_bit,
          "length_bits": s.length_bits, "byte_order": s.byte_order,
          "signed": s.signed, "scale": s.scale, "offset": s.offset, "unit": s.unit}
         for s in specs], indent=1))
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path
