"""Video/CAN timeline alignment and resampling onto the 5 Hz label grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cansig import SignalSample

LABEL_FPS = 5.0
CHUNK_SECONDS = 40.0


class CoverageError(ValueError):
    """A grid extends beyond the available sample coverage."""


@dataclass(frozen=True)
class TimeInterval:
    start: float
    end: float

    def __post_init__(self) -> None:
        if not self.end > self.start:
            raise ValueError(f"interval end must exceed start: [{self.start}, {self.end}]")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class LabelGrid:
    """Uniform label timeline: n samples at `fps` starting at t0."""

    t0: float
    fps: float = LABEL_FPS
    n: int = 200

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.n < 2:
            raise ValueError("grid needs at least 2 samples")

    def timestamps(self) -> np.ndarray:
        return self.t0 + np.arange(self.n) / self.fps


def usable_blocks(
    video_intervals: Sequence[TimeInterval],
    can_intervals: Sequence[TimeInterval],
    min_duration: float = 0.0,
) -> list[TimeInterval]:
    """Intersect two sorted, non-overlapping coverages.

    Only the overlap of video and CAN coverage is usable for dataset
    construction; pieces shorter than min_duration are dropped.
    """
    out: list[TimeInterval] = []
    i = j = 0
    while i < len(video_intervals) and j < len(can_intervals):
        a, b = video_intervals[i], can_intervals[j]
        start = max(a.start, b.start)
        end = min(a.end, b.end)
        if end > start and (end - start) >= min_duration:
            out.append(TimeInterval(start, end))
        if a.end <= b.end:
            i += 1
        else:
            j += 1
    return out


def chunk_block(
    block: TimeInterval,
    chunk_seconds: float = CHUNK_SECONDS,
    fps: float = LABEL_FPS,
) -> list[LabelGrid]:
    """Cut a block into back-to-back chunks from its start; the trailing
    remainder shorter than chunk_seconds is discarded."""
    if chunk_seconds <= 0:
        raise ValueError("chunk_seconds must be positive")
    n = int(round(chunk_seconds * fps))
    count = int(np.floor(block.duration / chunk_seconds + 1e-9))
    return [LabelGrid(t0=block.start + k * chunk_seconds, fps=fps, n=n) for k in range(count)]


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2:
        times, values = samples
        return np.asarray(times, dtype=np.float64), np.asarray(values, dtype=np.float64)
    times = np.array([s.time for s in samples], dtype=np.float64)
    values = np.array([s.value for s in samples], dtype=np.float64)
    return times, values


def resample_linear(
    samples: Sequence[SignalSample] | tuple[np.ndarray, np.ndarray],
    grid: LabelGrid,
) -> np.ndarray:
    """Linearly interpolate a time-ordered series onto the grid.

    Accepts a sequence of SignalSample or a (times, values) array pair.
    The samples must bracket the whole grid; extrapolation is refused
    because a chunk is only usable when fully covered.
    """
    times, values = _as_arrays(samples)
    if times.size < 2:
        raise CoverageError(f"need at least 2 samples to interpolate, got {times.size}")
    ts = grid.timestamps()
    if times[0] > ts[0] or times[-1] < ts[-1]:
        raise CoverageError(
            f"samples cover [{times[0]:.3f}, {times[-1]:.3f}] but the grid "
            f"needs [{ts[0]:.3f}, {ts[-1]:.3f}]"
        )
    return np.interp(ts, times, values)


def coverage_intervals(times: np.ndarray, max_gap_s: float = 5.0) -> list[TimeInterval]:
    """Coverage of a sample series, split wherever consecutive samples are
    more than max_gap_s apart (a recording dropout, not usable data)."""
    times = np.asarray(times, dtype=np.float64)
    if times.size < 2:
        return []
    gaps = np.flatnonzero(np.diff(times) > max_gap_s)
    starts = np.concatenate(([0], gaps + 1))
    ends = np.concatenate((gaps, [times.size - 1]))
    return [
        TimeInterval(times[i], times[j])
        for i, j in zip(starts, ends)
        if times[j] > times[i]
    ]
