"""Rule-based driving-event detection over kinematic tracks.

Tracks may be ground truth or model predictions; either way they are
label-shaped per-frame series. Simple threshold rules with hysteresis
cover turns and stops; lead appearance/disappearance are edge rules; an
overtake is composed from a lead loss with a preceding approach.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datastore import ATTRIBUTES, LEAD_PRESENT_THRESHOLD, LabelTrack

EVENT_KINDS = ("left_turn", "right_turn", "stop", "lead_acquired", "lead_lost", "overtake")

DIRECTIONS = ("above", "below")


@dataclass(frozen=True)
class EventRule:
    """One threshold predicate over one signal.

    direction "above" activates at value >= threshold, "below" at
    value <= threshold. With edge set, the rule fires only when the track
    is seen entering the active state (a run already active at frame 0 is
    not an event).
    """

    name: str
    signal: str
    threshold: float
    direction: str
    min_duration_s: float
    hysteresis: float = 0.8
    edge: bool = False

    def __post_init__(self) -> None:
        if self.signal not in ATTRIBUTES:
            raise ValueError(f"unknown signal {self.signal!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.min_duration_s <= 0:
            raise ValueError("min_duration_s must be positive")
        if not 0 < self.hysteresis <= 1:
            raise ValueError("hysteresis must be in (0, 1]")

    @property
    def exit_threshold(self) -> float:
        """Deactivation level: backed off from entry by (1 - hysteresis)
        of the threshold magnitude, on the inactive side."""
        slack = (1.0 - self.hysteresis) * abs(self.threshold)
        return self.threshold - slack if self.direction == "above" else self.threshold + slack


@dataclass(frozen=True)
class DetectedEvent:
    kind: str
    start: float  # seconds, grid-relative
    end: float
    confidence: float
    start_frame: int
    end_frame: int  # exclusive

    def __post_init__(self) -> None:
        if self.end < self.start:
            raise ValueError("event end before start")
        if not 0 <= self.confidence <= 1:
            raise ValueError("confidence outside [0, 1]")


def default_rules(turn_yaw: float = 5.0, turn_min_s: float = 1.0,
                  stop_speed: float = 1.0, stop_min_s: float = 2.0,
                  lead_threshold: float = LEAD_PRESENT_THRESHOLD,
                  lead_min_s: float = 1.0, hysteresis: float = 0.8) -> list[EventRule]:
    return [
        EventRule("left_turn", "yaw", -turn_yaw, "below", turn_min_s, hysteresis),
        EventRule("right_turn", "yaw", turn_yaw, "above", turn_min_s, hysteresis),
        EventRule("stop", "speed", stop_speed, "below", stop_min_s, hysteresis),
        EventRule("lead_acquired", "lead_present", lead_threshold, "above",
                  lead_min_s, hysteresis, edge=True),
        EventRule("lead_lost", "lead_present", lead_threshold, "below",
                  lead_min_s, hysteresis, edge=True),
    ]


@dataclass(frozen=True)
class OvertakeParams:
    """lead_lost counts as an overtake when the ego car was closing on the
    lead shortly before losing it while moving at road speed."""

    window_s: float = 5.0
    dead_band: float = 2.0
    min_speed: float = 30.0


def hysteresis_runs(values: np.ndarray, rule: EventRule) -> list[tuple[int, int]]:
    """Maximal active runs [start, end) under the rule's two thresholds."""
    values = np.asarray(values, dtype=np.float64)
    exit_thr = rule.exit_threshold
    if rule.direction == "above":
        entering = values >= rule.threshold
        staying = values >= exit_thr
    else:
        entering = values <= rule.threshold
        staying = values <= exit_thr
    runs = []
    active = False
    start = 0
    for i in range(values.size):
        if not active and entering[i]:
            active, start = True, i
        elif active and not staying[i]:
            runs.append((start, i))
            active = False
    if active:
        runs.append((start, values.size))
    return runs


def _min_frames(rule: EventRule, fps: float) -> int:
    return max(1, math.ceil(rule.min_duration_s * fps - 1e-9))


def detect_with_rule(values: np.ndarray, rule: EventRule, fps: float) -> list[DetectedEvent]:
    """Events for one rule: active runs lasting at least min_duration.

    Confidence is the fraction of the run's frames meeting the strict
    entry condition (hysteresis keeps frames in the run that only clear
    the softer exit level).
    """
    values = np.asarray(values, dtype=np.float64)
    if rule.direction == "above":
        strict = values >= rule.threshold
    else:
        strict = values <= rule.threshold
    events = []
    for start, end in hysteresis_runs(values, rule):
        if rule.edge and start == 0:
            continue
        if end - start < _min_frames(rule, fps):
            continue
        confidence = float(strict[start:end].mean())
        events.append(DetectedEvent(kind=rule.name, start=start / fps, end=end / fps,
                                    confidence=confidence, start_frame=start,
                                    end_frame=end))
    return events


def detect_events(track: LabelTrack, fps: float,
                  rules: Sequence[EventRule] | None = None,
                  overtake: OvertakeParams | None = OvertakeParams()) -> list[DetectedEvent]:
    """All events over one track, sorted by start time."""
    if rules is None:
        rules = default_rules()
    events: list[DetectedEvent] = []
    for rule in rules:
        events.extend(detect_with_rule(track.array(rule.signal), rule, fps))
    if overtake is not None:
        lost = [e for e in events if e.kind == "lead_lost"]
        events.extend(_overtakes(track, fps, lost, overtake))
    events.sort(key=lambda e: (e.start, e.kind))
    return events


def _overtakes(track: LabelTrack, fps: float, lead_lost_events: Sequence[DetectedEvent],
               params: OvertakeParams) -> list[DetectedEvent]:
    out = []
    for lost in lead_lost_events:
        f = lost.start_frame
        w0 = max(0, f - int(round(params.window_s * fps)))
        window_present = track.lead_present[w0:f] >= LEAD_PRESENT_THRESHOLD
        window_closing = track.lead_rel_speed[w0:f] < -params.dead_band
        approached = bool(np.any(window_present & window_closing))
        fast_enough = track.speed[f] >= params.min_speed
        if approached and fast_enough:
            out.append(DetectedEvent(kind="overtake", start=lost.start, end=lost.end,
                                     confidence=lost.confidence,
                                     start_frame=lost.start_frame,
                                     end_frame=lost.end_frame))
    return out


# ---------------------------------------------------------------------------
# Rule config and event output files
# ---------------------------------------------------------------------------

def rules_from_json(path: str | Path) -> list[EventRule]:
    """Rules as a JSON array of EventRule field dicts."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: rule config must be a JSON array")
    return [EventRule(**entry) for entry in doc]


def write_events_jsonl(path: str | Path, per_chunk: dict[str, Sequence[DetectedEvent]]) -> int:
    """One JSON object per line: {chunk_id, kind, start_s, end_s, confidence}."""
    count = 0
    with open(path, "w") as fh:
        for chunk_id in sorted(per_chunk):
            for e in per_chunk[chunk_id]:
                fh.write(json.dumps({
                    "chunk_id": chunk_id, "kind": e.kind,
                    "start_s": e.start, "end_s": e.end,
                    "confidence": e.confidence,
                }) + "\n")
                count += 1
    return count
