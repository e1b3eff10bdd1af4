"""CAN bus log parsing and bit-level signal decoding.

Raw drive logs arrive as CSV dumps of CAN frames. A small JSON signal
database (name, message id, bit layout, scale/offset) describes how to
turn matching frames into physical samples such as speed in km/h.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

CSV_COLUMNS = ("Time", "Bus", "MessageID", "Message", "MessageLength")

BYTE_ORDERS = ("big_endian", "little_endian")


class CanFormatError(ValueError):
    """The log file or signal-spec file violates its format contract."""


class DecodeError(ValueError):
    """A signal layout does not fit inside the frame payload."""


@dataclass(frozen=True)
class CanFrame:
    """One raw frame: timestamp, bus, arbitration id and payload bytes."""

    time: float
    bus: int
    message_id: int
    payload: bytes

    def __post_init__(self) -> None:
        if not (1 <= len(self.payload) <= 8):
            raise ValueError(f"payload must be 1-8 bytes, got {len(self.payload)}")
        if not math.isfinite(self.time) or self.time < 0:
            raise ValueError(f"frame time must be finite and non-negative, got {self.time}")

    @property
    def length(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class SignalSpec:
    """Bit layout and physical conversion for one signal.

    `start_bit` counts from the least-significant bit of the payload
    integer under the chosen byte order; `value = raw * scale + offset`.
    """

    name: str
    message_id: int
    start_bit: int
    length_bits: int
    byte_order: str = "little_endian"
    signed: bool = False
    scale: float = 1.0
    offset: float = 0.0
    unit: str = ""
    clamp_min: float | None = None
    clamp_max: float | None = None

    def __post_init__(self) -> None:
        if self.byte_order not in BYTE_ORDERS:
            raise ValueError(f"byte_order must be one of {BYTE_ORDERS}, got {self.byte_order!r}")
        if not (0 <= self.start_bit <= 63):
            raise ValueError(f"start_bit out of range: {self.start_bit}")
        if not (1 <= self.length_bits <= 64):
            raise ValueError(f"length_bits out of range: {self.length_bits}")
        if self.start_bit + self.length_bits > 64:
            raise ValueError("signal exceeds the 64-bit message window")
        if self.scale == 0:
            raise ValueError("scale must be nonzero")
        if self.clamp_min is not None and self.clamp_max is not None and self.clamp_min > self.clamp_max:
            raise ValueError("clamp_min > clamp_max")


@dataclass(frozen=True)
class SignalSample:
    """One decoded physical value at a point in time."""

    time: float
    name: str
    value: float


def parse_can_csv(path: str | Path) -> list[CanFrame]:
    """Parse a CAN CSV log into time-ordered frames.

    Header must contain the columns Time,Bus,MessageID,Message,MessageLength.
    Malformed rows are skipped (a summary warning is logged); a missing or
    renamed column raises CanFormatError. Ordering is a stable sort by time,
    so rows sharing a timestamp keep file order.
    """
    path = Path(path)
    frames: list[CanFrame] = []
    skipped = 0
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise CanFormatError(f"{path}: missing required columns {missing}; header was {header}")
        for row in reader:
            try:
                time = float(row["Time"])
                bus = int(row["Bus"])
                message_id = int(row["MessageID"])
                payload = bytes.fromhex(row["Message"].strip())
                length = int(row["MessageLength"])
                if length != len(payload):
                    raise ValueError(f"declared length {length} != payload bytes {len(payload)}")
                frames.append(CanFrame(time=time, bus=bus, message_id=message_id, payload=payload))
            except (ValueError, TypeError, KeyError) as exc:
                skipped += 1
                log.debug("skipping malformed row %r: %s", row, exc)
    if skipped:
        log.warning("%s: skipped %d malformed row(s)", path, skipped)
    frames.sort(key=lambda f: f.time)  # sort() is stable: ties keep file order
    return frames


def decode_signal(frame: CanFrame, spec: SignalSpec) -> SignalSample | None:
    """Decode one frame against one spec.

    Returns None when the message id does not match. Raises DecodeError when
    the layout does not fit the actual payload (distinct from a non-match).
    """
    if frame.message_id != spec.message_id:
        return None
    if spec.start_bit + spec.length_bits > 8 * frame.length:
        raise DecodeError(
            f"signal {spec.name!r} needs bits [{spec.start_bit}, "
            f"{spec.start_bit + spec.length_bits}) but payload has {8 * frame.length} bits"
        )
    order = "big" if spec.byte_order == "big_endian" else "little"
    raw = (int.from_bytes(frame.payload, order) >> spec.start_bit) & ((1 << spec.length_bits) - 1)
    if spec.signed and raw & (1 << (spec.length_bits - 1)):
        raw -= 1 << spec.length_bits
    value = raw * spec.scale + spec.offset
    if spec.clamp_min is not None:
        value = max(value, spec.clamp_min)
    if spec.clamp_max is not None:
        value = min(value, spec.clamp_max)
    return SignalSample(time=frame.time, name=spec.name, value=value)


def extract_attribute_series(frames: Iterable[CanFrame], spec: SignalSpec) -> list[SignalSample]:
    """Decode every matching frame, preserving input order."""
    out = []
    for frame in frames:
        sample = decode_signal(frame, spec)
        if sample is not None:
            out.append(sample)
    return out


def load_signal_specs(path: str | Path) -> list[SignalSpec]:
    """Load a JSON array of signal specs.

    Unknown keys are rejected so layout typos fail loudly instead of
    silently defaulting.
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CanFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise CanFormatError(f"{path}: expected a JSON array of signal specs")
    known = {f.name for f in fields(SignalSpec)}
    specs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise CanFormatError(f"{path}: entry {i} is not an object")
        unknown = set(entry) - known
        if unknown:
            raise CanFormatError(f"{path}: entry {i} has unknown keys {sorted(unknown)}")
        try:
            specs.append(SignalSpec(**entry))
        except (TypeError, ValueError) as exc:
            raise CanFormatError(f"{path}: entry {i}: {exc}") from exc
    return specs


def specs_by_name(specs: Sequence[SignalSpec]) -> dict[str, SignalSpec]:
    by_name = {}
    for spec in specs:
        if spec.name in by_name:
            raise CanFormatError(f"duplicate signal spec name {spec.name!r}")
        by_name[spec.name] = spec
    return by_name
