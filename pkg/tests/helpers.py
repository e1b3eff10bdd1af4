"""Independent oracles and fixture builders shared across test modules.

The encoders here are written against the format contracts directly,
with different algorithms than the library (bit-string assembly instead
of shift-and-mask), so round-trip tests actually cross-check two
implementations.
"""

import numpy as np
import torch

from dashkin import datastore
from dashkin.cansig import CanFrame, SignalSpec
from dashkin.datastore import LabelTrack

# ---------------------------------------------------------------------------
# CAN encoding oracle
# ---------------------------------------------------------------------------


def place_bits(raw: int, spec: SignalSpec, payload_bytes: int = 8) -> bytes:
    """Build a payload holding `raw` at the spec's bit position by writing
    individual characters of a binary string."""
    if raw < 0:
        raw += 1 << spec.length_bits
    field = format(raw, f"0{spec.length_bits}b")
    width = 8 * payload_bytes
    bits = ["0"] * width
    for k in range(spec.length_bits):
        # payload-integer bit (start_bit + k) holds field bit k, LSB first
        bits[width - 1 - (spec.start_bit + k)] = field[spec.length_bits - 1 - k]
    value = int("".join(bits), 2)
    order = "big" if spec.byte_order == "big_endian" else "little"
    return value.to_bytes(payload_bytes, order)


def encode_frame(spec: SignalSpec, value: float, payload_bytes: int = 8,
                 time: float = 0.0, bus: int = 0) -> CanFrame:
    """Quantize a physical value and place it in a frame (test-side encoder)."""
    raw = int(round((value - spec.offset) / spec.scale))
    return CanFrame(time=time, bus=bus, message_id=spec.message_id,
                    payload=place_bits(raw, spec, payload_bytes))


def raw_range(spec: SignalSpec) -> tuple[int, int]:
    if spec.signed:
        return -(1 << (spec.length_bits - 1)), (1 << (spec.length_bits - 1)) - 1
    return 0, (1 << spec.length_bits) - 1


def write_can_csv(path, rows):
    """rows: iterable of (time, bus, message_id, hex_payload, length) tuples."""
    with open(path, "w") as fh:
        fh.write("Time,Bus,MessageID,Message,MessageLength\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


# ---------------------------------------------------------------------------
# Label tracks with planted structure
# ---------------------------------------------------------------------------


def flat_track(chunk_id: str = "t", n: int = 60, speed: float = 50.0,
               yaw: float = 0.0, lead: bool = False) -> LabelTrack:
    lp = np.full(n, 1.0 if lead else 0.0)
    ld = np.full(n, 80.0 if lead else datastore.LEAD_DISTANCE_ABSENT)
    ls = np.full(n, 0.0)
    return LabelTrack(chunk_id=chunk_id, speed=np.full(n, float(speed)),
                      yaw=np.full(n, float(yaw)), lead_present=lp,
                      lead_distance=ld, lead_rel_speed=ls)


def set_segment(track: LabelTrack, attribute: str, start: int, end: int,
                value: float) -> None:
    track.array(attribute)[start:end] = value


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numeric_gradients(loss_fn, parameters, eps: float = 1e-5):
    """Central finite differences of a scalar loss for each parameter."""
    grads = []
    for p in parameters:
        flat = p.data.view(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            g[i] = (up - down) / (2.0 * eps)
        grads.append(g.view_as(p))
    return grads


def max_relative_grad_error(model, loss_fn) -> float:
    """Backprop vs central differences, worst case over all parameters.

    Relative to max(1, |numeric|) so near-zero gradients compare absolutely.
    """
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    analytic = [p.grad.detach().clone() for p in params]
    with torch.no_grad():
        numeric = numeric_gradients(loss_fn, params)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(1.0, float(n.abs().max()))
        worst = max(worst, float((a - n).abs().max()) / scale)
    return worst


# ---------------------------------------------------------------------------
# Published accuracy tables used for best-of extraction checks
# ---------------------------------------------------------------------------

NAN = float("nan")

# cell order per row: (baseline, gru, transformer) x (residual_cnn, external_latents)
_TABLE_LAYOUT = [
    ("baseline", "residual_cnn"), ("baseline", "external_latents"),
    ("gru", "residual_cnn"), ("gru", "external_latents"),
    ("transformer", "residual_cnn"), ("transformer", "external_latents"),
]
_ROW_ORDER = [(1, 1e-3), (1, 1e-5), (2, 1e-3), (2, 1e-5)]

SPEED_TABLE_ROWS = [
    [720, 608, 801, 522, NAN, NAN],
    [703, 1108, 630, 675, 612, 810],
    [728, 588, 1479, 446, NAN, NAN],
    [733, 1238, 959, 695, 707, 960],
]

YAW_TABLE_ROWS = [
    [18.439, 18.439, 18.446, 17.840, 18.439, NAN],
    [22.873, 18.325, 4.539, 16.961, 16.612, 18.437],
    [31.181, 18.438, 2.726, 17.005, 18.439, 18.439],
    [21.877, 18.351, 6.908, 17.502, 16.624, 18.439],
]

LEAD_PRESENT_TABLE_ROWS = [
    [0.727, 0.737, 0.624, 0.763, 0.529, 0.529],
    [0.700, 0.755, 0.710, 0.771, 0.636, 0.683],
    [0.676, 0.778, 0.644, 0.738, 0.523, 0.575],
    [0.730, 0.745, 0.681, 0.781, 0.690, 0.709],
]


def published_table(attribute: str, metric: str, rows) -> "object":
    from dashkin.evalreport import ResultTable

    cells = {}
    for (bs, lr), row in zip(_ROW_ORDER, rows):
        for (head, enc), value in zip(_TABLE_LAYOUT, row):
            cells[(bs, lr, head, enc)] = float(value)
    table = ResultTable(attribute=attribute, metric=metric, cells=cells)
    table.validate()
    return table
