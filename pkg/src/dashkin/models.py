"""Frame encoders and temporal heads.

Every model maps a clip to one output vector per frame. Two encoder
paths exist: a residual CNN trained end-to-end from pixels, and
precomputed per-frame latent vectors (from the deterministic standin
featurizer or any external source) fed straight into a head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

LATENT_DIM = 512

# residual_cnn trains from pixels; external_latents reads precomputed
# per-frame vectors (standin-encoded or otherwise) from a latent store
ENCODERS = ("residual_cnn", "external_latents")
HEADS = ("baseline", "gru", "transformer")


class EncoderError(RuntimeError):
    """Non-finite activations inside the frame encoder."""

TASK_REGRESSION = "regression"
TASK_BINARY = "binary"
TASK_3CLASS = "3_class"

# lead_rel_speed switches to 3_class when class targets are requested
_ATTRIBUTE_TASKS = {
    "speed": TASK_REGRESSION,
    "yaw": TASK_REGRESSION,
    "lead_present": TASK_BINARY,
    "lead_distance": TASK_REGRESSION,
    "lead_rel_speed": TASK_REGRESSION,
}


def task_for_attribute(attribute: str, rel_speed_classes: bool = False) -> str:
    if attribute not in _ATTRIBUTE_TASKS:
        raise KeyError(f"unknown attribute {attribute!r}")
    if attribute == "lead_rel_speed" and rel_speed_classes:
        return TASK_3CLASS
    return _ATTRIBUTE_TASKS[attribute]


def output_dim_for_task(task: str) -> int:
    if task in (TASK_REGRESSION, TASK_BINARY):
        return 1
    if task == TASK_3CLASS:
        return 3
    raise ValueError(f"unknown task {task!r}")


class ResidualBlock(nn.Module):
    """One 3x3 conv with a skip connection.

    No normalization layers anywhere in the encoder: the output for a clip
    must not depend on what else happens to share its batch.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        if in_ch != out_ch or stride != 1:
            self.skip: nn.Module = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x) + self.skip(x))


# (in_channels, out_channels, n_blocks) per stage; first block of each
# stage downsamples by 2, so six stages shrink 256 -> 4 (64 -> 1).
CNN_STAGES = (
    (3, 32, 1),
    (32, 64, 1),
    (64, 64, 2),
    (64, 128, 2),
    (128, 256, 4),
    (256, 256, 4),
)


class FrameEncoder(nn.Module):
    """Residual CNN over single frames: (N, 3, H, W) in [0, 1] -> (N, D)."""

    def __init__(self, latent_dim: int = LATENT_DIM, stages=CNN_STAGES):
        super().__init__()
        blocks: list[nn.Module] = []
        for in_ch, out_ch, n_blocks in stages:
            for b in range(n_blocks):
                blocks.append(ResidualBlock(in_ch if b == 0 else out_ch, out_ch,
                                            stride=2 if b == 0 else 1))
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.project = nn.Linear(stages[-1][1], latent_dim)
        self.latent_dim = latent_dim

    def forward(self, x: torch.Tensor, check_finite: bool = False) -> torch.Tensor:
        if check_finite:
            h = x
            for i, block in enumerate(self.blocks):
                h = block(h)
                if not torch.isfinite(h).all():
                    raise EncoderError(f"non-finite activation after block {i}")
        else:
            h = self.blocks(x)
        h = self.pool(h).flatten(1)
        out = self.project(h)
        if check_finite and not torch.isfinite(out).all():
            raise EncoderError("non-finite activation after final projection")
        return out


class StandinEncoder:
    """Deterministic per-frame featurizer standing in for a learned one.

    Grayscale, 4x average pooling, centering, then a fixed seeded Gaussian
    projection to the latent dimension. Identical frames always map to
    identical latents, and the projection depends only on (seed, frame
    size), so latent files are reproducible byte for byte.
    """

    def __init__(self, latent_dim: int = LATENT_DIM, pool: int = 4, seed: int = 711):
        self.latent_dim = latent_dim
        self.pool = pool
        self.seed = seed
        self._projections: dict[tuple[int, int], np.ndarray] = {}

    def _projection(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._projections:
            in_dim = (h // self.pool) * (w // self.pool)
            rng = np.random.default_rng((self.seed, h, w))
            self._projections[key] = rng.normal(
                0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, self.latent_dim)
            ).astype(np.float32)
        return self._projections[key]

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """(n, 3, h, w) uint8 -> (n, latent_dim) float32."""
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ValueError(f"expected (n, 3, h, w), got {frames.shape}")
        n, _, h, w = frames.shape
        if h % self.pool or w % self.pool:
            raise ValueError(f"frame size {h}x{w} not divisible by pool {self.pool}")
        gray = frames.astype(np.float32).mean(axis=1) / 255.0
        p = self.pool
        pooled = gray.reshape(n, h // p, p, w // p, p).mean(axis=(2, 4))
        flat = (pooled - 0.5).reshape(n, -1)
        return flat @ self._projection(h, w)


class BaselineHead(nn.Module):
    """Frame-independent two-layer MLP; no temporal mixing at all."""

    def __init__(self, latent_dim: int = LATENT_DIM, hidden: int = LATENT_DIM, out_dim: int = 1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        return self.net(latents)


class GruHead(nn.Module):
    """Two stacked GRU layers with a per-frame linear readout."""

    def __init__(self, latent_dim: int = LATENT_DIM, hidden: int = LATENT_DIM,
                 out_dim: int = 1, num_layers: int = 2):
        super().__init__()
        self.rnn = nn.GRU(latent_dim, hidden, num_layers=num_layers, batch_first=True)
        self.readout = nn.Linear(hidden, out_dim)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        h, _ = self.rnn(latents)
        return self.readout(h)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic alternating sin/cos position table, (length, dim)."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    args = pos * freq
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(args)
    table[:, 1::2] = torch.cos(args[:, : dim // 2])
    return table.to(dtype)


class TransformerHead(nn.Module):
    """Self-attention over the frame sequence, per-frame linear readout.

    Dropout stays at zero so a trained model is a deterministic function
    and double-precision gradient checks are meaningful.
    """

    def __init__(self, latent_dim: int = LATENT_DIM, hidden: int = LATENT_DIM,
                 out_dim: int = 1, num_layers: int = 2, n_heads: int = 8,
                 positional: bool = True):
        super().__init__()
        if hidden % n_heads:
            raise ValueError(f"hidden {hidden} not divisible by n_heads {n_heads}")
        self.input_proj = nn.Linear(latent_dim, hidden) if latent_dim != hidden else nn.Identity()
        layer = nn.TransformerEncoderLayer(
            d_model=hidden, nhead=n_heads, dim_feedforward=2 * hidden,
            dropout=0.0, batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=num_layers)
        self.readout = nn.Linear(hidden, out_dim)
        self.positional = positional
        self.hidden = hidden

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        x = self.input_proj(latents)
        if self.positional:
            table = sinusoidal_positions(x.shape[1], self.hidden, dtype=x.dtype)
            x = x + table.to(x.device)
        return self.readout(self.encoder(x))


class ClipModel(nn.Module):
    """Optional pixel encoder plus a temporal head.

    forward accepts (B, T, 3, H, W) float frames in [0, 1] when an encoder
    is attached, otherwise (B, T, D) latents.
    """

    def __init__(self, head: nn.Module, encoder: nn.Module | None = None):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.encoder is not None:
            b, t = x.shape[:2]
            latents = self.encoder(x.reshape(b * t, *x.shape[2:])).reshape(b, t, -1)
        else:
            latents = x
        return self.head(latents)


@dataclass(frozen=True)
class ArchSpec:
    """Which network to build, independent of how it is trained."""

    encoder: str = "external_latents"
    head: str = "gru"
    task: str = TASK_REGRESSION
    latent_dim: int = LATENT_DIM
    hidden: int = LATENT_DIM
    n_heads: int = 8
    positional: bool = True

    def __post_init__(self) -> None:
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        output_dim_for_task(self.task)


def build_head(spec: ArchSpec) -> nn.Module:
    out_dim = output_dim_for_task(spec.task)
    if spec.head == "baseline":
        return BaselineHead(spec.latent_dim, spec.hidden, out_dim)
    if spec.head == "gru":
        return GruHead(spec.latent_dim, spec.hidden, out_dim)
    return TransformerHead(spec.latent_dim, spec.hidden, out_dim,
                           n_heads=spec.n_heads, positional=spec.positional)


def build_model(spec: ArchSpec) -> ClipModel:
    encoder = FrameEncoder(spec.latent_dim) if spec.encoder == "residual_cnn" else None
    return ClipModel(head=build_head(spec), encoder=encoder)


def load_external_latents(store, chunk_id: str, variant: str | None = None,
                          expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Read stored latents, checking the (frames, dims) contract."""
    latents = store.get(chunk_id, variant)
    if expect_shape is not None and tuple(latents.shape) != tuple(expect_shape):
        raise ValueError(
            f"latents for {chunk_id!r} have shape {tuple(latents.shape)}, "
            f"expected {tuple(expect_shape)}"
        )
    if not np.all(np.isfinite(latents)):
        raise ValueError(f"latents for {chunk_id!r} contain non-finite values")
    return latents


def predictions_from_outputs(outputs: torch.Tensor, task: str) -> torch.Tensor:
    """Raw head outputs -> user-facing predictions.

    Regression passes through (and drops the trailing singleton axis);
    binary becomes a probability, 3_class a probability triple.
    """
    if task == TASK_REGRESSION:
        return outputs.squeeze(-1)
    if task == TASK_BINARY:
        return torch.sigmoid(outputs.squeeze(-1))
    if task == TASK_3CLASS:
        return torch.softmax(outputs, dim=-1)
    raise ValueError(f"unknown task {task!r}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
