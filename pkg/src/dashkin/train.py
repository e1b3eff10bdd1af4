"""Per-attribute training: losses, the optimization loop, divergence
handling, checkpoints, and the full encoder x head x batch x LR grid."""

from __future__ import annotations

import json
import logging
import math
import random
import threading
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import datastore, models
from .datastore import ATTRIBUTES, ChunkStore, LabelTrack, LatentStore
from .models import (
    ArchSpec,
    TASK_3CLASS,
    TASK_BINARY,
    TASK_REGRESSION,
    StandinEncoder,
    build_model,
    task_for_attribute,
)

log = logging.getLogger(__name__)

AUGMENTS = ("none", "flip", "reverse", "both")

# variant None = the chunk as stored
AUGMENT_VARIANTS: dict[str, tuple[str | None, ...]] = {
    "none": (None,),
    "flip": (None, "flip"),
    "reverse": (None, "reverse"),
    "both": (None, "flip", "reverse"),
}

GRID_BATCH_SIZES = (1, 2)
GRID_LEARNING_RATES = (1e-3, 1e-5)

# model construction touches the global torch RNG; serialize it so parallel
# grid runs stay bit-reproducible
_INIT_LOCK = threading.Lock()


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one training run."""

    attribute: str
    encoder: str = "external_latents"
    head: str = "gru"
    batch_size: int = 1
    learning_rate: float = 1e-3
    epochs: int = 250
    seed: int = 0
    augment: str = "flip"
    lead_mask: bool = False
    rel_speed_classes: bool = False
    frame_size: int = 256
    latent_dim: int = models.LATENT_DIM
    hidden: int = models.LATENT_DIM
    n_heads: int = 8
    positional: bool = True
    workers_per_node: int = 2
    dead_band: float = 2.0
    checkpoint_every: int = 25

    def __post_init__(self) -> None:
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attribute!r}")
        if self.encoder not in models.ENCODERS:
            raise ValueError(f"encoder must be one of {models.ENCODERS}")
        if self.head not in models.HEADS:
            raise ValueError(f"head must be one of {models.HEADS}")
        if self.augment not in AUGMENTS:
            raise ValueError(f"augment must be one of {AUGMENTS}")
        if self.batch_size < 1 or self.epochs < 1 or self.workers_per_node < 1:
            raise ValueError("batch_size, epochs and workers_per_node must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.rel_speed_classes and self.attribute != "lead_rel_speed":
            raise ValueError("rel_speed_classes applies only to lead_rel_speed")

    @property
    def task(self) -> str:
        return task_for_attribute(self.attribute, self.rel_speed_classes)

    @property
    def run_id(self) -> str:
        return (f"{self.attribute}__{self.encoder}__{self.head}"
                f"__bs{self.batch_size}__lr{self.learning_rate:.0e}")

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(encoder=self.encoder, head=self.head, task=self.task,
                        latent_dim=self.latent_dim, hidden=self.hidden,
                        n_heads=self.n_heads, positional=self.positional)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return cls(**doc)


def effective_batch(config: RunConfig) -> int:
    """Gradient contributions per step: worker gradients are averaged, so
    two workers make the batch functionally twice its nominal size."""
    return config.batch_size * config.workers_per_node


def derive_seed(config: RunConfig) -> int:
    return (config.seed * 1_000_003 + zlib.crc32(config.run_id.encode())) % (2**31 - 1)


def metric_direction(task: str) -> str:
    """min for error metrics, max for accuracies."""
    return "min" if task == TASK_REGRESSION else "max"


# ---------------------------------------------------------------------------
# Training pairs and data access
# ---------------------------------------------------------------------------

Pair = tuple[str, str | None]  # (chunk_id, variant)


def expand_training_pairs(chunk_ids: Sequence[str], augment: str, attribute: str) -> list[Pair]:
    """Augmented variants for training. Reversed clips are skipped for
    attributes time reversal invalidates."""
    if augment not in AUGMENTS:
        raise ValueError(f"augment must be one of {AUGMENTS}")
    pairs: list[Pair] = []
    for cid in chunk_ids:
        for variant in AUGMENT_VARIANTS[augment]:
            if variant == "reverse" and attribute not in datastore.REVERSE_PRESERVED:
                continue
            pairs.append((cid, variant))
    return pairs


def plain_pairs(chunk_ids: Sequence[str]) -> list[Pair]:
    """Validation never sees augmented variants."""
    return [(cid, None) for cid in chunk_ids]


def apply_variant(chunk: datastore.VideoChunk, track: LabelTrack,
                  variant: str | None) -> tuple[datastore.VideoChunk, LabelTrack]:
    if variant in (None, ""):
        return chunk, track
    if variant == "flip":
        return datastore.flip_horizontal(chunk, track)
    if variant == "reverse":
        return datastore.reverse_time(chunk, track)
    raise ValueError(f"unknown variant {variant!r}")


class ClipProvider:
    """Serves model inputs, targets and loss masks for (chunk, variant)
    pairs, hiding the encoder split: pixel models get frames, latent
    models get stored (or standin-computed) vectors."""

    def __init__(self, store: ChunkStore, config: RunConfig,
                 latent_store: LatentStore | None = None,
                 standin: StandinEncoder | None = None):
        self.store = store
        self.config = config
        self.latent_store = latent_store
        self.standin = standin
        if config.encoder == "external_latents" and latent_store is None and standin is None:
            raise ValueError("external_latents needs a latent store or a standin encoder")
        self._latent_cache: dict[Pair, np.ndarray] = {}
        self._track_cache: dict[Pair, LabelTrack] = {}
        self._lock = threading.Lock()

    def _load_pair(self, pair: Pair) -> tuple[datastore.VideoChunk, LabelTrack]:
        chunk_id, variant = pair
        chunk, track = self.store.load_chunk(chunk_id)
        return apply_variant(chunk, track, variant)

    def track(self, pair: Pair) -> LabelTrack:
        with self._lock:
            if pair not in self._track_cache:
                track = self.store.load_labels(pair[0])
                if pair[1] == "flip":
                    track = datastore.flip_track(track)
                elif pair[1] == "reverse":
                    track = datastore.reverse_track(track)
                self._track_cache[pair] = track
            return self._track_cache[pair]

    def latents(self, pair: Pair) -> np.ndarray:
        with self._lock:
            cached = self._latent_cache.get(pair)
        if cached is not None:
            return cached
        chunk_id, variant = pair
        if self.latent_store is not None and self.latent_store.has(chunk_id, variant):
            lat = models.load_external_latents(self.latent_store, chunk_id, variant)
        else:
            if self.standin is None:
                raise KeyError(f"no stored latents for {pair} and no standin encoder")
            chunk, _ = self._load_pair(pair)
            lat = self.standin.encode(chunk.frames)
        with self._lock:
            self._latent_cache[pair] = lat
        return lat

    def inputs(self, pair: Pair) -> np.ndarray:
        """(T, D) float32 latents, or (T, 3, H, W) float32 frames in [0, 1]."""
        if self.config.encoder == "external_latents":
            return self.latents(pair)
        chunk, _ = self._load_pair(pair)
        return chunk.frames.astype(np.float32) / 255.0

    def targets(self, pair: Pair) -> np.ndarray:
        track = self.track(pair)
        values = track.target_array(self.config.attribute)
        if self.config.task == TASK_3CLASS:
            return datastore.rel_speed_to_classes(values, self.config.dead_band)
        return values.astype(np.float32)

    def mask(self, pair: Pair) -> np.ndarray | None:
        """Loss mask, or None when every frame counts."""
        if not self.config.lead_mask:
            return None
        if self.config.attribute not in ("lead_distance", "lead_rel_speed"):
            return None
        return datastore.mask_lead_absent(self.track(pair))


def precompute_latents(store: ChunkStore, latent_store: LatentStore,
                       standin: StandinEncoder, pairs: Iterable[Pair],
                       overwrite: bool = False) -> int:
    """Encode and persist latent files for every pair; returns count written."""
    written = 0
    for chunk_id, variant in pairs:
        if not overwrite and latent_store.has(chunk_id, variant):
            continue
        chunk, track = store.load_chunk(chunk_id)
        chunk, _ = apply_variant(chunk, track, variant)
        latent_store.put(chunk_id, standin.encode(chunk.frames), variant)
        written += 1
    return written


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------

def loss_for_outputs(outputs: torch.Tensor, targets: torch.Tensor, task: str,
                     mask: torch.Tensor | None = None) -> torch.Tensor | None:
    """Training loss over a (B, T, out_dim) batch.

    Regression averages squared error over unmasked frames; a batch with
    zero unmasked frames contributes nothing (returns None so the caller
    skips the step). Binary runs cross-entropy on fractional targets.
    """
    if task == TASK_REGRESSION:
        se = (outputs.squeeze(-1) - targets) ** 2
        if mask is None:
            return se.mean()
        weights = mask.to(se.dtype)
        total = weights.sum()
        if total.item() == 0:
            return None
        return (se * weights).sum() / total
    if task == TASK_BINARY:
        return torch.nn.functional.binary_cross_entropy_with_logits(
            outputs.squeeze(-1), targets)
    if task == TASK_3CLASS:
        return torch.nn.functional.cross_entropy(
            outputs.reshape(-1, outputs.shape[-1]), targets.reshape(-1))
    raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class TargetStats:
    """Train-split standardization for regression targets."""

    mean: float
    std: float

    def normalize(self, values: torch.Tensor) -> torch.Tensor:
        return (values - self.mean) / self.std

    def denormalize(self, values: torch.Tensor) -> torch.Tensor:
        return values * self.std + self.mean


IDENTITY_STATS = TargetStats(mean=0.0, std=1.0)


def compute_target_stats(provider: ClipProvider, pairs: Sequence[Pair]) -> TargetStats:
    """Mean/std of the regression target over the training frames that
    actually contribute loss (masked frames excluded)."""
    if provider.config.task != TASK_REGRESSION:
        return IDENTITY_STATS
    chunks = []
    for pair in pairs:
        values = provider.targets(pair)
        mask = provider.mask(pair)
        chunks.append(values if mask is None else values[mask])
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    if values.size == 0:
        return IDENTITY_STATS
    return TargetStats(mean=float(values.mean()),
                       std=float(max(values.std(), 1e-6)))


def _batch_tensors(provider: ClipProvider, pairs: Sequence[Pair], stats: TargetStats
                   ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    config = provider.config
    inputs = torch.from_numpy(np.stack([provider.inputs(p) for p in pairs]))
    if config.task == TASK_3CLASS:
        targets = torch.from_numpy(np.stack([provider.targets(p) for p in pairs]))
    else:
        raw = torch.from_numpy(
            np.stack([provider.targets(p) for p in pairs]).astype(np.float32))
        targets = stats.normalize(raw) if config.task == TASK_REGRESSION else raw
    masks = [provider.mask(p) for p in pairs]
    mask = None
    if any(m is not None for m in masks):
        mask = torch.from_numpy(
            np.stack([m if m is not None else np.ones(targets.shape[1], bool)
                      for m in masks]))
    return inputs, targets, mask


def evaluate_model(model: torch.nn.Module, provider: ClipProvider,
                   pairs: Sequence[Pair], stats: TargetStats,
                   batch_size: int = 8) -> dict[str, float]:
    """Validation pass: reported metric plus the training-loss value.

    Regression metric is MSE in physical units; lead_present gets accuracy
    at 0.5 on both predictions and fractional labels; 3_class gets
    accuracy. Never touches parameters.
    """
    config = provider.config
    task = config.task
    se_sum = 0.0
    frame_count = 0
    correct = 0
    loss_sum = 0.0
    loss_frames = 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            group = pairs[i:i + batch_size]
            inputs, targets, mask = _batch_tensors(provider, group, stats)
            outputs = model(inputs)
            loss = loss_for_outputs(outputs, targets, task, mask)
            n_frames = int(mask.sum()) if mask is not None else targets.numel()
            if loss is not None and n_frames:
                loss_sum += float(loss) * n_frames
                loss_frames += n_frames
            if task == TASK_REGRESSION:
                preds = stats.denormalize(outputs.squeeze(-1))
                raw = stats.denormalize(targets)
                se = (preds - raw) ** 2
                if mask is not None:
                    se_sum += float((se * mask).sum())
                    frame_count += int(mask.sum())
                else:
                    se_sum += float(se.sum())
                    frame_count += se.numel()
            elif task == TASK_BINARY:
                pred_pos = torch.sigmoid(outputs.squeeze(-1)) >= 0.5
                label_pos = targets >= 0.5
                correct += int((pred_pos == label_pos).sum())
                frame_count += targets.numel()
            else:
                pred_class = outputs.argmax(dim=-1)
                correct += int((pred_class == targets).sum())
                frame_count += targets.numel()
    if was_training:
        model.train()
    loss_value = loss_sum / loss_frames if loss_frames else math.nan
    if task == TASK_REGRESSION:
        metric = se_sum / frame_count if frame_count else math.nan
    else:
        metric = correct / frame_count if frame_count else math.nan
    return {"metric": metric, "loss": loss_value}


# ---------------------------------------------------------------------------
# Run results ledger
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    metrics_per_epoch: list[float]
    losses_per_epoch: list[float]
    val_losses_per_epoch: list[float]
    final: float
    diverged: bool
    wall_time: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "metrics_per_epoch": self.metrics_per_epoch,
            "final": self.final,
            "diverged": self.diverged,
            "wall_time": self.wall_time,
            "losses_per_epoch": self.losses_per_epoch,
            "val_losses_per_epoch": self.val_losses_per_epoch,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunResult":
        return cls(
            config=RunConfig.from_dict(doc["config"]),
            metrics_per_epoch=[float(v) for v in doc["metrics_per_epoch"]],
            losses_per_epoch=[float(v) for v in doc.get("losses_per_epoch", [])],
            val_losses_per_epoch=[float(v) for v in doc.get("val_losses_per_epoch", [])],
            final=float(doc["final"]),
            diverged=bool(doc["diverged"]),
            wall_time=float(doc["wall_time"]),
            error=doc.get("error"),
        )


def write_run_result(path: str | Path, result: RunResult) -> None:
    Path(path).write_text(json.dumps(result.to_dict()))


def read_run_result(path: str | Path) -> RunResult:
    return RunResult.from_dict(json.loads(Path(path).read_text()))


def load_run_results(runs_dir: str | Path) -> list[RunResult]:
    runs_dir = Path(runs_dir)
    results = [read_run_result(p) for p in sorted(runs_dir.glob("*.json"))]
    return results


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: torch.nn.Module,
                    config: RunConfig, epoch: int) -> None:
    torch.save({"version": CHECKPOINT_VERSION, "config": config.to_dict(),
                "epoch": epoch, "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path) -> tuple[torch.nn.Module, RunConfig, int]:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = RunConfig.from_dict(doc["config"])
    model = build_model(config.arch_spec())
    model.load_state_dict(doc["state_dict"])
    return model, config, int(doc["epoch"])


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

def _pad_nan(values: list[float], length: int) -> list[float]:
    return values + [math.nan] * (length - len(values))


def train_run(provider: ClipProvider, train_pairs: Sequence[Pair],
              val_pairs: Sequence[Pair], config: RunConfig,
              checkpoint_dir: str | Path | None = None,
              return_model: bool = False):
    """Train one configuration to completion.

    A non-finite training loss marks the run diverged: that epoch and all
    remaining ones are recorded as NaN and optimization stops. The caller
    always gets a RunResult back, never an exception, for numerical
    failure.
    """
    t_start = time.perf_counter()
    run_seed = derive_seed(config)
    with _INIT_LOCK:
        torch.manual_seed(run_seed)
        model = build_model(config.arch_spec())
    stats = compute_target_stats(provider, list(train_pairs))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    step_size = effective_batch(config)
    direction = metric_direction(config.task)

    metrics: list[float] = []
    train_losses: list[float] = []
    val_losses: list[float] = []
    diverged = False
    best_metric: float | None = None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs):
        order = list(train_pairs)
        # distinct integer stream per (run, epoch); tuple seeds hash-seed and warn
        random.Random(run_seed * 1_000_003 + epoch).shuffle(order)
        model.train()
        loss_values: list[float] = []
        for i in range(0, len(order), step_size):
            group = order[i:i + step_size]
            inputs, targets, mask = _batch_tensors(provider, group, stats)
            outputs = model(inputs)
            loss = loss_for_outputs(outputs, targets, config.task, mask)
            if loss is None:
                continue
            if not torch.isfinite(loss):
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_values.append(loss.detach().item())
        if diverged:
            break
        train_losses.append(float(np.mean(loss_values)) if loss_values else math.nan)
        scores = evaluate_model(model, provider, list(val_pairs), stats)
        metrics.append(scores["metric"])
        val_losses.append(scores["loss"])
        if ckpt_dir is not None:
            metric = scores["metric"]
            is_best = (math.isfinite(metric) and
                       (best_metric is None or
                        (metric < best_metric if direction == "min" else metric > best_metric)))
            if is_best:
                best_metric = metric
                save_checkpoint(ckpt_dir / "ckpt_best.pt", model, config, epoch + 1)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"ckpt_epoch_{epoch + 1:04d}.pt",
                                model, config, epoch + 1)

    result = RunResult(
        config=config,
        metrics_per_epoch=_pad_nan(metrics, config.epochs),
        losses_per_epoch=_pad_nan(train_losses, config.epochs),
        val_losses_per_epoch=_pad_nan(val_losses, config.epochs),
        final=_pad_nan(metrics, config.epochs)[-1],
        diverged=diverged,
        wall_time=time.perf_counter() - t_start,
    )
    if return_model:
        return result, model, stats
    return result


def predict_tracks(model: torch.nn.Module, provider: ClipProvider,
                   pairs: Sequence[Pair], stats: TargetStats) -> dict[str, np.ndarray]:
    """Per-chunk predictions in label units (regression denormalized,
    binary as probabilities). 3_class runs are not representable in label
    units and are rejected."""
    config = provider.config
    if config.task == TASK_3CLASS:
        raise ValueError("per-frame class predictions have no label-unit encoding")
    out: dict[str, np.ndarray] = {}
    model.eval()
    with torch.no_grad():
        for pair in pairs:
            inputs = torch.from_numpy(provider.inputs(pair)).unsqueeze(0)
            raw = model(inputs).squeeze(0)
            preds = models.predictions_from_outputs(raw.unsqueeze(0), config.task).squeeze(0)
            if config.task == TASK_REGRESSION:
                preds = stats.denormalize(preds)
            out[pair[0]] = preds.numpy().astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def grid_configs(attributes: Sequence[str] = ATTRIBUTES, epochs: int = 250,
                 seed: int = 0, frame_size: int = 256,
                 checkpoint_every: int = 0, **overrides) -> list[RunConfig]:
    """The full grid: encoder x head x batch size x learning rate per
    attribute, augmentation fixed to horizontal flip. 24 configs per
    attribute, 120 over all five."""
    configs = []
    for attribute in attributes:
        for encoder in models.ENCODERS:
            for head in models.HEADS:
                for batch_size in GRID_BATCH_SIZES:
                    for lr in GRID_LEARNING_RATES:
                        configs.append(RunConfig(
                            attribute=attribute, encoder=encoder, head=head,
                            batch_size=batch_size, learning_rate=lr,
                            epochs=epochs, seed=seed, augment="flip",
                            frame_size=frame_size,
                            checkpoint_every=checkpoint_every, **overrides))
    return configs


def run_grid(store: ChunkStore, split: datastore.DatasetSplit,
             configs: Sequence[RunConfig], out_dir: str | Path,
             latent_store: LatentStore | None = None,
             standin: StandinEncoder | None = None,
             resume: bool = False, parallel: int = 1,
             progress: Callable[[str, RunResult | None], None] | None = None
             ) -> list[RunResult]:
    """Run every config, one result JSON per run under out_dir/runs.

    Individual failures (numerical or otherwise) are recorded and the rest
    of the grid proceeds. With resume, runs whose result file already
    exists are loaded, not retrained.
    """
    runs_dir = Path(out_dir) / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    def one(config: RunConfig) -> RunResult:
        path = runs_dir / f"{config.run_id}.json"
        if resume and path.exists():
            result = read_run_result(path)
            if progress:
                progress(f"skip {config.run_id} (already done)", result)
            return result
        try:
            provider = ClipProvider(store, config, latent_store=latent_store,
                                    standin=standin)
            train_pairs = expand_training_pairs(split.train_ids, config.augment,
                                                config.attribute)
            val_pairs = plain_pairs(split.val_ids)
            result = train_run(provider, train_pairs, val_pairs, config,
                               checkpoint_dir=(runs_dir / config.run_id
                                               if config.checkpoint_every else None))
        except Exception as exc:  # noqa: BLE001 - grid must survive any run
            log.exception("run %s failed", config.run_id)
            nans = [math.nan] * config.epochs
            result = RunResult(config=config, metrics_per_epoch=nans,
                               losses_per_epoch=list(nans),
                               val_losses_per_epoch=list(nans),
                               final=math.nan, diverged=False,
                               wall_time=0.0, error=f"{type(exc).__name__}: {exc}")
        write_run_result(path, result)
        if progress:
            progress(f"done {config.run_id}"
                     + (" [diverged]" if result.diverged else "")
                     + (f" [error: {result.error}]" if result.error else ""),
                     result)
        return result

    if parallel <= 1:
        return [one(c) for c in configs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(one, configs))
