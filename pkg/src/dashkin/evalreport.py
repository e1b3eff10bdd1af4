"""Result tables, best-configuration extraction, unit conversion, and
per-epoch validation curves over the training-run ledger."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import models
from .models import TASK_REGRESSION
from .train import GRID_BATCH_SIZES, GRID_LEARNING_RATES, RunResult

log = logging.getLogger(__name__)

# (batch_size, learning_rate) row order, (head, encoder) column order
ROW_KEYS = tuple((bs, lr) for bs in GRID_BATCH_SIZES for lr in GRID_LEARNING_RATES)
COL_KEYS = tuple((head, enc) for head in models.HEADS for enc in models.ENCODERS)

CellKey = tuple[int, float, str, str]  # (batch_size, learning_rate, head, encoder)

_ENC_SHORT = {"residual_cnn": "cnn", "external_latents": "lat"}


class IncompleteTableError(ValueError):
    """A result table is missing cells for some grid configs."""


class NoFiniteResultError(ValueError):
    """Every cell of a table is NaN."""


def expected_cell_keys() -> list[CellKey]:
    return [(bs, lr, head, enc) for (bs, lr) in ROW_KEYS for (head, enc) in COL_KEYS]


@dataclass
class ResultTable:
    """Final metric per grid cell for one attribute; 24 cells, laid out as
    batch-size x learning-rate rows against head x encoder columns."""

    attribute: str
    metric: str  # "mse" or "accuracy"; controls the best-value direction
    cells: dict[CellKey, float]

    def validate(self) -> None:
        expected = set(expected_cell_keys())
        have = set(self.cells)
        if have != expected:
            missing = sorted(expected - have)
            extra = sorted(have - expected)
            parts = []
            if missing:
                parts.append(f"missing cells: {[_key_label(k) for k in missing]}")
            if extra:
                parts.append(f"unexpected cells: {[_key_label(k) for k in extra]}")
            raise IncompleteTableError(f"table for {self.attribute!r}: " + "; ".join(parts))

    def get(self, batch_size: int, learning_rate: float, head: str, encoder: str) -> float:
        return self.cells[(batch_size, learning_rate, head, encoder)]

    def to_text(self) -> str:
        col_names = [f"{head}-{_ENC_SHORT[enc]}" for head, enc in COL_KEYS]
        width = max(12, *(len(c) for c in col_names)) + 2
        lines = [f"{self.attribute} ({self.metric})"]
        header = f"{'batch':>5} {'lr':>7}" + "".join(f"{c:>{width}}" for c in col_names)
        lines.append(header)
        for bs, lr in ROW_KEYS:
            row = f"{bs:>5} {lr:>7.0e}"
            for head, enc in COL_KEYS:
                row += f"{_format_value(self.cells[(bs, lr, head, enc)]):>{width}}"
            lines.append(row)
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attribute", "metric", "batch_size", "learning_rate",
                             "head", "encoder", "value"])
            for key in expected_cell_keys():
                bs, lr, head, enc = key
                writer.writerow([self.attribute, self.metric, bs, repr(lr),
                                 head, enc, _format_value(self.cells[key])])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ResultTable":
        cells: dict[CellKey, float] = {}
        attribute = metric = None
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                attribute = row["attribute"]
                metric = row["metric"]
                key = (int(row["batch_size"]), float(row["learning_rate"]),
                       row["head"], row["encoder"])
                cells[key] = float(row["value"])
        if attribute is None:
            raise IncompleteTableError(f"{path}: empty table file")
        table = cls(attribute=attribute, metric=metric, cells=cells)
        table.validate()
        return table


def _format_value(value: float) -> str:
    return "NaN" if math.isnan(value) else f"{value:.6g}"


def _key_label(key: CellKey) -> str:
    bs, lr, head, enc = key
    return f"{enc}/{head}/bs{bs}/lr{lr:.0e}"


def metric_kind(result: RunResult) -> str:
    return "mse" if result.config.task == TASK_REGRESSION else "accuracy"


def build_table(results: Sequence[RunResult]) -> ResultTable:
    """Collect one attribute's 24 final metrics into a table."""
    if not results:
        raise IncompleteTableError("no results given")
    attributes = {r.config.attribute for r in results}
    if len(attributes) != 1:
        raise ValueError(f"results mix attributes: {sorted(attributes)}")
    kinds = {metric_kind(r) for r in results}
    if len(kinds) != 1:
        raise ValueError(f"results mix metric kinds: {sorted(kinds)}")
    cells: dict[CellKey, float] = {}
    for r in results:
        c = r.config
        key = (c.batch_size, c.learning_rate, c.head, c.encoder)
        if key in cells:
            raise ValueError(f"duplicate result for {_key_label(key)}")
        cells[key] = r.final
    table = ResultTable(attribute=attributes.pop(), metric=kinds.pop(), cells=cells)
    table.validate()
    return table


@dataclass(frozen=True)
class BestConfig:
    encoder: str
    head: str
    batch_size: int
    learning_rate: float
    value: float


def best_config(table: ResultTable, direction: str | None = None) -> BestConfig:
    """Best finite cell; min for error metrics, max for accuracies.

    Ties break lexicographically on (encoder, head, batch_size,
    learning_rate) so the answer is deterministic.
    """
    if direction is None:
        direction = "max" if table.metric == "accuracy" else "min"
    if direction not in ("min", "max"):
        raise ValueError(f"direction must be min or max, got {direction!r}")
    finite = [(key, v) for key, v in table.cells.items() if math.isfinite(v)]
    if not finite:
        raise NoFiniteResultError(f"table for {table.attribute!r} has no finite cells")
    best_value = min(v for _, v in finite) if direction == "min" else max(v for _, v in finite)
    candidates = [key for key, v in finite if v == best_value]
    bs, lr, head, enc = min(candidates, key=lambda k: (k[3], k[2], k[0], k[1]))
    return BestConfig(encoder=enc, head=head, batch_size=bs, learning_rate=lr,
                      value=best_value)


KMH_TO_MS = 1.0 / 3.6


def convert_mse_units(mse_kmh2: float) -> float:
    """Squared-error values scale by the square of the unit factor, so
    km/h-squared MSE divides by 3.6^2 to land in (m/s)^2."""
    if mse_kmh2 < 0:
        raise ValueError(f"MSE cannot be negative, got {mse_kmh2}")
    return mse_kmh2 * KMH_TO_MS * KMH_TO_MS


# ---------------------------------------------------------------------------
# Per-epoch curves
# ---------------------------------------------------------------------------

def write_curve_csv(path: str | Path, result: RunResult) -> None:
    """Full per-epoch series, NaN entries preserved."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_metric"])
        for i in range(len(result.metrics_per_epoch)):
            writer.writerow([
                i + 1,
                _format_value(result.losses_per_epoch[i]) if result.losses_per_epoch else "NaN",
                _format_value(result.val_losses_per_epoch[i]) if result.val_losses_per_epoch else "NaN",
                _format_value(result.metrics_per_epoch[i]),
            ])


def _finite_prefix(values: Sequence[float]) -> list[float]:
    out = []
    for v in values:
        if not math.isfinite(v):
            break
        out.append(v)
    return out


def plot_curve(path: str | Path, result: RunResult) -> None:
    """Validation-metric curve; the NaN tail of a diverged run is cut off
    (the CSV keeps it)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metric = _finite_prefix(result.metrics_per_epoch)
    loss = _finite_prefix(result.losses_per_epoch)
    fig, ax = plt.subplots(figsize=(6, 4))
    if metric:
        ax.plot(range(1, len(metric) + 1), metric, label="validation metric")
    if loss:
        ax.plot(range(1, len(loss) + 1), loss, label="train loss", alpha=0.6)
    ax.set_xlabel("epoch")
    ax.set_title(result.config.run_id + (" (diverged)" if result.diverged else ""))
    if metric or loss:
        ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def export_curves(results: Sequence[RunResult], out_dir: str | Path) -> list[dict]:
    """curves/<run_id>.csv and .png per run, plus a manifest. Empty input
    produces an empty manifest and succeeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for result in results:
        run_id = result.config.run_id
        csv_path = out_dir / f"{run_id}.csv"
        png_path = out_dir / f"{run_id}.png"
        write_curve_csv(csv_path, result)
        plot_curve(png_path, result)
        manifest.append({"run_id": run_id, "csv": csv_path.name, "plot": png_path.name,
                         "diverged": result.diverged})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# Whole-report assembly
# ---------------------------------------------------------------------------

def write_report(results: Sequence[RunResult], out_dir: str | Path) -> dict:
    """Tables for every attribute with a complete 24-cell grid, curves for
    every run, and a best-configuration summary."""
    out_dir = Path(out_dir)
    tables_dir = out_dir / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    export_curves(results, out_dir / "curves")

    by_attribute: dict[str, list[RunResult]] = {}
    for r in results:
        by_attribute.setdefault(r.config.attribute, []).append(r)

    summary_lines = []
    written = {}
    for attribute in sorted(by_attribute):
        group = by_attribute[attribute]
        try:
            table = build_table(group)
        except IncompleteTableError as exc:
            log.warning("skipping table for %s: %s", attribute, exc)
            continue
        (tables_dir / f"{attribute}.txt").write_text(table.to_text())
        table.to_csv(tables_dir / f"{attribute}.csv")
        written[attribute] = table
        try:
            best = best_config(table)
        except NoFiniteResultError:
            summary_lines.append(f"{attribute}: all runs diverged")
            continue
        line = (f"{attribute}: best {table.metric} {best.value:.6g} at "
                f"{best.encoder}/{best.head}/bs{best.batch_size}/lr{best.learning_rate:.0e}")
        if attribute == "speed" and table.metric == "mse":
            line += f" ({convert_mse_units(best.value):.3f} in (m/s)^2)"
        summary_lines.append(line)
    (out_dir / "summary.txt").write_text("\n".join(summary_lines) + "\n" if summary_lines else "")
    return written
