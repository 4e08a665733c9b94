"""Accuracy/loss measurement, convergence detection and run reporting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError
from .nn import MLPNetwork, forward, softmax_cross_entropy

CSV_COLUMNS = (
    "run_id",
    "delta",
    "seed",
    "backprop_count",
    "epoch_equivalent",
    "train_loss",
    "train_top1",
    "test_loss",
    "test_top1",
    "wall_seconds",
)
# columns that legitimately differ between otherwise identical runs
TIMING_COLUMNS = ("wall_seconds",)


@dataclass(frozen=True)
class MetricsRecord:
    backprop_count: int
    epoch_equivalent: float
    train_loss: float
    train_top1: float
    test_loss: float
    test_top1: float
    wall_seconds: float
    round_index: Optional[int] = None

    def without_timing(self) -> tuple:
        """Field values minus wall-clock columns, for determinism comparisons."""
        return tuple(getattr(self, f.name) for f in fields(self) if f.name not in TIMING_COLUMNS)


@dataclass
class RunSummary:
    run_id: str
    delta: float
    seed: int
    convergence_epoch: float
    final_train_loss: float
    final_train_top1: float
    final_test_loss: float
    final_test_top1: float
    mean_iter_seconds: float
    backprop_count: int
    train_seconds: float
    sort_seconds: float = 0.0
    tau: float = 0.02
    delta_e: Optional[float] = None
    delta_dt: Optional[float] = None
    config: Dict = field(default_factory=dict)


def top1_accuracy(logits: np.ndarray, labels) -> float:
    """Percentage of rows whose argmax equals the label (ties go to the lowest class)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return 100.0 * float(np.count_nonzero(np.argmax(logits, axis=1) == labels)) / labels.size


def batch_metrics(net: MLPNetwork, batches) -> Tuple[float, float]:
    """Size-weighted mean loss and top-1 over batches; the network is only read."""
    total = 0
    loss_sum = 0.0
    correct = 0
    for b in batches:
        logits = forward(net, b.x)
        loss, _ = softmax_cross_entropy(logits, b.y)
        n = len(b)
        loss_sum += loss * n
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == b.y))
        total += n
    if total == 0:
        return float("nan"), float("nan")
    return loss_sum / total, 100.0 * correct / total


def evaluate(net: MLPNetwork, test_batches) -> Tuple[float, float]:
    """``(test_loss, test_top1)`` over the given batches, weighted by batch size."""
    return batch_metrics(net, test_batches)


def smooth_losses(values: Sequence[float]) -> np.ndarray:
    """Centered 3-point moving average; the two end points average their 2-point window."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        return v.copy() if v.size < 2 else np.full(2, v.mean())
    out = np.empty_like(v)
    out[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3.0
    out[0] = (v[0] + v[1]) / 2.0
    out[-1] = (v[-2] + v[-1]) / 2.0
    return out


def first_within_tolerance(epochs: Sequence[float], losses: Sequence[float], tau: float = 0.02) -> float:
    """Earliest epoch whose loss is at most ``(1 + tau)`` times the series minimum."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise DataError("empty loss series")
    threshold = (1.0 + tau) * losses.min()
    return float(epochs[int(np.argmax(losses <= threshold))])


def detect_convergence_epoch(records: Sequence[MetricsRecord], tau: float = 0.02) -> float:
    """Convergence epoch ``e`` of a run from its epoch-equivalent checkpoints.

    The training-loss series is smoothed with :func:`smooth_losses` and
    ``e`` is the first checkpoint within ``tau`` (relative) of the smoothed
    minimum. Per-round records (``round_index`` set) are ignored.
    """
    points = [r for r in records if r.round_index is None]
    if not points:
        raise DataError("no epoch-equivalent records to read a convergence epoch from")
    smoothed = smooth_losses([r.train_loss for r in points])
    if not np.all(np.isfinite(smoothed)):
        raise DataError("training-loss series contains non-finite values")
    return first_within_tolerance([r.epoch_equivalent for r in points], smoothed, tau)


def compute_delta_e(e_base: float, e_delta: float) -> float:
    """Percent change in convergence epoch vs the baseline; positive means faster."""
    if e_base <= 0 or e_delta <= 0:
        raise DataError("convergence epochs must be positive")
    return 100.0 * (e_base - e_delta) / e_delta


def mean_iteration_seconds(records: Sequence[MetricsRecord]) -> float:
    points = [r for r in records if r.round_index is None]
    if not points or points[-1].backprop_count == 0:
        raise DataError("no back-propagations recorded")
    return points[-1].wall_seconds / points[-1].backprop_count


def compute_delta_t(
    records: Sequence[MetricsRecord], baseline: Optional[Sequence[MetricsRecord]] = None
) -> Tuple[float, Optional[float]]:
    """Mean seconds per back-propagation, and its difference to a baseline run.

    ``wall_seconds`` is cumulative training time, so the last checkpoint
    carries the total.
    """
    dt = mean_iteration_seconds(records)
    if baseline is None:
        return dt, None
    return dt, dt - mean_iteration_seconds(baseline)


def summarize_run(
    records: Sequence[MetricsRecord],
    run_id: str,
    delta: float,
    seed: int,
    tau: float = 0.02,
    sort_seconds: float = 0.0,
    config: Optional[Dict] = None,
) -> RunSummary:
    points = [r for r in records if r.round_index is None]
    if not points:
        raise DataError("cannot summarize a run without checkpoints")
    last = points[-1]
    return RunSummary(
        run_id=run_id,
        delta=delta,
        seed=seed,
        convergence_epoch=detect_convergence_epoch(points, tau),
        final_train_loss=last.train_loss,
        final_train_top1=last.train_top1,
        final_test_loss=last.test_loss,
        final_test_top1=last.test_top1,
        mean_iter_seconds=mean_iteration_seconds(points),
        backprop_count=last.backprop_count,
        train_seconds=last.wall_seconds,
        sort_seconds=sort_seconds,
        tau=tau,
        config=dict(config or {}),
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(
    records: Sequence[MetricsRecord],
    path: Union[str, Path],
    run_id: str = "",
    delta: float = 1.0,
    seed: int = 0,
) -> None:
    """Write checkpoint records as CSV with the fixed column set in ``CSV_COLUMNS``."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    run_id,
                    _fmt(float(delta)),
                    seed,
                    r.backprop_count,
                    _fmt(float(r.epoch_equivalent)),
                    _fmt(float(r.train_loss)),
                    _fmt(float(r.train_top1)),
                    _fmt(float(r.test_loss)),
                    _fmt(float(r.test_top1)),
                    _fmt(float(r.wall_seconds)),
                ]
            )


def read_csv(path: Union[str, Path]) -> Tuple[Dict, List[MetricsRecord]]:
    """Inverse of :func:`emit_csv`: ``({run_id, delta, seed}, records)``."""
    meta: Dict = {}
    records = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            meta = {"run_id": row["run_id"], "delta": float(row["delta"]), "seed": int(row["seed"])}
            records.append(
                MetricsRecord(
                    backprop_count=int(row["backprop_count"]),
                    epoch_equivalent=float(row["epoch_equivalent"]),
                    train_loss=float(row["train_loss"]),
                    train_top1=float(row["train_top1"]),
                    test_loss=float(row["test_loss"]),
                    test_top1=float(row["test_top1"]),
                    wall_seconds=float(row["wall_seconds"]),
                )
            )
    return meta, records


def emit_round_csv(records: Sequence[MetricsRecord], path: Union[str, Path]) -> None:
    """Per-round test evaluations of the hard-batch loop (``round_index`` column first)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round_index", "backprop_count", "epoch_equivalent", "test_loss", "test_top1", "wall_seconds"])
        for r in records:
            writer.writerow(
                [r.round_index, r.backprop_count, _fmt(float(r.epoch_equivalent)),
                 _fmt(float(r.test_loss)), _fmt(float(r.test_top1)), _fmt(float(r.wall_seconds))]
            )


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def emit_summary(summary: Union[RunSummary, Dict], path: Union[str, Path]) -> None:
    """Write a summary (or any flat mapping) as a JSON object.

    The summary's ``config`` echo is flattened into ``config.<key>`` entries.
    """
    doc = asdict(summary) if isinstance(summary, RunSummary) else dict(summary)
    config = doc.pop("config", None) or {}
    for k, v in config.items():
        doc[f"config.{k}"] = v
    if "convergence_epoch" in doc:
        doc.setdefault("e", doc["convergence_epoch"])
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2) + "\n", encoding="utf-8")


def read_summary(path: Union[str, Path]) -> RunSummary:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    config = {k[len("config."):]: doc.pop(k) for k in list(doc) if k.startswith("config.")}
    doc.pop("e", None)
    known = {f.name for f in fields(RunSummary)}
    return RunSummary(**{k: v for k, v in doc.items() if k in known}, config=config)
