"""Command-line harness: single runs, delta sweeps over seeds, run comparison.

Example::

    hardbatch --dataset synth --epochs 30 --batch-size 64 --lr 0.01 \\
        --delta 1.0 --delta 0.2 --seed 0 --seed 1 --report-delta-e --out runs/blobs
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .data import Dataset, load_csv, load_idx, make_batches, standardize, synth_imbalanced_blobs
from .errors import (
    ComparisonError,
    ConfigurationError,
    DataError,
    DivergenceError,
    HardBatchError,
    UsageError,
)
from .metrics import (
    MetricsRecord,
    RunSummary,
    compute_delta_e,
    emit_csv,
    emit_round_csv,
    emit_summary,
    summarize_run,
)
from .nn import init_network
from .training import TrainConfig, compute_schedule, train

log = logging.getLogger("hardbatch")

OUT_ENV = "HARDBATCH_OUT"
BASELINE_DELTA = 1.0

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

# config keys whose values must agree for two runs to be comparable
COMPARABLE_KEYS = ("dataset", "epochs", "batch_size", "layers", "learning_rate", "momentum", "num_train_batches")


@dataclass
class ExperimentSpec:
    dataset: str = "synth"
    csv_path: Optional[str] = None
    csv_test_path: Optional[str] = None
    csv_label_column: str = "0"
    csv_header: bool = False
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    idx_test_images: Optional[str] = None
    idx_test_labels: Optional[str] = None
    synth_samples: int = 8000
    synth_fractions: List[float] = field(default_factory=lambda: [0.95, 0.05])
    synth_dim: int = 16
    synth_separation: float = 3.0
    synth_noise: float = 1.0
    # None: each run seed also seeds its own synthetic dataset
    synth_seed: Optional[int] = None
    layers: Optional[List[int]] = None
    hidden: int = 32
    epochs: int = 30
    batch_size: int = 512
    deltas: List[float] = field(default_factory=lambda: [1.0])
    learning_rate: float = 0.005
    momentum: float = 0.9
    seeds: List[int] = field(default_factory=lambda: [0])
    tau: float = 0.02
    eval_every_round: bool = False
    dtype: str = "float32"
    out: str = field(default_factory=lambda: os.environ.get(OUT_ENV, "runs"))
    report_delta_e: bool = False
    force: bool = False

    def validate(self) -> "ExperimentSpec":
        if self.dataset not in ("csv", "idx", "synth"):
            raise UsageError(f"unknown dataset source {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_path:
            raise UsageError("--dataset csv needs --csv-path")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise UsageError("--dataset idx needs --idx-images and --idx-labels")
        if not self.deltas:
            raise UsageError("at least one delta is required")
        for d in self.deltas:
            if not 0 < d <= 1:
                raise UsageError(f"delta must be in (0,1], got {d}")
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if len(set(self.deltas)) != len(self.deltas) or len(set(self.seeds)) != len(self.seeds):
            raise UsageError("deltas and seeds must not repeat")
        if self.report_delta_e and BASELINE_DELTA not in self.deltas:
            raise UsageError("--report-delta-e needs the baseline delta 1.0 in the sweep")
        if self.epochs < 1:
            raise UsageError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch size must be at least 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise UsageError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise UsageError(f"momentum must be in [0,1), got {self.momentum}")
        if self.tau < 0:
            raise UsageError(f"tau must be non-negative, got {self.tau}")
        if self.dtype not in ("float32", "float64"):
            raise UsageError(f"dtype must be float32 or float64, got {self.dtype}")
        return self


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hardbatch", description=__doc__.splitlines()[0], argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file with ExperimentSpec fields; flags override it")
    p.add_argument("--dataset", choices=["csv", "idx", "synth"])
    p.add_argument("--csv-path")
    p.add_argument("--csv-test-path", help="separate test CSV; default is a stratified 80/20 split")
    p.add_argument("--csv-label-column", help="label column index, or name with --csv-header")
    p.add_argument("--csv-header", action="store_true")
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--idx-test-images")
    p.add_argument("--idx-test-labels")
    p.add_argument("--synth-samples", type=int)
    p.add_argument("--synth-fractions", type=_floats)
    p.add_argument("--synth-dim", type=int)
    p.add_argument("--synth-separation", type=float)
    p.add_argument("--synth-noise", type=float)
    p.add_argument("--synth-seed", type=int)
    p.add_argument("--layers", type=_ints, help="full layer sizes, e.g. 16,32,2")
    p.add_argument("--hidden", type=int, help="hidden width when --layers is not given")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--delta", dest="deltas", type=_floats, action="append", help="repeatable")
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", dest="seeds", type=_ints, action="append", help="repeatable")
    p.add_argument("--tau", type=float, help="convergence tolerance relative to the run minimum")
    p.add_argument("--eval-every-round", action="store_true")
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--report-delta-e", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite existing run artifacts")
    p.add_argument("-v", "--verbose", action="count")
    p.add_argument("-vv", dest="verbose", action="count")
    return p


def _load_config_file(path: str) -> Dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(ExperimentSpec)}
    resolved = {}
    for key, value in doc.items():
        key = key.replace("-", "_")
        key = {"lr": "learning_rate", "delta": "deltas", "seed": "seeds"}.get(key, key)
        if key not in known:
            raise UsageError(f"unknown key {key!r} in config file {path}")
        if key in ("deltas", "seeds") and not isinstance(value, list):
            value = [value]
        resolved[key] = value
    return resolved


def parse_config(argv: Optional[Sequence[str]] = None, config_file: Optional[str] = None) -> ExperimentSpec:
    """Resolve defaults, then the config file, then command-line flags."""
    args = vars(build_parser().parse_args(list(argv) if argv is not None else None))
    args.pop("verbose", None)
    config_file = args.pop("config", None) or config_file
    values = _load_config_file(config_file) if config_file else {}
    for key in ("deltas", "seeds"):
        if key in args:
            args[key] = [v for chunk in args[key] for v in chunk]
    values.update(args)
    if "csv_label_column" in values:
        values["csv_label_column"] = str(values["csv_label_column"])
    try:
        spec = ExperimentSpec(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return spec.validate()


def _stratified_split(ds: Dataset, seed: int = 0) -> Tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == k))
        if members.size == 0:
            continue
        n_train = int(math.floor(0.8 * members.size + 0.5))
        if members.size > 1:
            n_train = min(max(n_train, 1), members.size - 1)
        train_idx.append(members[:n_train])
        test_idx.append(members[n_train:])
    tr, te = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))

    def take(idx, tag):
        return Dataset(ds.features[idx], ds.labels[idx], ds.num_classes, tag, ds.class_map)

    return take(tr, "train"), take(te, "test")


def load_data(spec: ExperimentSpec, seed: int) -> Tuple[Dataset, Dataset]:
    """Train/test split for one seed, standardized with train statistics."""
    if spec.dataset == "synth":
        data_seed = seed if spec.synth_seed is None else spec.synth_seed
        train_ds, test_ds = synth_imbalanced_blobs(
            spec.synth_samples, spec.synth_fractions, spec.synth_dim,
            spec.synth_separation, spec.synth_noise, data_seed,
        )
    elif spec.dataset == "csv":
        label = spec.csv_label_column
        label = int(label) if label.lstrip("-").isdigit() else label
        full = load_csv(spec.csv_path, label, spec.csv_header)
        if spec.csv_test_path:
            train_ds = full
            test_ds = load_csv(spec.csv_test_path, label, spec.csv_header, split_tag="test")
            if test_ds.class_map != train_ds.class_map:
                raise DataError("train and test CSVs have different label sets")
        else:
            train_ds, test_ds = _stratified_split(full)
    else:
        full = load_idx(spec.idx_images, spec.idx_labels)
        if spec.idx_test_images and spec.idx_test_labels:
            train_ds = full
            test_ds = load_idx(spec.idx_test_images, spec.idx_test_labels, split_tag="test")
            c = max(train_ds.num_classes, test_ds.num_classes)
            train_ds.num_classes = test_ds.num_classes = c
        else:
            train_ds, test_ds = _stratified_split(full)
    return standardize(train_ds, test_ds)


def resolve_layers(spec: ExperimentSpec, num_features: int, num_classes: int) -> List[int]:
    if spec.layers is None:
        return [num_features, spec.hidden, num_classes]
    layers = list(spec.layers)
    if len(layers) < 2 or layers[0] != num_features or layers[-1] != num_classes:
        raise ConfigurationError(
            f"--layers {layers} must start at {num_features} features and end at {num_classes} classes"
        )
    return layers


def run_id_for(delta: float, seed: int) -> str:
    return f"delta{delta:g}_seed{seed}"


def _half_width(values: Sequence[float]) -> float:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))


def _mean(values):
    v = [x for x in values if x is not None]
    return float(np.mean(v)) if v else None


def compare_runs(summaries: Sequence[RunSummary], baseline_delta: float = BASELINE_DELTA) -> Dict:
    """Per-delta table (mean and 95% t half-width over seeds) against the baseline.

    Delta-e is computed per seed against the baseline run with the same seed
    (or the mean baseline e when that seed has no baseline), then averaged.
    """
    summaries = list(summaries)
    base = [s for s in summaries if s.delta == baseline_delta]
    if not base:
        raise ComparisonError(f"no baseline run with delta={baseline_delta}")
    ref = base[0].config
    for s in summaries:
        for key in COMPARABLE_KEYS:
            if key in ref and s.config.get(key) != ref.get(key):
                raise ComparisonError(
                    f"run {s.run_id} has {key}={s.config.get(key)!r}, baseline has {ref.get(key)!r}"
                )
    base_e = {s.seed: s.convergence_epoch for s in base}
    base_e_mean = float(np.mean(list(base_e.values())))
    base_dt = float(np.mean([s.mean_iter_seconds for s in base]))

    rows = []
    for delta in sorted({s.delta for s in summaries}, reverse=True):
        group = sorted((s for s in summaries if s.delta == delta), key=lambda s: s.seed)
        e = [s.convergence_epoch for s in group]
        de = [compute_delta_e(base_e.get(s.seed, base_e_mean), s.convergence_epoch) for s in group]
        dt = [s.mean_iter_seconds for s in group]
        row = {"delta": delta, "seeds": [s.seed for s in group], "n": len(group)}
        for name, vals in (
            ("train_top1", [s.final_train_top1 for s in group]),
            ("test_top1", [s.final_test_top1 for s in group]),
            ("e", e),
            ("delta_e", de),
            ("dt", dt),
        ):
            row[name] = _mean(vals)
            row[f"{name}_hw"] = _half_width(vals)
        row["delta_dt"] = row["dt"] - base_dt
        row["sort_seconds"] = _mean([s.sort_seconds for s in group])
        row["wins"] = sum(s.convergence_epoch <= base_e.get(s.seed, base_e_mean) for s in group)
        rows.append(row)
    return {
        "baseline_delta": baseline_delta,
        "rows": rows,
        "delta_e": {f"{r['delta']:g}": r["delta_e"] for r in rows if r["delta"] != baseline_delta},
    }


def format_comparison(doc: Dict) -> str:
    head = f"{'delta':>6} {'train top-1':>15} {'test top-1':>15} {'e':>13} {'delta-e %':>15} {'dt (ms)':>9}"
    lines = [head]
    for r in doc["rows"]:
        de = "-" if r["delta"] == doc["baseline_delta"] else f"{r['delta_e']:+.2f}±{r['delta_e_hw']:.2f}"
        lines.append(
            f"{r['delta']:>6g} {r['train_top1']:>8.2f}±{r['train_top1_hw']:<5.2f} "
            f"{r['test_top1']:>8.2f}±{r['test_top1_hw']:<5.2f} {r['e']:>7.2f}±{r['e_hw']:<5.2f} "
            f"{de:>15} {1000 * r['dt']:>9.4f}"
        )
    return "\n".join(lines)


def _prepare_out(spec: ExperimentSpec, run_ids: Sequence[str]) -> Path:
    out = Path(spec.out)
    existing = [out / "spec.json"] + [out / rid for rid in run_ids]
    clash = [p for p in existing if p.exists()]
    if clash and not spec.force:
        raise UsageError(f"{clash[0]} already exists; pass --force to overwrite")
    for p in clash:
        if p.is_dir():
            shutil.rmtree(p)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n", encoding="utf-8")
    return out


def run_experiment(spec: ExperimentSpec) -> int:
    """Run every (delta, seed) pair and write per-run artifacts plus a comparison."""
    spec.validate()
    run_ids = [run_id_for(d, s) for s in spec.seeds for d in spec.deltas]
    out = _prepare_out(spec, run_ids)
    dtype = np.dtype(spec.dtype)
    summaries: List[RunSummary] = []

    for seed in spec.seeds:
        train_ds, test_ds = load_data(spec, seed)
        plan = make_batches(train_ds, test_ds, spec.batch_size, seed, dtype)
        layers = resolve_layers(spec, plan.num_features, plan.num_classes)
        net = init_network(layers, seed, dtype)
        N = plan.num_train_batches
        for delta in spec.deltas:
            run_id = run_id_for(delta, seed)
            run_dir = out / run_id
            run_dir.mkdir()
            config = TrainConfig(
                spec.epochs, spec.batch_size, delta, spec.learning_rate, spec.momentum, seed, spec.eval_every_round
            )
            S, zeta = compute_schedule(spec.epochs, delta, N)
            echo = {
                "dataset": spec.dataset,
                "epochs": spec.epochs,
                "batch_size": spec.batch_size,
                "layers": layers,
                "learning_rate": spec.learning_rate,
                "momentum": spec.momentum,
                "num_train_batches": N,
                "num_test_batches": plan.num_test_batches,
                "selection_size": S if delta < 1 else N,
                "zeta": zeta if delta < 1 else spec.epochs,
                "dtype": spec.dtype,
            }
            records: List[MetricsRecord] = []
            try:
                result = train(net, plan, config, records.append)
            except DivergenceError as exc:
                emit_csv(records, run_dir / "records.csv", run_id, delta, seed)
                diag = {k: v for k, v in exc.diagnostic.items() if k != "records"}
                (run_dir / "FAILED").write_text(json.dumps({"error": str(exc), **diag}, default=str) + "\n")
                log.error("run %s diverged: %s", run_id, exc)
                return EXIT_DIVERGED
            emit_csv(records, run_dir / "records.csv", run_id, delta, seed)
            if result.round_records:
                emit_round_csv(result.round_records, run_dir / "rounds.csv")
            summary = summarize_run(records, run_id, delta, seed, spec.tau, result.sort_seconds, echo)
            summaries.append(summary)
            log.info(
                "%s: e=%.2f test top-1=%.2f%% backprops=%d", run_id,
                summary.convergence_epoch, summary.final_test_top1, summary.backprop_count,
            )

    if any(s.delta == BASELINE_DELTA for s in summaries):
        comparison = compare_runs(summaries)
        by_seed = {s.seed: s for s in summaries if s.delta == BASELINE_DELTA}
        for s in summaries:
            b = by_seed[s.seed]
            s.delta_e = compute_delta_e(b.convergence_epoch, s.convergence_epoch)
            s.delta_dt = s.mean_iter_seconds - b.mean_iter_seconds
        (out / "comparison.json").write_text(json.dumps(comparison, indent=2) + "\n", encoding="utf-8")
        print(format_comparison(comparison))
    for s in summaries:
        emit_summary(s, out / s.run_id / "summary.json")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    verbosity = argv.count("-v") + argv.count("--verbose") + 2 * argv.count("-vv")
    logging.basicConfig(level=logging.DEBUG if verbosity > 1 else logging.INFO if verbosity else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = parse_config(argv)
        return run_experiment(spec)
    except (UsageError, ConfigurationError) as exc:
        print(f"hardbatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"hardbatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HardBatchError as exc:
        print(f"hardbatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
