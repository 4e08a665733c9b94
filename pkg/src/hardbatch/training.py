"""The epoch loop and the loss-ranked hard-mini-batch loop.

Both loops share one back-propagation counter. A checkpoint (full train and
test evaluation) is taken every time the counter reaches a multiple of the
number of training batches ``N``, so runs with different ``delta`` can be
compared at equal back-propagation budgets.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import BatchPlan, MiniBatch
from .errors import ConfigurationError, DivergenceError, ShapeError
from .metrics import MetricsRecord, batch_metrics, evaluate
from .nn import MLPNetwork, OptimizerState, backward, sgd_momentum_step

log = logging.getLogger(__name__)

Sink = Callable[[MetricsRecord], None]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 512
    delta: float = 1.0
    learning_rate: float = 0.005
    momentum: float = 0.9
    seed: int = 0
    eval_every_round: bool = False

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigurationError(f"epochs must be a positive integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigurationError(f"batch size must be a positive integer, got {self.batch_size}")
        if not 0 < self.delta <= 1:
            raise ConfigurationError(f"delta must be in (0,1], got {self.delta}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0,1), got {self.momentum}")


class LossLedger:
    """Last recorded training loss of every batch, indexed by batch id.

    ``losses[i]`` is NaN until batch ``i`` has been back-propagated once;
    ``updated_at[i]`` is the back-propagation count of that last update.
    """

    def __init__(self, num_batches: int):
        if num_batches < 1:
            raise ConfigurationError("ledger needs at least one batch")
        self.losses = np.full(num_batches, np.nan)
        self.updated_at = np.full(num_batches, -1, dtype=np.int64)

    def __len__(self):
        return self.losses.size

    def record(self, batch_id: int, loss: float, backprop_count: int) -> None:
        self.losses[batch_id] = loss
        self.updated_at[batch_id] = backprop_count

    @property
    def complete(self) -> bool:
        return bool(np.all(self.updated_at >= 0))

    def entries(self) -> List[Tuple[int, float, int]]:
        return [(i, float(l), int(u)) for i, (l, u) in enumerate(zip(self.losses, self.updated_at))]


@dataclass
class RunState:
    num_batches: int
    backprop_count: int = 0
    round_index: int = 0
    zeta: int = 0
    selection_size: int = 0

    @property
    def epoch_equivalent(self) -> float:
        return self.backprop_count / self.num_batches


@dataclass
class RunResult:
    net: MLPNetwork
    state: RunState
    records: List[MetricsRecord] = field(default_factory=list)
    round_records: List[MetricsRecord] = field(default_factory=list)
    ledger: Optional[LossLedger] = None
    # batch ids trained in each round, in training order
    selections: List[List[int]] = field(default_factory=list)
    train_seconds: float = 0.0
    sort_seconds: float = 0.0


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compute_schedule(E: int, delta: float, N: int) -> Tuple[int, int]:
    """``(S, zeta)``: batches trained per round and number of rounds.

    ``S = max(1, round(delta * N))`` and ``zeta = round((E - 1) * N / S)``,
    which keeps ``N + zeta * S`` as close as possible to ``E * N``. When the
    divisions are exact this is ``zeta = (E - 1) / delta``.
    """
    if not 0 < delta <= 1:
        raise ConfigurationError(f"delta must be in (0,1], got {delta}")
    if N < 1 or E < 1:
        raise ConfigurationError(f"need N >= 1 and E >= 1, got N={N}, E={E}")
    S = min(N, max(1, _round_half_up(delta * N)))
    zeta = _round_half_up((E - 1) * N / S)
    return S, zeta


def select_hard_batches(ledger: Union[LossLedger, Sequence[float], dict], S: int) -> List[int]:
    """Ids of the ``S`` highest-loss batches, hardest first; ties go to the lower id."""
    if isinstance(ledger, LossLedger):
        losses = ledger.losses
    elif isinstance(ledger, dict):
        losses = np.array([ledger[i] for i in range(len(ledger))], dtype=np.float64)
    else:
        losses = np.asarray(ledger, dtype=np.float64)
    n = losses.size
    if not 1 <= S <= n:
        raise ConfigurationError(f"selection size must be in [1, {n}], got {S}")
    if np.isnan(losses).any():
        raise ConfigurationError("ledger has uninitialized entries")
    order = np.lexsort((np.arange(n), -losses))
    return [int(i) for i in order[:S]]


class _Clock:
    """Accumulates training time; evaluation is excluded."""

    def __init__(self):
        self.total = 0.0
        self.sorting = 0.0
        self._t0 = None

    def start(self):
        self._t0 = time.perf_counter()

    def stop(self, sorting=False):
        dt = time.perf_counter() - self._t0
        self.total += dt
        if sorting:
            self.sorting += dt


def _check_compatible(net: MLPNetwork, plan: BatchPlan) -> None:
    if net.layers[0].fan_in != plan.num_features:
        raise ShapeError(f"network takes {net.layers[0].fan_in} features, data has {plan.num_features}")
    if net.layers[-1].fan_out < plan.num_classes:
        raise ShapeError(f"network has {net.layers[-1].fan_out} outputs, data has {plan.num_classes} classes")


def _train_step(net, batch: MiniBatch, opt: OptimizerState, state: RunState, result: RunResult) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads = backward(net, batch.x, batch.y)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(
            f"non-finite loss on batch {batch.id} after {state.backprop_count} back-propagations",
            {
                "batch_id": batch.id,
                "backprop_count": state.backprop_count,
                "round_index": state.round_index,
                "loss": loss,
                "records": list(result.records),
            },
        )
    sgd_momentum_step(net, grads, opt)
    state.backprop_count += 1
    return loss


def checkpoint_metrics(
    net: MLPNetwork, plan: BatchPlan, state: RunState, sink: Optional[Sink], wall_seconds: float
) -> MetricsRecord:
    """Evaluate the full train and test splits and emit an epoch-equivalent record."""
    train_loss, train_top1 = batch_metrics(net, plan.train_batches)
    test_loss, test_top1 = evaluate(net, plan.test_batches)
    record = MetricsRecord(
        backprop_count=state.backprop_count,
        epoch_equivalent=state.epoch_equivalent,
        train_loss=train_loss,
        train_top1=train_top1,
        test_loss=test_loss,
        test_top1=test_top1,
        wall_seconds=wall_seconds,
    )
    if sink is not None:
        sink(record)
    return record


def _emit(result: RunResult, sink: Optional[Sink]) -> Sink:
    def emit(record: MetricsRecord):
        result.records.append(record)
        if sink is not None:
            sink(record)

    return emit


def train_traditional(
    net: MLPNetwork, plan: BatchPlan, config: TrainConfig, sink: Optional[Sink] = None
) -> RunResult:
    """Plain mini-batch SGD: ``E`` epochs over all batches in id order.

    Works on a copy of ``net``; the trained network is ``result.net``.
    """
    _check_compatible(net, plan)
    net = net.copy()
    N = plan.num_train_batches
    state = RunState(N, zeta=config.epochs, selection_size=N)
    result = RunResult(net, state)
    emit = _emit(result, sink)
    opt = OptimizerState.zeros_like(net, config.learning_rate, config.momentum)
    clock = _Clock()
    for epoch in range(config.epochs):
        state.round_index = epoch
        clock.start()
        try:
            for batch in plan.train_batches:
                _train_step(net, batch, opt, state, result)
        finally:
            clock.stop()
        checkpoint_metrics(net, plan, state, emit, clock.total)
    result.train_seconds = clock.total
    log.debug("traditional run finished: %d back-propagations", state.backprop_count)
    return result


def train_proposed(
    net: MLPNetwork, plan: BatchPlan, config: TrainConfig, sink: Optional[Sink] = None
) -> RunResult:
    """Loss-ranked hard-mini-batch training.

    One warm-up pass over all ``N`` batches fills the loss ledger. Then, for
    each of ``zeta`` rounds: optionally evaluate the test split, rank the
    ledger by descending loss, and back-propagate the top ``S`` batches in
    that order, refreshing only their ledger entries. ``delta == 1`` runs
    :func:`train_traditional` instead.
    """
    if config.delta >= 1.0:
        return train_traditional(net, plan, config, sink)
    _check_compatible(net, plan)
    net = net.copy()
    N = plan.num_train_batches
    S, zeta = compute_schedule(config.epochs, config.delta, N)
    state = RunState(N, zeta=zeta, selection_size=S)
    ledger = LossLedger(N)
    result = RunResult(net, state, ledger=ledger)
    emit = _emit(result, sink)
    opt = OptimizerState.zeros_like(net, config.learning_rate, config.momentum)
    clock = _Clock()

    def step(batch):
        clock.start()
        try:
            loss = _train_step(net, batch, opt, state, result)
            ledger.record(batch.id, loss, state.backprop_count)
        finally:
            clock.stop()
        if state.backprop_count % N == 0:
            checkpoint_metrics(net, plan, state, emit, clock.total)

    for batch in plan.train_batches:
        step(batch)

    for z in range(zeta):
        state.round_index = z
        if config.eval_every_round:
            test_loss, test_top1 = evaluate(net, plan.test_batches)
            result.round_records.append(
                MetricsRecord(state.backprop_count, state.epoch_equivalent, math.nan, math.nan,
                              test_loss, test_top1, clock.total, round_index=z)
            )
        clock.start()
        chosen = select_hard_batches(ledger, S)
        clock.stop(sorting=True)
        result.selections.append(chosen)
        for batch_id in chosen:
            step(plan.train_batches[batch_id])

    if state.backprop_count % N:
        checkpoint_metrics(net, plan, state, emit, clock.total)
    result.train_seconds = clock.total
    result.sort_seconds = clock.sorting
    log.debug("hard-batch run finished: S=%d zeta=%d, %d back-propagations", S, zeta, state.backprop_count)
    return result


def train(net: MLPNetwork, plan: BatchPlan, config: TrainConfig, sink: Optional[Sink] = None) -> RunResult:
    """Run whichever loop ``config.delta`` calls for."""
    return train_proposed(net, plan, config, sink)
