"""Mini-batch training engine with a loss-ranked hard-mini-batch scheduler."""

from .data import (
    BatchPlan,
    Dataset,
    MiniBatch,
    load_csv,
    load_idx,
    make_batches,
    standardize,
    synth_imbalanced_blobs,
    write_csv,
)
from .errors import (
    ComparisonError,
    ConfigurationError,
    DataError,
    DivergenceError,
    FormatError,
    ParseError,
    ShapeError,
    UsageError,
)
from .metrics import (
    MetricsRecord,
    RunSummary,
    compute_delta_e,
    compute_delta_t,
    detect_convergence_epoch,
    emit_csv,
    emit_summary,
    evaluate,
    read_csv,
    read_summary,
    top1_accuracy,
)
from .nn import (
    MLPNetwork,
    OptimizerState,
    backward,
    forward,
    init_network,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from .training import (
    LossLedger,
    RunResult,
    RunState,
    TrainConfig,
    compute_schedule,
    select_hard_batches,
    train,
    train_proposed,
    train_traditional,
)

__version__ = "0.1.0"
