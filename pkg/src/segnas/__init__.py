"""segnas: desk-scale joint architecture search for fast segmentation.

The library couples a scratch reverse-mode tensor core with a cell-based
search space: Gumbel-softmax op selection inside cells, learnable depth /
downsampling pruning through hyper-cells, a searched multi-scale
aggregation cell, and a measured-latency term in the objective, exercised
end to end on the deterministic ShapesWorld segmentation task.
"""

from .arch import DerivedArchitecture, DiscreteNetwork, derive
from .config import ConfigError, SearchConfig
from .engine import (
    SearchDiverged,
    SearchResult,
    TrajectoryLog,
    evaluate_architecture,
    evaluate_predictions,
    random_search_baseline,
    retrain,
    search,
)
from .latency import LatencyError, LatencyModel, LatencyTable, bench_table, total_loss
from .sampling import GumbelSampler, TemperatureSchedule, expected_mask, gumbel_softmax
from .shapesworld import DatasetSpec, Sample, augment, generate, miou
from .space import AGGREGATION_OPS, INTRA_CELL_OPS, SuperNetwork
from .tensor import ParamStore, Tape, Tensor, TensorError

__version__ = "0.1.0"

__all__ = [
    "AGGREGATION_OPS",
    "ConfigError",
    "DatasetSpec",
    "DerivedArchitecture",
    "DiscreteNetwork",
    "GumbelSampler",
    "INTRA_CELL_OPS",
    "LatencyError",
    "LatencyModel",
    "LatencyTable",
    "ParamStore",
    "Sample",
    "SearchConfig",
    "SearchDiverged",
    "SearchResult",
    "SuperNetwork",
    "Tape",
    "TemperatureSchedule",
    "Tensor",
    "TensorError",
    "TrajectoryLog",
    "augment",
    "bench_table",
    "derive",
    "evaluate_architecture",
    "evaluate_predictions",
    "expected_mask",
    "generate",
    "gumbel_softmax",
    "miou",
    "random_search_baseline",
    "retrain",
    "search",
    "total_loss",
]
