"""Biased latent factorization of sparse three-mode tensors.

SGD training with optional linear or nonlinear PID refinement of the
per-entry error, plus COO ingestion, splitting and benchmark helpers.
"""

from .errors import CooFormatError, DivergenceError, FLFTError, ShapeError
from .model import InitScheme, Model, init, loss
from .optimizer import (
    PidGains,
    PidState,
    instant_error,
    nonlinear_map,
    pid_sgd_step,
    refined_error,
    sgd_step,
)
from .sparse_tensor import (
    Entry,
    SparseTensor,
    TensorShape,
    density,
    load_coo,
    save,
    split,
    synth_lowrank,
    synth_truth,
)
from .trainer import (
    OPTIMIZERS,
    RunResult,
    TrainConfig,
    TrainReport,
    compare,
    epochs_to_reach,
    grid_search,
    rmse,
    train,
)

__version__ = "0.1.0"
