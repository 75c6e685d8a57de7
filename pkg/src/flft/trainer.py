"""Epoch driver, evaluation and benchmark helpers.

Three optimizers are available through ``TrainConfig.optimizer_kind``:

* ``sgd``            plain SGD on the bias-extended model (BLFT),
* ``pid_linear``     SGD on the linear-PID refined error (PLFT),
* ``pid_nonlinear``  SGD on the nonlinear-PID refined error (FLFT).

Training stops after ``max_epochs`` or once the validation RMSE moved by less
than ``tol`` on ``patience`` consecutive epochs.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .errors import DivergenceError, ShapeError
from .model import InitScheme, Model, init, predict_one
from .optimizer import DEFAULT_INTEGRAL_CLAMP, PidGains, PidState, run_epoch
from .rng import SplitMix64
from .sparse_tensor import SparseTensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "pid_linear", "pid_nonlinear")
REPORT_HEADER = "epoch,train_rmse,val_rmse,seconds"


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01
    lam: float = 0.0
    rank: int = 10
    gains: PidGains = field(default_factory=PidGains)
    max_epochs: int = 500
    tol: float = 1e-5
    patience: int = 5
    shuffle: bool = True
    seed: int = 0
    optimizer_kind: str = "sgd"
    integral_clamp: Optional[float] = DEFAULT_INTEGRAL_CLAMP

    def __post_init__(self):
        if self.optimizer_kind not in OPTIMIZERS:
            raise ValueError(f"optimizer_kind must be one of {OPTIMIZERS}, got {self.optimizer_kind!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")

    @property
    def effective_gains(self) -> PidGains:
        if self.optimizer_kind == "pid_linear":
            return self.gains.linear
        return self.gains


@dataclass
class TrainReport:
    epochs_run: int = 0
    converged: bool = False
    curve: List[Tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def final_val_rmse(self) -> float:
        return self.curve[-1][2] if self.curve else math.nan

    @property
    def seconds(self) -> float:
        return self.curve[-1][3] if self.curve else 0.0

    @property
    def val_curve(self) -> np.ndarray:
        return np.array([row[2] for row in self.curve])

    def to_table(self, timing: bool = True) -> str:
        rows = [REPORT_HEADER]
        for epoch, tr, va, sec in self.curve:
            rows.append(f"{epoch},{tr:.17g},{va:.17g},{sec if timing else 0.0:.6f}")
        return "\n".join(rows) + "\n"


@njit(cache=True)
def _sum_sq_resid(S, M, T, a, b, c, idx, vals):
    total = 0.0
    for n in range(idx.shape[0]):
        d = vals[n] - predict_one(S, M, T, a, b, c, idx[n, 0], idx[n, 1], idx[n, 2])
        total += d * d
    return total


def rmse(model: Model, data: SparseTensor) -> float:
    """Root mean squared residual of ``model`` over the entries of ``data``."""
    if len(data) == 0:
        raise ValueError("RMSE of an empty set")
    model.check_fits(data)
    return math.sqrt(_sum_sq_resid(*model.arrays, data.indices, data.values) / len(data))


def train(model: Model, train_set: SparseTensor, val_set: SparseTensor, cfg: TrainConfig) -> TrainReport:
    """Fit ``model`` in place on ``train_set`` and return the training curve.

    Each epoch visits every training entry once, in a fresh SplitMix64
    permutation seeded by ``cfg.seed`` when ``cfg.shuffle`` is set and in
    file order otherwise. RMSEs are measured after the epoch's last step;
    only the step loop is timed.
    """
    if cfg.rank != model.rank:
        raise ShapeError(f"config rank {cfg.rank} differs from model rank {model.rank}")
    model.check_fits(train_set)
    model.check_fits(val_set)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")

    n = len(train_set)
    gains = cfg.effective_gains
    use_pid = cfg.optimizer_kind != "sgd"
    state = PidState(n, clamp=cfg.integral_clamp)
    stream = SplitMix64(cfg.seed)
    fixed_order = np.arange(n, dtype=np.int64)
    idx, vals = train_set.indices, train_set.values

    report = TrainReport()
    elapsed = 0.0
    prev_val = None
    streak = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = stream.permutation(n) if cfg.shuffle else fixed_order
        t0 = time.perf_counter()
        bad = run_epoch(idx, vals, order, *model.arrays, cfg.eta, cfg.lam, use_pid,
                        gains.k_p, gains.k_i, gains.k_d, gains.alpha_i, gains.alpha_d,
                        state.integral, state.prev_error, state.visits, state._clamp_value)
        elapsed += time.perf_counter() - t0
        if bad >= 0:
            raise DivergenceError(
                f"{cfg.optimizer_kind} diverged in epoch {epoch} at entry "
                f"{tuple(idx[bad].tolist())} (eta={cfg.eta}, lambda={cfg.lam})")
        val = rmse(model, val_set)
        report.curve.append((epoch, rmse(model, train_set), val, elapsed))
        report.epochs_run = epoch
        if prev_val is not None and abs(val - prev_val) < cfg.tol:
            streak += 1
        else:
            streak = 0
        prev_val = val
        if streak >= cfg.patience:
            report.converged = True
            break
    log.debug("%s: %d epochs, val rmse %.6g, converged=%s",
              cfg.optimizer_kind, report.epochs_run, report.final_val_rmse, report.converged)
    return report


@dataclass
class RunResult:
    config: TrainConfig
    report: TrainReport
    test_rmse: float
    model: Model = field(repr=False)


def _run_variant(cfg, data, shared_init):
    train_set, val_set, test_set = data
    model = init(train_set.shape, cfg.rank, shared_init)
    report = train(model, train_set, val_set, cfg)
    return RunResult(cfg, report, rmse(model, test_set), model)


def compare(variants: Sequence[TrainConfig], data, shared_init: InitScheme = InitScheme(),
            workers: int = 1) -> List[RunResult]:
    """Train every variant from the same initial model on the same split.

    ``data`` is ``(train, val, test)``. Results come back in ``variants``
    order whatever ``workers`` is.
    """
    variants = list(variants)
    if not variants:
        raise ValueError("compare needs at least one variant")
    ranks = {cfg.rank for cfg in variants}
    if len(ranks) != 1:
        raise ValueError(f"all variants must share one rank to share an init, got {sorted(ranks)}")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda cfg: _run_variant(cfg, data, shared_init), variants))
    return [_run_variant(cfg, data, shared_init) for cfg in variants]


def grid_search(base: TrainConfig, data, shared_init: InitScheme = InitScheme(),
                etas: Sequence[float] = (), lams: Sequence[float] = (),
                gains: Sequence[PidGains] = ()) -> TrainConfig:
    """Best configuration over the product of the candidate lists.

    Empty lists keep the ``base`` value. Candidates are ranked by final
    validation RMSE, then by epochs run, then by grid order; a diverging
    candidate scores +inf.
    """
    grid = list(itertools.product(etas or [base.eta], lams or [base.lam], gains or [base.gains]))
    train_set, val_set, _ = data
    best_key, best_cfg = None, None
    for order, (eta, lam, g) in enumerate(grid):
        cfg = replace(base, eta=eta, lam=lam, gains=g)
        model = init(train_set.shape, cfg.rank, shared_init)
        try:
            report = train(model, train_set, val_set, cfg)
            score, epochs = report.final_val_rmse, report.epochs_run
        except DivergenceError as exc:
            log.info("grid candidate diverged: %s", exc)
            score, epochs = math.inf, math.inf
        if not math.isfinite(score):
            score = math.inf
        key = (score, epochs, order)
        if best_key is None or key < best_key:
            best_key, best_cfg = key, cfg
    return best_cfg


def epochs_to_reach(report: TrainReport, threshold: float) -> Optional[int]:
    """First epoch whose validation RMSE is at or below ``threshold``."""
    for epoch, _, val, _ in report.curve:
        if val <= threshold:
            return epoch
    return None
