"""Bias-extended rank-R CP model of a three-mode tensor.

    yhat[i, j, k] = sum_r S[i, r] * M[j, r] * T[k, r] + a[i] + b[j] + c[k]

Factor matrices are C-contiguous (row-major) float64 arrays so that a single
entry's ``R`` factors sit next to each other for the per-instance kernels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ShapeError
from .sparse_tensor import SparseTensor, TensorShape

MAGIC = "flft-model 1"


@njit(cache=True)
def predict_one(S, M, T, a, b, c, i, j, k):
    acc = 0.0
    for r in range(S.shape[1]):
        acc += S[i, r] * M[j, r] * T[k, r]
    return acc + a[i] + b[j] + c[k]


@njit(cache=True)
def _predict_rows(S, M, T, a, b, c, idx):
    out = np.empty(idx.shape[0])
    for n in range(idx.shape[0]):
        out[n] = predict_one(S, M, T, a, b, c, idx[n, 0], idx[n, 1], idx[n, 2])
    return out


@dataclass(frozen=True)
class InitScheme:
    kind: str = "uniform"
    low: float = 0.0
    high: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind != "uniform":
            raise ValueError(f"unknown init kind {self.kind!r}")
        if not self.low < self.high:
            raise ValueError(f"init requires low < high, got [{self.low}, {self.high})")


class Model:
    """Factor matrices ``S, M, T`` and bias vectors ``a, b, c``."""

    def __init__(self, S, M, T, a, b, c):
        arrays = [np.ascontiguousarray(x, dtype=np.float64) for x in (S, M, T, a, b, c)]
        S, M, T, a, b, c = arrays
        if S.ndim != 2 or M.ndim != 2 or T.ndim != 2:
            raise ShapeError("factor matrices must be 2-D")
        if not S.shape[1] == M.shape[1] == T.shape[1] >= 1:
            raise ShapeError("factor matrices must share a positive column count")
        if (a.shape, b.shape, c.shape) != ((S.shape[0],), (M.shape[0],), (T.shape[0],)):
            raise ShapeError("bias lengths must match factor row counts")
        if not all(np.all(np.isfinite(x)) for x in arrays):
            raise ShapeError("model parameters must be finite")
        self.S, self.M, self.T, self.a, self.b, self.c = arrays

    @property
    def rank(self) -> int:
        return self.S.shape[1]

    @property
    def shape(self) -> TensorShape:
        return TensorShape(self.S.shape[0], self.M.shape[0], self.T.shape[0])

    @property
    def arrays(self):
        return self.S, self.M, self.T, self.a, self.b, self.c

    def copy(self) -> "Model":
        return Model(*(x.copy() for x in self.arrays))

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return all(np.array_equal(x, y) for x, y in zip(self.arrays, other.arrays))

    def __repr__(self):
        return f"Model(shape={tuple(self.shape)}, rank={self.rank})"

    def check_index(self, i, j, k):
        I, J, K = self.shape
        if not (0 <= i < I and 0 <= j < J and 0 <= k < K):
            raise ShapeError(f"index ({i},{j},{k}) outside model shape {(I, J, K)}")

    def check_fits(self, data: SparseTensor):
        if np.any(data.indices >= np.asarray(self.shape)):
            raise ShapeError(f"{data!r} does not fit model shape {tuple(self.shape)}")

    def predict(self, i, j, k) -> float:
        self.check_index(i, j, k)
        return predict_one(*self.arrays, i, j, k)

    def predict_many(self, indices) -> np.ndarray:
        idx = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1, 3)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            raise ShapeError(f"query outside model shape {tuple(self.shape)}")
        return _predict_rows(*self.arrays, idx)

    def save(self, path):
        """Text dump: magic line, ``I J K R`` line, then S, M, T, a, b, c.

        Each matrix row (and each bias vector) is one whitespace-separated line
        written with 17 significant digits, so loading is lossless.
        """
        lines = [MAGIC, "{} {} {} {}".format(*self.shape, self.rank)]
        for mat in (self.S, self.M, self.T):
            lines.extend(" ".join(f"{v:.17g}" for v in row) for row in mat.tolist())
        for vec in (self.a, self.b, self.c):
            lines.append(" ".join(f"{v:.17g}" for v in vec.tolist()))
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0].strip() != MAGIC:
            raise ShapeError(f"{os.fspath(path)}: not a model file")
        try:
            I, J, K, R = (int(x) for x in lines[1].split())
            rows = [np.array(line.split(), dtype=np.float64) for line in lines[2:]]
            S = np.vstack(rows[:I])
            M = np.vstack(rows[I:I + J])
            T = np.vstack(rows[I + J:I + J + K])
            a, b, c = rows[I + J + K:I + J + K + 3]
        except (ValueError, IndexError) as exc:
            raise ShapeError(f"{os.fspath(path)}: corrupt model file ({exc})") from None
        model = cls(S, M, T, a, b, c)
        if model.shape != (I, J, K) or model.rank != R:
            raise ShapeError(f"{os.fspath(path)}: header does not match arrays")
        return model


def init(shape, rank: int, scheme: InitScheme = InitScheme()) -> Model:
    """Uniform factors on ``[low, high)`` drawn S, then M, then T; zero biases."""
    shape = TensorShape.of(shape)
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(scheme.seed)
    S, M, T = (rng.uniform(scheme.low, scheme.high, (d, rank)) for d in shape)
    return Model(S, M, T, np.zeros(shape[0]), np.zeros(shape[1]), np.zeros(shape[2]))


def loss(model: Model, data: SparseTensor, lam: float, bias_reg_outside_rank: bool = False) -> float:
    """Half the regularised squared error over the entries of ``data``.

    Per observed entry the regulariser is ``lam * sum_r (s^2 + m^2 + t^2 +
    a^2 + b^2 + c^2)``, which counts each bias square ``R`` times. With
    ``bias_reg_outside_rank`` the bias squares are added once instead.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    model.check_fits(data)
    idx = data.indices
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    resid = data.values - model.predict_many(idx)
    factor_sq = (model.S[i] ** 2 + model.M[j] ** 2 + model.T[k] ** 2).sum(axis=1)
    bias_sq = model.a[i] ** 2 + model.b[j] ** 2 + model.c[k] ** 2
    weight = 1.0 if bias_reg_outside_rank else float(model.rank)
    return 0.5 * float(np.sum(resid ** 2 + lam * (factor_sq + weight * bias_sq)))
