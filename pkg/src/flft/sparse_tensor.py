"""Three-mode sparse tensors in coordinate (COO) form.

Modes are (station, metric, time slot). Indices are 0-based everywhere.
A :class:`SparseTensor` is immutable once built: its index and value arrays
are flagged read-only so splits and training runs can share them.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from typing import IO, Iterator, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CooFormatError, ShapeError
from .rng import SplitMix64

HEADER = "i,j,k,value"


class TensorShape(NamedTuple):
    n_stations: int
    n_metrics: int
    n_slots: int

    @property
    def size(self) -> int:
        return self.n_stations * self.n_metrics * self.n_slots

    @classmethod
    def of(cls, dims: Sequence[int]) -> "TensorShape":
        if len(dims) != 3:
            raise ShapeError(f"expected 3 dimensions, got {len(dims)}")
        dims = tuple(int(d) for d in dims)
        if min(dims) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {dims}")
        return cls(*dims)


class Entry(NamedTuple):
    i: int
    j: int
    k: int
    value: float


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Observed cells ``y[i, j, k]`` of an ``I x J x K`` tensor.

    ``indices`` is an ``(n, 3)`` int64 array and ``values`` a length-``n``
    float64 array; row order is the entry order.
    """

    shape: TensorShape
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        shape = TensorShape.of(self.shape)
        idx = np.array(self.indices, dtype=np.int64, copy=True).reshape(-1, 3)
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if idx.shape[0] != vals.shape[0]:
            raise ShapeError("indices and values differ in length")
        if idx.shape[0] == 0:
            raise CooFormatError("no entries")
        if not np.all(np.isfinite(vals)):
            raise CooFormatError("non-finite value")
        if np.any(idx < 0) or np.any(idx >= np.asarray(shape)):
            raise ShapeError(f"index out of bounds for shape {tuple(shape)}")
        flat = _flat_index(idx, shape)
        if np.unique(flat).size != flat.size:
            raise CooFormatError("duplicate (i,j,k) triple")
        idx.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_entries(cls, entries, shape=None) -> "SparseTensor":
        entries = list(entries)
        idx = np.array([(e[0], e[1], e[2]) for e in entries], dtype=np.int64).reshape(-1, 3)
        vals = np.array([e[3] for e in entries], dtype=np.float64)
        if shape is None:
            if not entries:
                raise CooFormatError("no entries")
            shape = tuple(int(d) + 1 for d in idx.max(axis=0))
        return cls(TensorShape.of(shape), idx, vals)

    def __len__(self):
        return self.values.shape[0]

    def __iter__(self) -> Iterator[Entry]:
        for (i, j, k), v in zip(self.indices.tolist(), self.values.tolist()):
            yield Entry(i, j, k, v)

    def __getitem__(self, n) -> Entry:
        i, j, k = self.indices[n].tolist()
        return Entry(i, j, k, float(self.values[n]))

    @property
    def entries(self):
        return list(self)

    def __eq__(self, other):
        if not isinstance(other, SparseTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def take(self, rows) -> "SparseTensor":
        """Sub-tensor made of the given entry positions, same shape."""
        rows = np.asarray(rows, dtype=np.int64)
        return SparseTensor(self.shape, self.indices[rows], self.values[rows])

    def __repr__(self):
        return f"SparseTensor(shape={tuple(self.shape)}, nnz={len(self)})"


def _flat_index(idx, shape):
    _, J, K = shape
    return (idx[:, 0] * J + idx[:, 1]) * K + idx[:, 2]


def density(t: SparseTensor) -> float:
    """Fraction of the ``I*J*K`` cells that are observed."""
    return len(t) / t.shape.size


# -- COO text I/O -----------------------------------------------------------

Source = Union[str, os.PathLike, IO[bytes], IO[str], bytes]


def _open_text(source):
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8")), "own"
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), "own"
    if isinstance(source, io.TextIOBase):
        return source, "borrowed"
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), "wrapped"


def _is_number(field):
    try:
        float(field)
    except ValueError:
        return False
    return True


def load_coo(source: Source, shape_hint: Optional[Sequence[int]] = None) -> SparseTensor:
    """Read ``i,j,k,value`` records into a :class:`SparseTensor`.

    ``source`` is a path, raw bytes, or a binary/text stream. A single header
    line is allowed and recognised by a non-numeric first field. Blank lines
    are ignored. Without ``shape_hint`` the shape is ``max index + 1`` per mode.
    """
    hint = TensorShape.of(shape_hint) if shape_hint is not None else None
    fh, mode = _open_text(source)
    idx, vals = [], []
    seen = set()
    try:
        first = True
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if first:
                first = False
                if not _is_number(fields[0]):
                    continue
            if len(fields) != 4:
                raise CooFormatError(f"expected 4 fields, got {len(fields)}", lineno)
            try:
                i, j, k = (int(f) for f in fields[:3])
                v = float(fields[3])
            except ValueError:
                raise CooFormatError(f"malformed record {line!r}", lineno) from None
            if min(i, j, k) < 0:
                raise CooFormatError("negative index", lineno)
            if hint is not None and (i >= hint[0] or j >= hint[1] or k >= hint[2]):
                raise CooFormatError(f"index ({i},{j},{k}) outside shape {tuple(hint)}", lineno)
            if not math.isfinite(v):
                raise CooFormatError("non-finite value", lineno)
            if (i, j, k) in seen:
                raise CooFormatError(f"duplicate triple ({i},{j},{k})", lineno)
            seen.add((i, j, k))
            idx.append((i, j, k))
            vals.append(v)
    finally:
        if mode == "own":
            fh.close()
        elif mode == "wrapped":
            fh.detach()
    if not vals:
        raise CooFormatError("no entries")
    idx = np.array(idx, dtype=np.int64)
    shape = hint if hint is not None else TensorShape.of(idx.max(axis=0) + 1)
    return SparseTensor(shape, idx, np.array(vals))


def save(t: SparseTensor, sink, header: bool = True) -> None:
    """Write ``t`` as COO text; values carry 17 significant digits."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="") as fh:
            save(t, fh, header=header)
        return
    lines = [HEADER] if header else []
    for (i, j, k), v in zip(t.indices.tolist(), t.values.tolist()):
        lines.append(f"{i},{j},{k},{v:.17g}")
    text = "\n".join(lines) + "\n"
    if isinstance(sink, io.TextIOBase):
        sink.write(text)
    else:
        sink.write(text.encode("utf-8"))


def dumps(t: SparseTensor) -> str:
    buf = io.StringIO()
    save(t, buf)
    return buf.getvalue()


# -- splitting and synthesis --------------------------------------------------


def split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    """Floor the train and validation shares, give the remainder to test."""
    if len(ratios) != 3:
        raise ValueError("ratios must have three components")
    if any(not r > 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {tuple(ratios)}")
    total = float(sum(ratios))
    n_train = math.floor(ratios[0] / total * n)
    n_val = math.floor(ratios[1] / total * n)
    return n_train, n_val, n - n_train - n_val


def split(t: SparseTensor, ratios=(2, 2, 6), seed: int = 0):
    """Seeded (train, val, test) partition of the entries of ``t``.

    Entries are permuted with :class:`~flft.rng.SplitMix64` Fisher-Yates and
    cut into contiguous blocks. Each block keeps the permuted order.
    """
    n = len(t)
    if n < 3:
        raise ValueError(f"need at least 3 entries to split, got {n}")
    n_train, n_val, _ = split_sizes(n, ratios)
    perm = SplitMix64(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    empty = [name for name, p in zip(("train", "val", "test"), parts) if p.size == 0]
    if empty:
        raise ValueError(f"split leaves {', '.join(empty)} empty; use more entries")
    return tuple(t.take(p) for p in parts)


def synth_truth(shape, rank: int, seed: int):
    """Ground-truth model behind :func:`synth_lowrank`.

    Factors are drawn uniform on ``[0, 1)`` in the order S, M, T, then biases
    uniform on ``[-0.1, 0.1)`` in the order a, b, c, all from
    ``numpy.random.default_rng(seed)``.
    """
    return _draw_truth(np.random.default_rng(seed), TensorShape.of(shape), rank)


def _draw_truth(rng, shape, rank):
    from .model import Model

    if rank < 1:
        raise ValueError("rank must be >= 1")
    S, M, T = (rng.uniform(0.0, 1.0, (d, rank)) for d in shape)
    a, b, c = (rng.uniform(-0.1, 0.1, d) for d in shape)
    return Model(S, M, T, a, b, c)


def synth_lowrank(shape, rank: int, density: float, noise_sd: float = 0.0, seed: int = 0) -> SparseTensor:
    """Sample a noisy low-rank tensor with biases.

    The generator model is ``synth_truth(shape, rank, seed)``. After drawing
    it, the same generator picks ``floor(density * I*J*K)`` distinct cells
    (kept in row-major order) and, when ``noise_sd > 0``, adds Gaussian noise.
    """
    shape = TensorShape.of(shape)
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    count = math.floor(density * shape.size)
    if count < 1:
        raise ValueError("density too small: no cells would be sampled")
    rng = np.random.default_rng(seed)
    truth = _draw_truth(rng, shape, rank)
    cells = np.sort(rng.choice(shape.size, size=count, replace=False))
    idx = np.stack(np.unravel_index(cells, shape), axis=1).astype(np.int64)
    vals = truth.predict_many(idx)
    if noise_sd > 0:
        vals = vals + rng.normal(0.0, noise_sd, count)
    return SparseTensor(shape, idx, vals)
