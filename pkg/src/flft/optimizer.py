"""Per-instance SGD updates and their PID-refined variants.

Every step reads the pre-update parameters once: the residual is computed a
single time and all six parameter groups are written from the old values.
With the PID rule the raw residual ``e`` of an entry is replaced by

    e_tilde = kp * e + ki * f(sum of e over visits, alpha_i)
                     + kd * f(e - e_previous_visit, alpha_d)

where ``f(x, alpha) = sign(x) * |x| ** alpha``. The error history is kept
per training entry, so its "time" index is the entry's visit count (one
visit per epoch). Before the first visit the previous error is taken as 0.

The scalar kernels are numba-compiled and shared by the public step
functions and by :func:`run_epoch`, so a single step and a full epoch follow
the same floating-point path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DivergenceError
from .model import Model, predict_one

DEFAULT_INTEGRAL_CLAMP = 1e4


@dataclass(frozen=True)
class PidGains:
    k_p: float = 1.0
    k_i: float = 0.0
    k_d: float = 0.0
    alpha_i: float = 1.0
    alpha_d: float = 1.0

    def __post_init__(self):
        for name in ("alpha_i", "alpha_d"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")

    @property
    def linear(self) -> "PidGains":
        """Same gains with both nonlinearities switched off."""
        return PidGains(self.k_p, self.k_i, self.k_d, 1.0, 1.0)


class PidState:
    """Error history for ``n_slots`` training entries.

    ``integral[s]`` is the running sum of raw errors seen at slot ``s``,
    ``prev_error[s]`` the last one, ``visits[s]`` how many were seen.
    ``clamp`` bounds the integral to ``[-clamp, clamp]``; ``None`` disables it.
    """

    def __init__(self, n_slots: int, clamp=DEFAULT_INTEGRAL_CLAMP):
        if n_slots < 1:
            raise ValueError("PID state needs at least one slot")
        if clamp is not None and not clamp > 0:
            raise ValueError("integral clamp must be positive or None")
        self.integral = np.zeros(n_slots)
        self.prev_error = np.zeros(n_slots)
        self.visits = np.zeros(n_slots, dtype=np.int64)
        self.clamp = clamp

    def __len__(self):
        return self.integral.shape[0]

    @property
    def initialized(self) -> np.ndarray:
        return self.visits > 0

    @property
    def _clamp_value(self):
        return math.inf if self.clamp is None else float(self.clamp)

    def _check_slot(self, slot):
        if not 0 <= slot < len(self):
            raise IndexError(f"PID slot {slot} out of range [0, {len(self)})")


# -- scalar kernels ------------------------------------------------------------


@njit(cache=True)
def _nonlinear(x, alpha):
    if alpha == 1.0:
        return x
    if x > 0.0:
        return x ** alpha
    if x < 0.0:
        return -((-x) ** alpha)
    return 0.0


@njit(cache=True)
def _refine(integral, prev_error, visits, slot, e, kp, ki, kd, alpha_i, alpha_d, clamp):
    acc = integral[slot] + e
    if acc > clamp:
        acc = clamp
    elif acc < -clamp:
        acc = -clamp
    integral[slot] = acc
    delta = e - prev_error[slot]
    prev_error[slot] = e
    visits[slot] += 1
    return kp * e + ki * _nonlinear(acc, alpha_i) + kd * _nonlinear(delta, alpha_d)


@njit(cache=True)
def _update(S, M, T, a, b, c, i, j, k, err, eta, lam):
    """Write one SGD update driven by ``err``; False if anything went non-finite."""
    finite = True
    for r in range(S.shape[1]):
        s = S[i, r]
        m = M[j, r]
        t = T[k, r]
        s_new = s + eta * (err * m * t - lam * s)
        m_new = m + eta * (err * s * t - lam * m)
        t_new = t + eta * (err * s * m - lam * t)
        S[i, r] = s_new
        M[j, r] = m_new
        T[k, r] = t_new
        if not (np.isfinite(s_new) and np.isfinite(m_new) and np.isfinite(t_new)):
            finite = False
    a[i] = a[i] + eta * (err - lam * a[i])
    b[j] = b[j] + eta * (err - lam * b[j])
    c[k] = c[k] + eta * (err - lam * c[k])
    return finite and np.isfinite(a[i]) and np.isfinite(b[j]) and np.isfinite(c[k])


@njit(cache=True)
def run_epoch(idx, vals, order, S, M, T, a, b, c, eta, lam, use_pid,
              kp, ki, kd, alpha_i, alpha_d, integral, prev_error, visits, clamp):
    """One pass over ``order``; returns the entry that diverged, else -1.

    The PID slot of an entry is its row in ``idx``, independent of ``order``.
    """
    for p in range(order.shape[0]):
        n = order[p]
        i = idx[n, 0]
        j = idx[n, 1]
        k = idx[n, 2]
        err = vals[n] - predict_one(S, M, T, a, b, c, i, j, k)
        if use_pid:
            err = _refine(integral, prev_error, visits, n, err,
                          kp, ki, kd, alpha_i, alpha_d, clamp)
        if not _update(S, M, T, a, b, c, i, j, k, err, eta, lam):
            return n
    return -1


# -- public API ----------------------------------------------------------------


def nonlinear_map(x, alpha: float):
    """``sign(x) * |x| ** alpha`` for ``alpha`` in ``(0, 1]``; works elementwise."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if np.ndim(x) == 0:
        return _nonlinear(float(x), float(alpha))
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.abs(x) ** alpha


def instant_error(model: Model, entry) -> float:
    i, j, k, y = entry
    return y - model.predict(i, j, k)


def refined_error(state: PidState, slot: int, e_now: float, gains: PidGains) -> float:
    """Fold ``e_now`` into the history of ``slot`` and return the refined error."""
    state._check_slot(slot)
    return _refine(state.integral, state.prev_error, state.visits, slot, float(e_now),
                   gains.k_p, gains.k_i, gains.k_d, gains.alpha_i, gains.alpha_d,
                   state._clamp_value)


def _apply(model, entry, err, eta, lam):
    i, j, k, _ = entry
    if not _update(*model.arrays, i, j, k, err, float(eta), float(lam)):
        raise DivergenceError(f"non-finite parameter after update at ({i},{j},{k})")


def _check_rates(eta, lam):
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")


def sgd_step(model: Model, entry, eta: float, lam: float) -> None:
    """Plain SGD update of ``model`` on one observed entry, in place."""
    _check_rates(eta, lam)
    err = instant_error(model, entry)
    _apply(model, entry, err, eta, lam)


def pid_sgd_step(model: Model, state: PidState, slot: int, entry, eta: float, lam: float,
                 gains: PidGains) -> None:
    """SGD update driven by the PID-refined error of training entry ``slot``."""
    _check_rates(eta, lam)
    err = instant_error(model, entry)
    _apply(model, entry, refined_error(state, slot, err, gains), eta, lam)
