"""Folding ``sign(BatchNorm(x))`` into per-channel threshold comparisons.

With ``y = x * scale + shift`` (the float32 inference form of batch norm),
``sign(y) = +1`` iff ``x >= tau`` when ``scale > 0`` and iff ``x <= tau`` when
``scale < 0``, where ``tau = mean - beta * sqrt(var + eps) / gamma``. The
analytic ``tau`` is only a starting point: the thresholds used for deployment
are snapped to the exact boundary of the float32 reference expression, so
the folded comparison agrees with ``sign(BN(x))`` on every input including
values sitting on the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GEQ = 1
LEQ = -1
CONST = 0


@dataclass(frozen=True)
class ThresholdParams:
    """Analytic fold. ``direction`` is GEQ/LEQ/CONST; ``constant`` is the CONST output."""

    tau: np.ndarray
    direction: np.ndarray
    constant: np.ndarray


def fold_bn_sign(gamma, beta, mean, var, eps: float = 1e-3) -> ThresholdParams:
    gamma, beta, mean, var = (np.atleast_1d(np.asarray(v, dtype=np.float64))
                              for v in (gamma, beta, mean, var))
    if np.any(var < 0):
        raise ValueError("batch-norm variance must be non-negative")
    std = np.sqrt(var + eps)
    direction = np.sign(gamma).astype(np.int8)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(gamma != 0, mean - beta * std / np.where(gamma != 0, gamma, 1.0), 0.0)
    return ThresholdParams(tau, direction, beta >= 0)


@dataclass(frozen=True)
class Thresholds:
    """Deployment thresholds for one channel vector.

    ``values`` are int64 for integer inputs and float32 for real inputs.
    Output bit is ``x >= values`` (GEQ), ``x <= values`` (LEQ) or ``constant`` (CONST).
    """

    values: np.ndarray
    direction: np.ndarray
    constant: np.ndarray

    @property
    def integer(self) -> bool:
        return self.values.dtype.kind == "i"

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Binarize ``x`` (channel-last) to booleans (True = +1)."""
        geq = x >= self.values
        leq = x <= self.values
        return np.where(self.direction == GEQ, geq,
                        np.where(self.direction == LEQ, leq, self.constant))

    @classmethod
    def sign(cls, channels: int, integer: bool) -> "Thresholds":
        dtype = np.int64 if integer else np.float32
        return cls(np.zeros(channels, dtype), np.full(channels, GEQ, np.int8),
                   np.zeros(channels, bool))


def reference_bits(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """``sign(x * scale + shift) == +1`` evaluated in float32, as the reference path does."""
    y = np.asarray(x, dtype=np.float32) * scale.astype(np.float32) + shift.astype(np.float32)
    return y >= 0


def _direction(scale, shift):
    direction = np.where(scale > 0, GEQ, np.where(scale < 0, LEQ, CONST)).astype(np.int8)
    return direction, (shift >= 0)


def integer_thresholds(scale, shift, lo: int, hi: int) -> Thresholds:
    """Exact integer thresholds for integer inputs in ``[lo, hi]``."""
    scale = np.asarray(scale, np.float32)
    shift = np.asarray(shift, np.float32)
    direction, constant = _direction(scale, shift)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tau = np.where(scale != 0, -shift.astype(np.float64) / np.where(scale != 0, scale, 1), 0.0)
    tau = np.clip(np.nan_to_num(tau, nan=0.0), lo - 2, hi + 2)

    def pred(t):
        return reference_bits(t.astype(np.float32), scale, shift)

    geq = direction == GEQ
    leq = direction == LEQ
    t = np.where(geq, np.ceil(tau), np.floor(tau)).astype(np.int64)
    t = np.where(geq, np.clip(t, lo, hi + 1), np.clip(t, lo - 1, hi))
    # walk onto the exact float32 boundary; a couple of steps at most
    while True:
        down = geq & (t > lo) & pred(t - 1)
        up = geq & (t <= hi) & ~pred(t)
        up_l = leq & (t < hi) & pred(t + 1)
        down_l = leq & (t >= lo) & ~pred(t)
        if not (down.any() or up.any() or up_l.any() or down_l.any()):
            break
        t = t - down + up + up_l - down_l
    t = np.where(direction == CONST, 0, t)
    return Thresholds(t, direction, constant)


def _key(x: np.ndarray) -> np.ndarray:
    """Order-preserving map float32 -> int64 (via the IEEE bit pattern)."""
    b = np.asarray(x, np.float32).view(np.int32).astype(np.int64)
    return np.where(b < 0, -(b & 0x7FFFFFFF) - 1, b)


def _unkey(k: np.ndarray) -> np.ndarray:
    b = np.where(k < 0, (-(k + 1)) | np.int64(-0x80000000), k)
    return b.astype(np.int32).view(np.float32)


def float_thresholds(scale, shift) -> Thresholds:
    """Exact float32 thresholds for arbitrary finite float32 inputs."""
    scale = np.asarray(scale, np.float32)
    shift = np.asarray(shift, np.float32)
    direction, constant = _direction(scale, shift)
    lo = np.full(scale.shape, _key(np.float32(-np.inf)), np.int64)
    hi = np.full(scale.shape, _key(np.float32(np.inf)), np.int64)
    geq = direction == GEQ
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(40):
            active = lo < hi
            if not active.any():
                break
            mid = np.where(geq, (lo + hi) // 2, (lo + hi + 1) // 2)
            ok = reference_bits(_unkey(mid), scale, shift)
            # GEQ: smallest key with a +1 output; LEQ: largest key with a +1 output
            lo = np.where(active & geq & ~ok, mid + 1, np.where(active & ~geq & ok, mid, lo))
            hi = np.where(active & geq & ok, mid, np.where(active & ~geq & ~ok, mid - 1, hi))
    values = np.where(direction == CONST, np.float32(0), _unkey(lo)).astype(np.float32)
    return Thresholds(values, direction, constant)
