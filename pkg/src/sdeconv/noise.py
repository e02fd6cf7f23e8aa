"""Seeded, refinable Brownian increments and iterated stochastic integrals.

Every sample owns a counter-based Philox stream keyed by ``(seed, sample_id)``,
so a sample's increments never depend on which worker draws them or in which
order samples are visited.

Coarse increments are built from fine ones by a fixed hierarchical summation:
the refinement ratio is factored into primes (ascending) and each factor is
folded left to right.  For dyadic ratios this is a balanced binary tree, so
aggregating by 2 twice is bitwise identical to aggregating by 4, and the
whole-horizon total is the same whichever dyadic grid it is summed on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

_U64 = 1 << 64


@dataclass(frozen=True)
class RngStreamKey:
    seed: int
    sample_id: int

    def __post_init__(self):
        for name in ("seed", "sample_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < _U64):
                raise ArgumentError(f"{name}={v} is not a 64-bit unsigned integer")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=np.array([self.seed, self.sample_id],
                                                                 dtype=np.uint64)))


@dataclass(frozen=True)
class BrownianFabric:
    """Fine-grid Brownian increments of one sample, shape ``(fine_steps, noise_dim)``."""

    key: RngStreamKey
    fine_steps: int
    noise_dim: int
    t_end: float
    increments: np.ndarray

    @property
    def h_fine(self) -> float:
        return self.t_end / self.fine_steps

    def coarse(self, ratio: int) -> np.ndarray:
        return aggregate_increments(self.increments, ratio)

    def path(self) -> np.ndarray:
        """Brownian values at the fine nodes, starting from 0."""
        w = np.zeros((self.fine_steps + 1, self.noise_dim))
        np.cumsum(self.increments, axis=0, out=w[1:])
        return w


def sample_fine_increments(key: RngStreamKey, n_fine: int, m: int, t_end: float) -> BrownianFabric:
    """Draw ``n_fine x m`` i.i.d. ``N(0, t_end/n_fine)`` increments for ``key``."""
    if n_fine < 1 or m < 1:
        raise ArgumentError("n_fine and m must be at least 1")
    if not t_end > 0:
        raise ArgumentError("t_end must be positive")
    z = key.generator().standard_normal((n_fine, m))
    inc = z * np.sqrt(t_end / n_fine)
    inc.flags.writeable = False
    return BrownianFabric(key, n_fine, m, float(t_end), inc)


def sample_block(seed: int, sample_ids, n_fine: int, m: int, t_end: float) -> np.ndarray:
    """Fine increments for several samples, shape ``(len(sample_ids), n_fine, m)``.

    Row ``i`` is exactly ``sample_fine_increments(RngStreamKey(seed, sample_ids[i]), ...)``.
    """
    ids = list(sample_ids)
    out = np.empty((len(ids), n_fine, m))
    for i, sid in enumerate(ids):
        out[i] = sample_fine_increments(RngStreamKey(seed, sid), n_fine, m, t_end).increments
    return out


def _prime_factors(n: int) -> list[int]:
    out = []
    p = 2
    while p * p <= n:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    if n > 1:
        out.append(n)
    return out


def aggregate_increments(increments, ratio: int, axis: int = -2) -> np.ndarray:
    """Sum consecutive groups of ``ratio`` fine increments into coarse ones.

    ``increments`` is a :class:`BrownianFabric` or an array whose time axis is
    ``axis`` (by default the second to last, so both ``(N, m)`` and
    ``(samples, N, m)`` layouts work).
    """
    if isinstance(increments, BrownianFabric):
        increments = increments.increments
    x = np.asarray(increments, dtype=float)
    ratio = int(ratio)
    n = x.shape[axis]
    if ratio < 1 or n % ratio != 0:
        raise ArgumentError(f"ratio {ratio} does not divide {n} fine steps")
    x = np.moveaxis(x, axis, 0)
    for p in _prime_factors(ratio):
        groups = x.reshape((x.shape[0] // p, p) + x.shape[1:])
        acc = groups[:, 0]
        for k in range(1, p):
            acc = acc + groups[:, k]
        x = acc
    return np.moveaxis(np.array(x, copy=True), 0, axis)


def iterated_integrals_commutative(dW, h: float) -> np.ndarray:
    """Iterated integrals sufficient for commutative noise.

    Diagonal ``(dW_j**2 - h)/2``; off-diagonal ``dW_j1 dW_j2 / 2``.  Only the
    symmetric combination ``I[j1,j2] + I[j2,j1] = dW_j1 dW_j2`` is exact, which
    is all a commutative model consumes.  Accepts a single ``m``-vector or a
    batch ``(..., m)``.
    """
    dW = np.asarray(dW, dtype=float)
    out = 0.5 * dW[..., :, None] * dW[..., None, :]
    m = dW.shape[-1]
    idx = np.arange(m)
    out[..., idx, idx] = 0.5 * (dW * dW - h)
    return out


def iterated_integrals_subsampled(sub_increments) -> np.ndarray:
    """Riemann-Stieltjes approximation of ``I[j1,j2]`` from a finer path.

    ``sub_increments`` has shape ``(k, m)`` with ``k >= 2``: the fine Brownian
    increments inside one coarse step.  Returns
    ``sum_k (W^{j1}_{s_k} - W^{j1}_{t_n}) dW^{j2}_k``.
    """
    d = np.asarray(sub_increments, dtype=float)
    if d.ndim != 2 or d.shape[0] < 2:
        raise ArgumentError("need at least 2 sub-increments of shape (k, m)")
    before = np.zeros_like(d)
    np.cumsum(d[:-1], axis=0, out=before[1:])
    return before.T @ d
