"""Angular partitioning of 2-D latent codes into K overlapping sectors.

Partition indices are 1-based on every public surface (``select_submodel``,
``partition_set``); the vectorised helpers return 0-based columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def sigma_from(K, gamma, tau):
    """Decay width that makes neighbouring sectors overlap by ``gamma``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if K < 1:
        raise ValueError("K must be positive")
    return math.sqrt(-(math.pi ** 2) * (1.0 + gamma) ** 2 / (2.0 * K ** 2 * math.log(tau)))


@dataclass(frozen=True)
class PartitionConfig:
    K: int = 4
    tau: float = 0.3
    gamma: float = 0.3
    alpha_mix: float = 0.5
    epsilon_std: float = 0.05

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ValueError("alpha_mix must lie in [0, 1]")
        if self.epsilon_std < 0:
            raise ValueError("epsilon_std must be non-negative")

    @property
    def sigma(self):
        return sigma_from(self.K, self.gamma, self.tau)

    @property
    def half_width(self):
        return self.sigma * math.sqrt(-2.0 * math.log(self.tau))

    @property
    def midpoints(self):
        return midpoints(self.K)


def angle_of(zbar):
    """Angle of a 2-D code against the x-axis, in (-pi, pi].

    Follows the six-case arctan definition literally (the origin maps to 0);
    accepts one pair or an ``(N, 2)`` array.
    """
    z = np.asarray(zbar, dtype=np.float64)
    z1, z2 = z[..., 0], z[..., 1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        base = np.arctan(z2 / z1)
    theta = np.select(
        [z1 > 0, (z1 < 0) & (z2 >= 0), (z1 < 0) & (z2 < 0), z2 > 0, z2 < 0],
        [base, base + math.pi, base - math.pi, math.pi / 2, -math.pi / 2],
        default=0.0,
    )
    # arctan(tiny) - pi can round to -pi, which the exact cases never reach
    theta = np.where(theta <= -math.pi, math.pi, theta)
    return float(theta) if theta.ndim == 0 else theta


def jitter(theta, eps=0.0):
    """``(theta + eps) mod 2pi``, folded into [0, 2pi)."""
    t = np.mod(np.asarray(theta, dtype=np.float64) + eps, TWO_PI)
    # mod can round a tiny negative value up to exactly 2pi
    t = np.where(t >= TWO_PI, 0.0, t)
    return float(t) if t.ndim == 0 else t


def midpoints(K):
    if K < 2:
        raise ValueError("K must be at least 2")
    k = np.arange(1, K + 1, dtype=np.float64)
    return TWO_PI * (k - 0.5) / K


def soft_code(theta, zeta, sigma):
    """Wrapped-Gaussian affinity of each angle to each sector midpoint.

    ``theta`` of shape ``(N,)`` gives ``(N, K)``; a scalar gives ``(K,)``.
    """
    t = np.asarray(theta, dtype=np.float64)[..., None]
    zeta = np.asarray(zeta, dtype=np.float64)
    out = np.zeros(t.shape[:-1] + zeta.shape)
    for n in (-1, 0, 1):
        out += np.exp(-((zeta - t + TWO_PI * n) ** 2) / (2.0 * sigma ** 2))
    return out


def circular_distance(theta, zeta):
    d = np.abs(np.asarray(theta, dtype=np.float64)[..., None] - np.asarray(zeta))
    return np.minimum(d, TWO_PI - d)


def uncertainty_code(entropies, tau):
    """``tau`` at the lowest-entropy submodel, zero elsewhere (first index wins ties)."""
    H = np.asarray(entropies, dtype=np.float64)
    out = np.zeros_like(H)
    idx = np.argmin(H, axis=-1)
    np.put_along_axis(out, np.expand_dims(idx, -1), tau, axis=-1)
    return out


def combine(cbar, cbarbar, alpha_mix):
    cbar, cbarbar = np.asarray(cbar, dtype=np.float64), np.asarray(cbarbar, dtype=np.float64)
    if cbar.shape != cbarbar.shape:
        raise ValueError("codes must have equal length")
    return alpha_mix * cbar + (1.0 - alpha_mix) * cbarbar


def partition_mask(c, tau):
    """Boolean ``(N, K)`` membership ``c_k >= tau / 2``, never empty per row.

    Rows with no member fall back to their argmax, which only happens when
    ``alpha_mix > 1/2``.
    """
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    mask = c >= tau / 2.0
    empty = ~mask.any(axis=1)
    if empty.any():
        mask[empty, np.argmax(c[empty], axis=1)] = True
    return mask


def partition_set(c, tau):
    return {int(k) + 1 for k in np.flatnonzero(partition_mask(c, tau)[0])}


def select_submodel(cbar):
    """1-based index of the largest soft-code entry (lowest index on ties)."""
    cbar = np.asarray(cbar)
    idx = np.argmax(cbar, axis=-1) + 1
    return int(idx) if np.ndim(idx) == 0 else idx


def soft_codes_from_latent(zbar, cfg: PartitionConfig, rng=None):
    """Soft codes for 2-D latents; angle noise is drawn only when ``rng`` is given."""
    theta = angle_of(zbar)
    eps = 0.0
    if rng is not None and cfg.epsilon_std > 0:
        eps = rng.normal(0.0, cfg.epsilon_std, size=np.shape(theta))
    return soft_code(jitter(theta, eps), cfg.midpoints, cfg.sigma)
