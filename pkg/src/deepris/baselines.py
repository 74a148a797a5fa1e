"""Classical scalar-channel detectors (LS, MMSE, ML) and the CSI error model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import Beamformer, ChannelError, ChannelRealization, cascaded_row, complex_normal
from .modem import Constellation, nearest_index


@dataclass(frozen=True)
class EffectiveChannel:
    g: complex
    sigma2: float


@dataclass(frozen=True)
class CsiQuality:
    """Receiver channel knowledge; ``error_fraction`` 0 means perfect CSI."""

    error_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.error_fraction <= 1.0:
            raise ValueError(f"CSI error fraction must be in [0, 1], got {self.error_fraction}")

    @property
    def mode(self) -> str:
        return "perfect" if self.error_fraction == 0 else "imperfect"


PERFECT_CSI = CsiQuality(0.0)


def effective_channel(ch: ChannelRealization, phi, v, sigma2: float = 0.0) -> EffectiveChannel:
    v = v.v if isinstance(v, Beamformer) else np.asarray(v, dtype=np.complex128).reshape(-1)
    row = cascaded_row(ch, phi)
    if row.size != v.size:
        raise ChannelError(f"beamformer length {v.size} != {row.size} antennas")
    return EffectiveChannel(complex(np.sqrt(ch.pathloss_gain) * (row @ v)), float(sigma2))


def corrupt_csi(g, q: CsiQuality, rng: np.random.Generator):
    """Gauss-Markov estimate ``sqrt(1-rho) g + sqrt(rho) |g| e``, e ~ CN(0, 1).

    Works elementwise on arrays. With rho = 0 the input is returned unchanged
    and no random numbers are consumed.
    """
    rho = q.error_fraction
    if rho == 0:
        return g
    g = np.asarray(g, dtype=np.complex128)
    e = complex_normal(g.shape, 1.0, rng)
    return np.sqrt(1 - rho) * g + np.sqrt(rho) * np.abs(g) * e


def equalize_ls(y, g_hat):
    g_hat = np.asarray(g_hat, dtype=np.complex128)
    if np.any(g_hat == 0):
        raise ZeroDivisionError("LS equalizer needs a nonzero channel estimate")
    return np.asarray(y) / g_hat


def equalize_mmse(y, g_hat, sigma2):
    """Scalar Wiener equalizer ``conj(g) y / (|g|^2 + sigma2)``.

    A zero denominator (no channel, no noise) yields 0.
    """
    g_hat = np.asarray(g_hat, dtype=np.complex128)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise ValueError("noise variance must be non-negative")
    denom = np.abs(g_hat) ** 2 + sigma2
    num = np.conj(g_hat) * np.asarray(y)
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, num / safe, 0.0)


def detect_ls(y, g_hat, c: Constellation):
    return c.points[nearest_index(equalize_ls(y, g_hat), c)]


def detect_mmse(y, g_hat, sigma2, c: Constellation):
    return c.points[nearest_index(equalize_mmse(y, g_hat, sigma2), c)]


def detect_ml(y, g_hat, c: Constellation):
    """Exhaustive search ``argmin_s |y - g_hat s|^2`` (lowest index wins ties)."""
    y = np.asarray(y, dtype=np.complex128)
    g_hat = np.asarray(g_hat, dtype=np.complex128)
    metric = np.abs(y[..., None] - g_hat[..., None] * c.points) ** 2
    return c.points[np.argmin(metric, axis=-1)]
