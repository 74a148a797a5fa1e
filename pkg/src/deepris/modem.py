"""Gray-labelled square QAM mapping.

Only 4-QAM is supported. The bit labels are fixed so seeded runs reproduce
bit-for-bit:

    00 -> (+1+j)/sqrt(2)    01 -> (+1-j)/sqrt(2)
    10 -> (-1+j)/sqrt(2)    11 -> (-1-j)/sqrt(2)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORTED_ORDERS = (4,)


class ModemError(ValueError):
    """Raised for unsupported constellations or malformed bit blocks."""


@dataclass(frozen=True)
class Constellation:
    """Unit-average-energy constellation with Gray bit labels.

    Attributes:
        scheme: Modulation order (number of points).
        points: Complex points, indexed by the integer value of their label.
        bits_per_symbol: log2(scheme).
        amplitude_bound: Largest per-axis coordinate magnitude, used as the
            output range of the neural detector.
    """

    scheme: int
    points: np.ndarray
    bits_per_symbol: int
    amplitude_bound: float

    @property
    def labels(self) -> np.ndarray:
        """Bit label of every point, shape (scheme, bits_per_symbol)."""
        idx = np.arange(self.scheme)
        shifts = np.arange(self.bits_per_symbol - 1, -1, -1)
        return ((idx[:, None] >> shifts) & 1).astype(np.int8)


def build_constellation(order: int = 4) -> Constellation:
    if order not in SUPPORTED_ORDERS:
        raise ModemError(f"unsupported modulation order {order}; only 4-QAM is implemented")
    s = 1.0 / np.sqrt(2.0)
    # index = 2*b0 + b1; b0 picks the sign of Re, b1 the sign of Im
    points = np.array([s + 1j * s, s - 1j * s, -s + 1j * s, -s - 1j * s], dtype=np.complex128)
    bound = float(np.max(np.maximum(np.abs(points.real), np.abs(points.imag))))
    return Constellation(scheme=order, points=points, bits_per_symbol=2, amplitude_bound=bound)


def modulate(bits, c: Constellation) -> np.ndarray:
    """Map a flat bit sequence onto constellation symbols.

    Raises:
        ModemError: if the number of bits is not a multiple of
            ``c.bits_per_symbol``.
    """
    bits = np.asarray(bits)
    if bits.ndim != 1:
        bits = bits.reshape(-1)
    k = c.bits_per_symbol
    if bits.size % k:
        raise ModemError(f"bit count {bits.size} is not divisible by {k}")
    weights = 1 << np.arange(k - 1, -1, -1)
    idx = bits.reshape(-1, k).astype(np.int64) @ weights
    return c.points[idx]


def nearest_index(symbols, c: Constellation) -> np.ndarray:
    """Index of the closest constellation point; ties go to the lowest index."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    d = np.abs(symbols[..., None] - c.points) ** 2
    # argmin returns the first minimum, which is the lowest index
    return np.argmin(d, axis=-1)


def demodulate_hard(symbols, c: Constellation) -> np.ndarray:
    """Nearest-point hard decision followed by label lookup, flattened to bits."""
    idx = nearest_index(symbols, c)
    return c.labels[idx.reshape(-1)].reshape(-1)


def random_bits(n_bits: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=n_bits, dtype=np.int8)
