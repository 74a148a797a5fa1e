"""RIS-assisted MISO link: fading, reflection matrices, beamforming, noise.

Conventions. ``H_s`` stores the N x M source-to-RIS matrix exactly as it
enters the received-signal product, and ``h_d`` stores the length-N
RIS-to-destination row. For a phase matrix ``Phi`` the cascaded row channel
seen by the destination is::

    g = h_d @ Phi^H @ H_s            # shape (M,)

and a user transmitting ``x`` with beamformer ``v`` is received as
``sqrt(pathloss_gain) * g @ v * x + n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FADING_KINDS = ("rayleigh", "nakagami", "identity")


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class FadingModel:
    """Small-scale fading law for every channel entry.

    ``identity`` is a deterministic all-ones channel used for toy datasets
    and hand-checkable cases.
    """

    kind: str = "rayleigh"
    m: float = 1.0
    omega: float = 1.0

    def __post_init__(self):
        if self.kind not in FADING_KINDS:
            raise ChannelError(f"unknown fading kind {self.kind!r}")
        if self.kind == "nakagami":
            if not self.m >= 0.5:
                raise ChannelError(f"Nakagami shape m must be >= 0.5, got {self.m}")
            if not self.omega > 0:
                raise ChannelError(f"Nakagami spread omega must be > 0, got {self.omega}")

    @property
    def mean_power(self) -> float:
        return self.omega if self.kind == "nakagami" else 1.0


RAYLEIGH = FadingModel("rayleigh")


@dataclass
class ChannelRealization:
    H_s: np.ndarray
    h_d: np.ndarray
    fading: FadingModel = RAYLEIGH
    pathloss_gain: float = 1.0

    def __post_init__(self):
        self.H_s = np.atleast_2d(np.asarray(self.H_s, dtype=np.complex128))
        self.h_d = np.asarray(self.h_d, dtype=np.complex128).reshape(-1)
        if self.H_s.shape[0] != self.h_d.size:
            raise ChannelError(
                f"H_s has {self.H_s.shape[0]} rows but h_d has {self.h_d.size} entries"
            )
        if not self.pathloss_gain > 0:
            raise ChannelError("pathloss_gain must be positive")

    @property
    def n_elements(self) -> int:
        return self.h_d.size

    @property
    def n_antennas(self) -> int:
        return self.H_s.shape[1]


@dataclass
class PhaseConfig:
    """Per-element reflection amplitudes and phase angles."""

    angles: np.ndarray
    amplitudes: np.ndarray | None = None

    def __post_init__(self):
        self.angles = np.mod(np.asarray(self.angles, dtype=np.float64).reshape(-1), 2 * np.pi)
        if self.amplitudes is None:
            self.amplitudes = np.ones_like(self.angles)
        else:
            self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        if self.amplitudes.shape != self.angles.shape:
            raise ChannelError("amplitudes and angles must have the same length")
        if np.any(self.amplitudes < 0) or np.any(self.amplitudes > 1):
            raise ChannelError("reflection amplitudes must lie in [0, 1]")

    @property
    def coefficients(self) -> np.ndarray:
        return self.amplitudes * np.exp(1j * self.angles)


@dataclass
class Beamformer:
    v: np.ndarray
    p_max: float = 1.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.complex128).reshape(-1)
        if np.vdot(self.v, self.v).real > self.p_max * (1 + 1e-12):
            raise ChannelError("beamformer exceeds its power budget")


@dataclass(frozen=True)
class NoiseModel:
    variance: float

    def __post_init__(self):
        if not self.variance >= 0:
            raise ChannelError("noise variance must be non-negative")

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        return complex_normal(shape, self.variance, rng)


def complex_normal(shape, variance, rng: np.random.Generator) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples; ``variance`` may broadcast."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * np.sqrt(np.asarray(variance, dtype=np.float64) / 2.0)


def sample_channel(n_rows: int, n_cols: int, model: FadingModel, rng: np.random.Generator,
                   batch: Sequence[int] = ()) -> np.ndarray:
    """Draw a matrix of i.i.d. fading coefficients.

    ``batch`` prepends leading dimensions so many realizations come out of
    one call.
    """
    if n_rows < 1 or n_cols < 1:
        raise ChannelError("channel dimensions must be positive")
    shape = (*batch, n_rows, n_cols)
    if model.kind == "rayleigh":
        return complex_normal(shape, 1.0, rng)
    if model.kind == "identity":
        return np.ones(shape, dtype=np.complex128)
    power = rng.gamma(model.m, model.omega / model.m, size=shape)
    phase = rng.uniform(0.0, 2 * np.pi, size=shape)
    return np.sqrt(power) * np.exp(1j * phase)


def draw_realization(n_elements: int, n_antennas: int, model: FadingModel,
                     rng: np.random.Generator, pathloss_gain: float = 1.0) -> ChannelRealization:
    H_s = sample_channel(n_elements, n_antennas, model, rng)
    h_d = sample_channel(1, n_elements, model, rng)[0]
    return ChannelRealization(H_s, h_d, model, pathloss_gain)


def random_phases(n_elements: int, rng: np.random.Generator) -> PhaseConfig:
    return PhaseConfig(rng.uniform(0.0, 2 * np.pi, size=n_elements))


def pathloss(d: float, unit: bool = False) -> float:
    """Large-scale power gain ``1e-2 * d**-3.75``; ``unit=True`` bypasses it."""
    if not d > 0:
        raise ChannelError(f"distance must be positive, got {d}")
    if unit:
        return 1.0
    return 1e-2 * d ** -3.75


def build_phase_matrix(cfg: PhaseConfig) -> np.ndarray:
    return np.diag(cfg.coefficients)


def _phase_coefficients(phi) -> np.ndarray:
    if isinstance(phi, PhaseConfig):
        return phi.coefficients
    phi = np.asarray(phi)
    return np.diag(phi) if phi.ndim == 2 else phi


def cascaded_row(ch: ChannelRealization, phi) -> np.ndarray:
    """Row channel ``h_d Phi^H H_s`` (without pathloss); ``phi`` may be a
    PhaseConfig, the diagonal matrix, or its diagonal."""
    coeffs = _phase_coefficients(phi)
    if coeffs.size != ch.n_elements:
        raise ChannelError(f"phase config has {coeffs.size} elements, channel has {ch.n_elements}")
    return (ch.h_d * np.conj(coeffs)) @ ch.H_s


def cophase(ch: ChannelRealization, v: Beamformer | np.ndarray) -> PhaseConfig:
    """Unit-amplitude phases that align every element's contribution at zero phase."""
    v = v.v if isinstance(v, Beamformer) else np.asarray(v, dtype=np.complex128).reshape(-1)
    per_element = ch.h_d * (ch.H_s @ v)
    return PhaseConfig(np.angle(per_element))


def gain_moments(n_elements: int) -> tuple[float, float]:
    """Mean and variance of the co-phased cascaded magnitude sum over N
    Rayleigh element pairs."""
    if n_elements < 1:
        raise ChannelError("need at least one reflecting element")
    return n_elements * math.pi / 4, n_elements * (1 - math.pi ** 2 / 16)


def mrt_beamformer(ch: ChannelRealization, phi, p_max: float = 1.0) -> Beamformer:
    g = cascaded_row(ch, phi)
    norm = np.linalg.norm(g)
    if norm == 0:
        raise ChannelError("effective channel is zero; MRT undefined")
    return Beamformer(np.sqrt(p_max) * np.conj(g) / norm, p_max)


def optimize_link(ch: ChannelRealization, p_max: float = 1.0) -> tuple[PhaseConfig, Beamformer]:
    """Closed-form single-user phase/beam design.

    Uniform beam, co-phase, MRT, co-phase once more. For M = 1 the first
    co-phasing is already optimal.
    """
    M = ch.n_antennas
    v0 = np.full(M, np.sqrt(p_max / M), dtype=np.complex128)
    phases = cophase(ch, v0)
    beam = mrt_beamformer(ch, phases, p_max)
    phases = cophase(ch, beam)
    return phases, mrt_beamformer(ch, phases, p_max)


def _stack_beams(beamformers) -> np.ndarray:
    if isinstance(beamformers, Beamformer):
        beamformers = [beamformers]
    V = np.stack([b.v if isinstance(b, Beamformer) else np.asarray(b, dtype=np.complex128).reshape(-1)
                  for b in beamformers], axis=1)
    return V  # (M, U)


def transmit(ch: ChannelRealization, phi, beamformers, x, noise: NoiseModel,
             rng: np.random.Generator) -> np.ndarray:
    """Received samples for one destination.

    Args:
        beamformers: one Beamformer (or vector) per user.
        x: symbols, shape (U,) for a single channel use or (U, L) for L uses.

    Returns:
        y of shape () or (L,), matching the trailing shape of ``x``.
    """
    V = _stack_beams(beamformers)
    if V.shape[0] != ch.n_antennas:
        raise ChannelError(f"beamformer length {V.shape[0]} != {ch.n_antennas} antennas")
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[0] != V.shape[1]:
        raise ChannelError(f"{V.shape[1]} beamformers but {x.shape[0]} user streams")
    g = cascaded_row(ch, phi)
    signal = np.sqrt(ch.pathloss_gain) * np.tensordot(g @ V, x, axes=(0, 0))
    return signal + noise.sample(signal.shape, rng)


def received_snr(ch: ChannelRealization, phi, beamformers, u: int, sigma2: float) -> float:
    """SINR of user ``u`` when every user's stream shares the channel ``ch``."""
    V = _stack_beams(beamformers)
    if sigma2 <= 0 and V.shape[1] == 1:
        raise ChannelError("noise variance must be positive for a single user")
    g = cascaded_row(ch, phi)
    powers = ch.pathloss_gain * np.abs(g @ V) ** 2
    interference = powers.sum() - powers[u]
    return float(powers[u] / (interference + sigma2))


# ---------------------------------------------------------------------------
# Vectorized frame simulation (shared by dataset synthesis and BER runs)
# ---------------------------------------------------------------------------

PHASE_MODES = ("random", "optimized")


@dataclass(frozen=True)
class LinkConfig:
    """Physical-layer parameters for simulated coherence frames.

    With ``normalize_array_gain`` the cascaded channel is scaled by
    ``1/sqrt(N*M)`` so the mean received power no longer grows with the
    array sizes. The SNR axis is the average received SNR of the
    random-phase MRT link before pathloss: the noise variance is that mean
    received power divided by ``10**(snr_db/10)``.
    """

    n_elements: int = 64
    n_antennas: int = 32
    frame_length: int = 16
    fading: FadingModel = field(default_factory=FadingModel)
    p_max: float = 1.0
    pathloss_gain: float = 1.0
    phase_mode: str = "random"
    normalize_array_gain: bool = True

    def __post_init__(self):
        if self.n_elements < 1 or self.n_antennas < 1 or self.frame_length < 1:
            raise ChannelError("N, M and frame length must be >= 1")
        if self.phase_mode not in PHASE_MODES:
            raise ChannelError(f"unknown phase mode {self.phase_mode!r}")
        if not self.p_max > 0 or not self.pathloss_gain > 0:
            raise ChannelError("p_max and pathloss_gain must be positive")

    @property
    def array_scale(self) -> float:
        """Power scale applied to the cascaded channel."""
        if self.normalize_array_gain:
            return 1.0 / (self.n_elements * self.n_antennas)
        return 1.0

    @property
    def reference_power(self) -> float:
        n_paths = self.n_elements * self.n_antennas
        return self.p_max * n_paths * self.array_scale * self.fading.mean_power ** 2

    def noise_variance(self, snr_db) -> np.ndarray:
        snr = 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0)
        with np.errstate(divide="ignore"):
            return self.reference_power / snr


@dataclass
class FrameBatch:
    """F simulated frames of L symbols each."""

    bits: np.ndarray  # (F, L * bits_per_symbol)
    x: np.ndarray  # (F, L)
    y: np.ndarray  # (F, L)
    g: np.ndarray  # (F,) effective scalar channel incl. pathloss
    sigma2: np.ndarray  # (F,)

    def __len__(self):
        return self.x.shape[0]


@dataclass
class FrameChannels:
    """Per-frame channel draws, RIS angles and MRT beams."""

    H_s: np.ndarray  # (F, N, M)
    h_d: np.ndarray  # (F, N)
    theta: np.ndarray  # (F, N)
    v: np.ndarray  # (F, M)
    g: np.ndarray  # (F,)

    def realization(self, i: int, link: LinkConfig) -> ChannelRealization:
        return ChannelRealization(self.H_s[i], self.h_d[i], link.fading,
                                  link.pathloss_gain * link.array_scale)


def _mrt_rows(h_d, theta, H_s, p_max):
    row = np.einsum("fn,fnm->fm", h_d * np.exp(-1j * theta), H_s)
    norm = np.linalg.norm(row, axis=1, keepdims=True)
    v = np.sqrt(p_max) * np.conj(row) / np.where(norm > 0, norm, 1.0)
    return row, v


def draw_frame_channels(n_frames: int, link: LinkConfig, rng: np.random.Generator) -> FrameChannels:
    """Fresh fading, RIS angles and beams for each frame.

    ``random`` phase mode draws uniform angles (the receiver cannot know
    them); ``optimized`` applies :func:`optimize_link` per frame.
    """
    F, N, M = n_frames, link.n_elements, link.n_antennas
    H_s = sample_channel(N, M, link.fading, rng, batch=(F,))
    h_d = sample_channel(1, N, link.fading, rng, batch=(F,))[:, 0, :]
    if link.phase_mode == "random":
        theta = rng.uniform(0.0, 2 * np.pi, size=(F, N))
        row, v = _mrt_rows(h_d, theta, H_s, link.p_max)
    else:
        v0 = np.full(M, np.sqrt(link.p_max / M))
        theta = np.angle(h_d * (H_s @ v0))
        _, v = _mrt_rows(h_d, theta, H_s, link.p_max)
        theta = np.angle(h_d * np.einsum("fnm,fm->fn", H_s, v))
        row, v = _mrt_rows(h_d, theta, H_s, link.p_max)
    g = np.sqrt(link.pathloss_gain * link.array_scale) * np.sum(row * v, axis=1)
    return FrameChannels(H_s, h_d, np.mod(theta, 2 * np.pi), v, g)


def simulate_frames(n_frames: int, link: LinkConfig, snr_db, constellation,
                    rng: np.random.Generator) -> FrameBatch:
    """Fresh channels and RIS phases per frame, held for its L symbols.

    ``snr_db`` is a scalar or one value per frame; ``inf`` gives a noiseless
    link.
    """
    from .modem import modulate, random_bits

    F, L = n_frames, link.frame_length
    bits = random_bits(F * L * constellation.bits_per_symbol, rng).reshape(F, -1)
    x = modulate(bits.reshape(-1), constellation).reshape(F, L)
    chans = draw_frame_channels(F, link, rng)
    sigma2 = np.broadcast_to(link.noise_variance(snr_db), (F,)).astype(np.float64)
    noise = complex_normal((F, L), sigma2[:, None], rng)
    y = chans.g[:, None] * x + noise
    return FrameBatch(bits=bits, x=x, y=y, g=chans.g, sigma2=sigma2)
