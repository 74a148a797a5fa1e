"""Monte Carlo BER measurement, the mismatch scenario suite, learning-rate
study and layer-complexity counts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .baselines import PERFECT_CSI, CsiQuality, corrupt_csi, detect_ls, detect_ml, detect_mmse
from .channel import RAYLEIGH, FadingModel, FrameBatch, LinkConfig, simulate_frames
from .modem import Constellation, build_constellation, demodulate_hard
from .neural import forward
from .training import (Checkpoint, Dataset, TrainConfig, TrainHistory, deinterleave, interleave,
                       train)

CHUNK_BITS = 32768
DETECTORS = ("deepris", "ls", "mmse", "ml")
Z95 = 1.959963984540054


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class StopRule:
    """Stop an SNR point once both minimums are met, or at the bit cap."""

    min_bits: int = 100_000
    min_errors: int = 100
    max_bits: int = 10_000_000

    def done(self, bits: int, errors: int) -> bool:
        return bits >= self.max_bits or (bits >= self.min_bits and errors >= self.min_errors)


@dataclass(frozen=True)
class Scenario:
    label: str
    csi: CsiQuality = PERFECT_CSI
    fading: FadingModel = RAYLEIGH
    n_elements: int = 16
    n_antennas: int = 4
    frame_length: int = 16
    snr_grid_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    detectors: tuple[str, ...] = DETECTORS
    p_max: float = 1.0
    pathloss_gain: float = 1.0
    modulation_order: int = 4
    normalize_array_gain: bool = True

    def __post_init__(self):
        grid = tuple(float(s) for s in self.snr_grid_db)
        object.__setattr__(self, "snr_grid_db", grid)
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise EvalError(f"{self.label}: SNR grid must be strictly increasing")
        if self.n_elements < 1 or self.n_antennas < 1:
            raise EvalError(f"{self.label}: N and M must be >= 1")

    def link(self) -> LinkConfig:
        return LinkConfig(self.n_elements, self.n_antennas, self.frame_length, self.fading,
                          self.p_max, self.pathloss_gain,
                          normalize_array_gain=self.normalize_array_gain)


@dataclass(frozen=True)
class BerPoint:
    snr_db: float
    errors: int
    bits: int

    @property
    def ber(self) -> float:
        return self.errors / self.bits

    @property
    def ci95(self) -> float:
        """Normal-approximation binomial half-width."""
        p = self.ber
        return Z95 * math.sqrt(p * (1 - p) / self.bits)

    @property
    def interval(self) -> tuple[float, float]:
        return self.ber - self.ci95, self.ber + self.ci95


@dataclass
class BerCurve:
    detector: str
    scenario: str
    seed: int
    points: list[BerPoint] = field(default_factory=list)

    def at(self, snr_db: float) -> BerPoint:
        for pt in self.points:
            if pt.snr_db == snr_db:
                return pt
        raise KeyError(snr_db)


# ---------------------------------------------------------------------------
# Detectors. Each maps (frames, channel estimate, constellation, rng) to
# decided or soft symbol estimates of shape (F, L); scoring demaps them.
# ---------------------------------------------------------------------------

class GenieDetector:
    name = "genie"
    needs_csi = False

    def __call__(self, batch: FrameBatch, g_hat, c, rng):
        return batch.x


class ChanceDetector:
    name = "chance"
    needs_csi = False

    def __call__(self, batch, g_hat, c, rng):
        return c.points[rng.integers(0, c.scheme, size=batch.x.shape)]


class LSDetector:
    name = "ls"
    needs_csi = True

    def __call__(self, batch, g_hat, c, rng):
        return detect_ls(batch.y, g_hat[:, None], c)


class MMSEDetector:
    name = "mmse"
    needs_csi = True

    def __call__(self, batch, g_hat, c, rng):
        return detect_mmse(batch.y, g_hat[:, None], batch.sigma2[:, None], c)


class MLDetector:
    name = "ml"
    needs_csi = True

    def __call__(self, batch, g_hat, c, rng):
        return detect_ml(batch.y, g_hat[:, None], c)


class NeuralDetector:
    """Blind detector: sees only the received frame, never the channel."""

    name = "deepris"
    needs_csi = False

    def __init__(self, checkpoint: Checkpoint, chunk: int = 4096):
        self.checkpoint = checkpoint
        self.chunk = chunk

    @property
    def frame_length(self) -> int:
        return self.checkpoint.frame_length

    def __call__(self, batch, g_hat, c, rng):
        if batch.y.shape[1] != self.frame_length:
            raise EvalError(f"checkpoint expects frames of {self.frame_length} symbols, "
                            f"scenario uses {batch.y.shape[1]}")
        feats = self.checkpoint.norm.apply(interleave(batch.y))
        outs = [forward(self.checkpoint.params, feats[s:s + self.chunk])[0]
                for s in range(0, feats.shape[0], self.chunk)]
        return deinterleave(np.concatenate(outs))


def make_detector(name: str, checkpoint: Checkpoint | None = None):
    simple = {"ls": LSDetector, "mmse": MMSEDetector, "ml": MLDetector,
              "genie": GenieDetector, "chance": ChanceDetector}
    if name in simple:
        return simple[name]()
    if name == "deepris":
        if checkpoint is None:
            raise EvalError("the neural detector requires a checkpoint")
        return NeuralDetector(checkpoint)
    raise EvalError(f"unknown detector {name!r}")


def _chunk_streams(seed: int, point: int, chunk: int):
    ss = np.random.SeedSequence(seed, spawn_key=(point, chunk))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def measure_ber(detector, sc: Scenario, stop: StopRule = StopRule(), seed: int = 0,
                constellation: Constellation | None = None) -> BerCurve:
    """Count bit errors per SNR point until ``stop`` is satisfied.

    Frames are simulated in fixed-size chunks, each from its own RNG stream
    keyed by (seed, SNR index, chunk index). Every detector measured with
    the same seed therefore sees the same frames.
    """
    c = constellation or build_constellation(sc.modulation_order)
    link = sc.link()
    frame_length = getattr(detector, "frame_length", link.frame_length)
    if frame_length != link.frame_length:
        raise EvalError(f"detector frame length {frame_length} != scenario frame length "
                        f"{link.frame_length}")
    bits_per_frame = link.frame_length * c.bits_per_symbol
    frames_per_chunk = max(1, -(-CHUNK_BITS // bits_per_frame))
    curve = BerCurve(getattr(detector, "name", type(detector).__name__), sc.label, seed)
    for i, snr in enumerate(sc.snr_grid_db):
        errors = bits = 0
        k = 0
        while not stop.done(bits, errors):
            sim_rng, csi_rng, det_rng = _chunk_streams(seed, i, k)
            batch = simulate_frames(frames_per_chunk, link, snr, c, sim_rng)
            g_hat = corrupt_csi(batch.g, sc.csi, csi_rng)
            est = detector(batch, g_hat, c, det_rng)
            decided = demodulate_hard(est, c).reshape(batch.bits.shape)
            errors += int(np.count_nonzero(decided != batch.bits))
            bits += batch.bits.size
            k += 1
        curve.points.append(BerPoint(snr, errors, bits))
    return curve


def default_scenarios(n_elements: int = 16, n_antennas: int = 4, frame_length: int = 16,
                      snr_grid_db: Sequence[float] = (0, 5, 10, 15, 20, 25, 30),
                      csi_error: float = 0.1, nakagami_m: float = 1.0,
                      nakagami_omega: float = 2.0, n_eval: Iterable[int] | None = None,
                      detectors: Sequence[str] = DETECTORS,
                      normalize_array_gain: bool = True) -> list[Scenario]:
    """The four comparison conditions: (a) perfect CSI, (b) imperfect CSI,
    (c) Nakagami channel mismatch, (d) reflecting-element count mismatch."""
    base = dict(n_antennas=n_antennas, frame_length=frame_length,
                snr_grid_db=tuple(snr_grid_db), detectors=tuple(detectors),
                normalize_array_gain=normalize_array_gain)
    out = [
        Scenario("a_perfect_csi", n_elements=n_elements, **base),
        Scenario("b_imperfect_csi", csi=CsiQuality(csi_error), n_elements=n_elements, **base),
        Scenario("c_nakagami", fading=FadingModel("nakagami", nakagami_m, nakagami_omega),
                 n_elements=n_elements, **base),
    ]
    if n_eval is None:
        n_eval = (max(1, n_elements // 2), 2 * n_elements)
    for n in n_eval:
        if n != n_elements:
            out.append(Scenario(f"d_n{n}", n_elements=n, **base))
    return out


def run_scenario_suite(checkpoint: Checkpoint | None, scenarios: Sequence[Scenario],
                       seed: int = 0, stop: StopRule = StopRule()) -> list[BerCurve]:
    curves = []
    for sc in scenarios:
        for name in sc.detectors:
            curves.append(measure_ber(make_detector(name, checkpoint), sc, stop, seed))
    return curves


# ---------------------------------------------------------------------------
# Complexity and learning-rate study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityReport:
    node_counts: tuple[int, ...]
    iterations: int
    samples: int
    inference_mults: int
    training_mults: int


def complexity_report(layer_dims: Sequence[int], k: int = 1, t: int = 1) -> ComplexityReport:
    """Multiply counts of the dense layers, excluding the input layer.

    For node counts (p, q, r, s) inference costs ``qp + rq + sr`` and
    training ``k * t * (qp + rq + sr)``.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 4:
        raise EvalError(f"need at least 4 node counts, got {len(dims)}")
    if k < 1 or t < 1:
        raise EvalError("k and t must be >= 1")
    inference = sum(a * b for a, b in zip(dims[:-1], dims[1:]))
    return ComplexityReport(dims, k, t, inference, k * t * inference)


def learning_rate_study(dataset: Dataset, etas: Sequence[float], cfg: TrainConfig,
                        seed: int = 0) -> dict[float, TrainHistory]:
    """Train one model per learning rate on identical seeded splits and inits."""
    if any(not eta > 0 for eta in etas):
        raise EvalError("learning rates must be positive")
    out = {}
    for eta in etas:
        cfg_eta = TrainConfig(**{**cfg.to_dict(), "lr": float(eta)})
        _, _, hist = train(dataset, cfg_eta, np.random.default_rng(seed))
        out[float(eta)] = hist
    return out
