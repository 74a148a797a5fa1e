"""Training data synthesis, mean-centering, the training loop and checkpoints.

Complex frames are fed to the network as interleaved real pairs
``[Re y0, Im y0, Re y1, Im y1, ...]``; targets use the same layout for the
transmitted symbols.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .channel import FadingModel, LinkConfig, simulate_frames
from .fileio import canonical_json, digest, write_atomic
from .modem import build_constellation
from .neural import (DEFAULT_HIDDEN, AdamState, MlpParams, TrainMode, adam_step, backward,
                     forward, init_mlp, loss)

log = logging.getLogger(__name__)

GEN_CHUNK = 4096


class TrainingError(ValueError):
    pass


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or mismatched checkpoint files."""


def interleave(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype=np.float64)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def deinterleave(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return r[..., 0::2] + 1j * r[..., 1::2]


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    link: LinkConfig = field(default_factory=LinkConfig)
    snr_range_db: tuple[float, float] = (0.0, 30.0)
    modulation_order: int = 4

    def __post_init__(self):
        lo, hi = self.snr_range_db
        if not lo <= hi:
            raise TrainingError(f"SNR range {self.snr_range_db} is not ordered")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range_db"] = [_json_float(v) for v in self.snr_range_db]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        link = dict(d["link"])
        link["fading"] = FadingModel(**link["fading"])
        lo, hi = (float(v) for v in d["snr_range_db"])
        return cls(LinkConfig(**link), (lo, hi), int(d["modulation_order"]))


def _json_float(v: float):
    return v if math.isfinite(v) else repr(float(v))


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    metadata: dict

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise TrainingError("inputs and targets must have the same number of rows")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def frame_length(self) -> int:
        return self.inputs.shape[1] // 2


def _draw_snr(n: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    if lo == hi:
        return np.full(n, lo)
    return rng.uniform(lo, hi, size=n)


def generate_dataset(sim: DatasetConfig, size: int, rng: np.random.Generator) -> Dataset:
    """Simulate ``size`` frames with fresh channels, random RIS phases and a
    uniformly drawn SNR per frame."""
    if size < 1:
        raise TrainingError("dataset size must be >= 1")
    c = build_constellation(sim.modulation_order)
    lo, hi = sim.snr_range_db
    inputs, targets = [], []
    for start in range(0, size, GEN_CHUNK):
        n = min(GEN_CHUNK, size - start)
        snr = _draw_snr(n, lo, hi, rng)
        batch = simulate_frames(n, sim.link, snr, c, rng)
        inputs.append(interleave(batch.y))
        targets.append(interleave(batch.x))
    meta = sim.to_dict()
    meta["size"] = size
    return Dataset(np.concatenate(inputs), np.concatenate(targets), meta)


@dataclass
class NormStats:
    means: np.ndarray

    def apply(self, inputs) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape[-1] != self.means.size:
            raise TrainingError(f"feature width {inputs.shape[-1]} != {self.means.size}")
        return inputs - self.means


def normalize(d: Dataset) -> tuple[Dataset, NormStats]:
    if len(d) == 0:
        raise TrainingError("cannot normalize an empty dataset")
    stats = NormStats(d.inputs.mean(axis=0))
    return Dataset(stats.apply(d.inputs), d.targets, dict(d.metadata)), stats


_DATA_MAGIC = b"DEEPRISD"


def save_dataset(path, d: Dataset) -> None:
    meta = canonical_json(d.metadata).encode("utf-8")
    rows, width = d.inputs.shape
    head = _DATA_MAGIC + struct.pack("<IIII", 1, rows, width, len(meta)) + meta
    body = d.inputs.astype("<f8").tobytes() + d.targets.astype("<f8").tobytes()
    write_atomic(path, head + body)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _DATA_MAGIC or len(raw) < 24:
        raise CheckpointError(f"{path} is not a dataset file")
    _, rows, width, mlen = struct.unpack_from("<IIII", raw, 8)
    off = 24 + mlen
    need = off + 2 * rows * width * 8
    if len(raw) != need:
        raise CheckpointError(f"dataset file length {len(raw)} != expected {need}")
    meta = json.loads(raw[24:off].decode("utf-8"))
    arr = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    half = rows * width
    return Dataset(arr[:half].reshape(rows, width), arr[half:].reshape(rows, width), meta)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 1000
    lr: float = 0.01
    lam: float = 1e-4
    p_drop: float = 0.5
    val_fraction: float = 0.2
    patience: int = 50
    tol: float = 1e-5
    delta1: float = 0.9
    delta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = False
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    activation: str = "tanh"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise TrainingError("batch_size, max_epochs and patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise TrainingError("val_fraction must be in (0, 1)")
        if self.lr < 0 or self.lam < 0 or self.tol < 0:
            raise TrainingError("lr, lam and tol must be non-negative")
        if not 0 <= self.p_drop < 1:
            raise TrainingError("p_drop must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: float = 0.0
    stop_reason: str = ""
    best_epoch: int = -1
    zero_output_loss: float = math.nan
    train_index: Optional[np.ndarray] = field(default=None, repr=False)
    val_index: Optional[np.ndarray] = field(default=None, repr=False)
    shuffle_digests: list[str] = field(default_factory=list, repr=False)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    @property
    def status(self) -> str:
        """``diverged`` on a non-finite loss; ``stalled`` when no epoch after the
        first improved on it or the best model never beat a constant zero
        output; else ``ok``."""
        if self.stop_reason == "diverged" or not all(map(math.isfinite, self.val_loss)):
            return "diverged"
        if self.best_epoch <= 0 or not self.best_val_loss < self.zero_output_loss:
            return "stalled"
        return "ok"


def _batch_loss(p, x, t, lam, mode=None, chunk=8192) -> float:
    """Dataset-mean loss computed in chunks (dropout off unless ``mode``)."""
    total = 0.0
    for s in range(0, x.shape[0], chunk):
        out, _ = forward(p, x[s:s + chunk], mode)
        d = out - t[s:s + chunk]
        total += float(np.sum(d * d))
    return total / x.shape[0] + lam * p.weight_sq_sum()


def train(d: Dataset, cfg: TrainConfig, rng: np.random.Generator, progress=None):
    """Fit the detector with mini-batch Adam and validation early stopping.

    The last ``val_fraction`` of one seeded shuffle is held out. Training rows
    are reshuffled every epoch. Training stops once the validation loss has
    failed to improve on its reference value by more than ``cfg.tol`` for
    ``cfg.patience`` consecutive epochs, or after ``cfg.max_epochs``. The
    returned parameters are those with the lowest validation loss seen.

    Returns:
        (best params, normalization stats, history)
    """
    n = len(d)
    n_val = int(round(n * cfg.val_fraction))
    n_train = n - n_val
    if n_val < 1 or n_train < cfg.batch_size:
        raise TrainingError(
            f"{n} samples leave {n_train} for training; need at least one batch of {cfg.batch_size}"
        )
    order = rng.permutation(n)
    train_idx, val_idx = order[:n_train], order[n_train:]
    stats = NormStats(d.inputs[train_idx].mean(axis=0))
    x_tr, t_tr = stats.apply(d.inputs[train_idx]), d.targets[train_idx]
    x_va, t_va = stats.apply(d.inputs[val_idx]), d.targets[val_idx]

    order_ = int(d.metadata.get("modulation_order", 4))
    z = build_constellation(order_).amplitude_bound
    width = d.inputs.shape[1]
    params = init_mlp([width, *cfg.hidden, d.targets.shape[1]], rng, z, cfg.activation)
    state = AdamState.zeros_like(params, lr=cfg.lr, delta1=cfg.delta1, delta2=cfg.delta2,
                                 eps=cfg.eps, bias_correction=cfg.bias_correction)
    mode = TrainMode(cfg.p_drop, rng)

    hist = TrainHistory(lr=cfg.lr, train_index=train_idx, val_index=val_idx,
                        zero_output_loss=float(np.mean(np.sum(t_va * t_va, axis=1))))
    # ``ref`` is the patience reference; the snapshot tracks the true minimum
    ref, waited = math.inf, 0
    best_params = params.copy()
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n_train)
        hist.shuffle_digests.append(hashlib.sha1(perm.tobytes()).hexdigest())
        running = 0.0
        for s in range(0, n_train, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            out, cache = forward(params, x_tr[idx], mode)
            lv = loss(out, t_tr[idx], params, cfg.lam)
            running += lv.mse_part * len(idx)
            grads = backward(params, cache, t_tr[idx], cfg.lam)
            adam_step(params, grads, state)
        hist.train_loss.append(running / n_train + cfg.lam * params.weight_sq_sum())
        val = _batch_loss(params, x_va, t_va, cfg.lam)
        hist.val_loss.append(val)
        if not math.isfinite(val):
            hist.stop_reason = "diverged"
            break
        if hist.best_epoch < 0 or val < hist.best_val_loss:
            best_params = params.copy()
            hist.best_epoch = epoch
        if val < ref - cfg.tol:
            ref, waited = val, 0
        else:
            waited += 1
        if progress is not None:
            progress(epoch, hist.train_loss[-1], val)
        log.debug("epoch %d train %.6g val %.6g", epoch, hist.train_loss[-1], val)
        if waited >= cfg.patience:
            hist.stop_reason = "patience"
            break
    else:
        hist.stop_reason = "max_epochs"
    return best_params, stats, hist


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DEEPRIS\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: MlpParams
    norm: NormStats
    modulation_order: int
    frame_length: int
    train_config: dict = field(default_factory=dict)
    generation_config: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @property
    def generation_digest(self) -> bytes:
        return bytes.fromhex(digest(self.generation_config))


def save_checkpoint(path, c: Checkpoint) -> None:
    """Serialize to the little-endian layout described in the README."""
    p = c.params
    meta = canonical_json({"activation": p.activation, "train_config": c.train_config,
                           "generation_config": c.generation_config}).encode("utf-8")
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<II", c.format_version, len(p.layer_dims)),
             struct.pack(f"<{len(p.layer_dims)}I", *p.layer_dims),
             struct.pack("<dII", p.output_scale, c.frame_length, c.modulation_order),
             c.generation_digest,
             struct.pack("<I", len(meta)), meta]
    for W, b in zip(p.weights, p.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(c.norm.means, dtype="<f8").tobytes())
    body = b"".join(parts)
    write_atomic(path, body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, checksum = raw[:-32], raw[-32:]
    version, n_dims = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        off = 16
        dims = list(struct.unpack_from(f"<{n_dims}I", raw, off))
        off += 4 * n_dims
        z, L, order = struct.unpack_from("<dII", raw, off)
        off += 16
        gen_digest = raw[off:off + 32]
        off += 32
        (mlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        meta_raw = raw[off:off + mlen]
        off += mlen
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    n_floats = sum(o * i + o for i, o in zip(dims[:-1], dims[1:])) + dims[0]
    expected = off + 8 * n_floats + 32
    if len(raw) != expected:
        raise CheckpointError(f"{path}: length {len(raw)} != expected {expected} (corrupted)")
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted)")
    meta = json.loads(meta_raw.decode("utf-8"))
    if dims[0] != 2 * L or dims[-1] != 2 * L:
        raise CheckpointError(f"{path}: layer dims {dims} inconsistent with frame length {L}")
    floats = np.frombuffer(raw, dtype="<f8", count=n_floats, offset=off).astype(np.float64)
    weights, biases, pos = [], [], 0
    for i, o in zip(dims[:-1], dims[1:]):
        weights.append(floats[pos:pos + o * i].reshape(o, i).copy())
        pos += o * i
        biases.append(floats[pos:pos + o].copy())
        pos += o
    means = floats[pos:pos + dims[0]].copy()
    params = MlpParams(dims, weights, biases, z, meta.get("activation", "tanh"))
    ckpt = Checkpoint(params, NormStats(means), order, L, meta.get("train_config", {}),
                      meta.get("generation_config", {}), version)
    if ckpt.generation_digest != gen_digest:
        raise CheckpointError(f"{path}: generation config digest mismatch")
    return ckpt
