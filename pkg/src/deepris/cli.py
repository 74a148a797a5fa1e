"""``deepris`` command line: generate / train / eval / sweep / complexity.

Every config key is also a flag (``--N 16``, ``--lambda 0.001``). Exit codes:
0 success, 2 config error, 3 I/O error, 4 numeric or validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import CsiQuality
from .channel import ChannelError, FadingModel, LinkConfig
from .config import ConfigError, RunConfig, load_config
from .evaluation import (DETECTORS, BerCurve, EvalError, Scenario, StopRule, complexity_report,
                         default_scenarios, learning_rate_study, run_scenario_suite)
from .fileio import write_atomic
from .modem import ModemError, build_constellation
from .training import (Checkpoint, CheckpointError, DatasetConfig, TrainConfig, TrainingError,
                       generate_dataset, load_checkpoint, load_dataset, save_checkpoint,
                       save_dataset, train)

log = logging.getLogger("deepris")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

CSV_HEADER = ["scenario", "detector", "snr_db", "bits", "errors", "ber", "ci95", "seed"]

# stream ids mixed with the master seed
STREAM_GENERATE, STREAM_TRAIN = 1, 2


def fmt(x: float) -> str:
    """Shortest round-trip decimal, never in exponent notation."""
    return np.format_float_positional(float(x), unique=True, trim="-")


def write_csv(curves, path, comments=()) -> None:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for curve in curves:
        for pt in curve.points:
            w.writerow([curve.scenario, curve.detector, fmt(pt.snr_db), pt.bits, pt.errors,
                        fmt(pt.ber), fmt(pt.ci95), curve.seed])
    write_atomic(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_history_csv(histories: dict, path, comments=()) -> None:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["learning_rate", "epoch", "train_loss", "val_loss", "stop_reason", "status"])
    for eta, h in histories.items():
        for e, (tl, vl) in enumerate(zip(h.train_loss, h.val_loss)):
            w.writerow([fmt(eta), e, fmt(tl), fmt(vl), h.stop_reason, h.status])
    write_atomic(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Config <-> module objects
# ---------------------------------------------------------------------------

def dataset_config(cfg: RunConfig) -> DatasetConfig:
    fading = FadingModel(cfg.fading, cfg.nakagami_m, cfg.nakagami_omega)
    link = LinkConfig(cfg.N, cfg.M, cfg.frame_length, fading, cfg.p_max, cfg.pathloss_gain(),
                      normalize_array_gain=cfg.normalize_array_gain)
    return DatasetConfig(link, (cfg.snr_train_min_db, cfg.snr_train_max_db), cfg.modulation_order)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                       lr=cfg.learning_rate, lam=cfg.lam, p_drop=cfg.dropout,
                       val_fraction=cfg.validation_split, patience=cfg.patience,
                       tol=cfg.improvement_tol, delta1=cfg.delta1, delta2=cfg.delta2,
                       eps=cfg.epsilon, bias_correction=cfg.adam_bias_correction,
                       hidden=cfg.hidden)


def stop_rule(cfg: RunConfig) -> StopRule:
    return StopRule(cfg.min_bits, cfg.min_errors, cfg.max_bits)


def provenance(cfg: RunConfig, command: str) -> list[str]:
    return [f"deepris {command}", f"config_digest={cfg.digest}", f"seed={cfg.seed}"]


def load_scenarios(path, cfg: RunConfig, frame_length: int) -> list[Scenario]:
    """Read an INI file with one section per scenario.

    Keys (all optional): csi_error, fading, nakagami_m, nakagami_omega, N, M,
    snr_grid_db, detectors. Missing keys fall back to the run config.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise FileNotFoundError(path)
    out = []
    allowed = {"csi_error", "fading", "nakagami_m", "nakagami_omega", "N", "M",
               "snr_grid_db", "detectors"}
    for label in parser.sections():
        sec = parser[label]
        unknown = set(sec) - allowed
        if unknown:
            raise ConfigError(f"{label}.{sorted(unknown)[0]}", "unknown scenario key")
        try:
            fading = FadingModel(sec.get("fading", "rayleigh"),
                                 float(sec.get("nakagami_m", cfg.nakagami_m)),
                                 float(sec.get("nakagami_omega", cfg.nakagami_omega)))
            grid = tuple(float(s) for s in sec.get("snr_grid_db", "").split(",") if s.strip())
            dets = tuple(s.strip() for s in sec.get("detectors", ",".join(DETECTORS)).split(","))
            out.append(Scenario(label, CsiQuality(float(sec.get("csi_error", 0.0))), fading,
                                int(sec.get("N", cfg.N)), int(sec.get("M", cfg.M)), frame_length,
                                grid or cfg.snr_grid_db, dets, cfg.p_max, cfg.pathloss_gain(),
                                cfg.modulation_order, cfg.normalize_array_gain))
        except (ValueError, ChannelError) as exc:
            raise ConfigError(label, str(exc)) from None
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(stream,)))


def cmd_generate(args, cfg: RunConfig) -> int:
    size = args.size if args.size is not None else cfg.train_samples
    data = generate_dataset(dataset_config(cfg), size, _rng(cfg, STREAM_GENERATE))
    data.metadata["config_digest"] = cfg.digest
    data.metadata["seed"] = cfg.seed
    save_dataset(args.out, data)
    print(f"wrote {len(data)} frames to {args.out}")
    return EXIT_OK


def _load_or_generate(path, cfg: RunConfig):
    if path is not None:
        return load_dataset(path)
    return generate_dataset(dataset_config(cfg), cfg.train_samples, _rng(cfg, STREAM_GENERATE))


def cmd_train(args, cfg: RunConfig) -> int:
    data = _load_or_generate(args.data, cfg)
    tcfg = train_config(cfg)

    def progress(epoch, tr, va):
        log.info("epoch %d  train %.6f  val %.6f", epoch, tr, va)

    params, stats, hist = train(data, tcfg, _rng(cfg, STREAM_TRAIN), progress)
    gen = {k: v for k, v in data.metadata.items() if k not in ("config_digest",)}
    ckpt = Checkpoint(params, stats, int(data.metadata.get("modulation_order", 4)),
                      data.frame_length, tcfg.to_dict(), gen)
    save_checkpoint(args.out, ckpt)
    if args.history:
        write_history_csv({tcfg.lr: hist}, args.history, provenance(cfg, "train"))
    print(f"stopped ({hist.stop_reason}) after {len(hist.val_loss)} epochs; "
          f"best validation loss {hist.best_val_loss:.6f} at epoch {hist.best_epoch}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.scenarios:
        scenarios = load_scenarios(args.scenarios, cfg, ckpt.frame_length)
    else:
        scenarios = default_scenarios(cfg.N, cfg.M, ckpt.frame_length, cfg.snr_grid_db,
                                      cfg.csi_error, cfg.nakagami_m, cfg.nakagami_omega,
                                      cfg.eval_N or None,
                                      normalize_array_gain=cfg.normalize_array_gain)
    curves = run_scenario_suite(ckpt, scenarios, cfg.seed, stop_rule(cfg))
    write_csv(curves, args.out, provenance(cfg, "eval"))
    print(f"wrote {sum(len(c.points) for c in curves)} rows to {args.out}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    data = _load_or_generate(args.data, cfg)
    etas = [float(s) for s in args.etas.split(",") if s.strip()]
    hists = learning_rate_study(data, etas, train_config(cfg), cfg.seed)
    write_history_csv(hists, args.out, provenance(cfg, "sweep"))
    for eta, h in hists.items():
        print(f"lr={fmt(eta)}  epochs={len(h.val_loss)}  best_val={h.best_val_loss:.6f}  "
              f"{h.status}")
    return EXIT_OK


def cmd_complexity(args, cfg: RunConfig) -> int:
    dims = [int(s) for s in args.dims.split(",")]
    rep = complexity_report(dims, args.k, args.t)
    print(f"node counts: {','.join(map(str, rep.node_counts))}")
    print(f"inference multiplies: {rep.inference_mults}")
    print(f"training multiplies (k={rep.iterations}, t={rep.samples}): {rep.training_mults}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "complexity": cmd_complexity}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    opts = common.add_argument_group("run configuration")
    for key in RunConfig.keys():
        opts.add_argument(f"--{key}", dest=f"cfg__{key}", metavar="VALUE", default=None)

    parser = argparse.ArgumentParser(prog="deepris", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="simulate a training dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)

    p = sub.add_parser("train", parents=[common], help="train the neural detector")
    p.add_argument("--data", help="dataset from 'generate' (simulated on the fly if omitted)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="optional per-epoch loss CSV")

    p = sub.add_parser("eval", parents=[common], help="BER curves for all detectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", help="INI scenario file (default: built-in suite)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", parents=[common], help="learning-rate study")
    p.add_argument("--data")
    p.add_argument("--etas", required=True, help="comma-separated learning rates")
    p.add_argument("--out", required=True)

    p = sub.add_parser("complexity", parents=[common], help="dense-layer multiply counts")
    p.add_argument("--dims", default="500,250,100,2")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--t", type=int, default=1)
    return parser


def dispatch(args: argparse.Namespace, cfg: RunConfig) -> int:
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, EvalError, ChannelError, ModemError, ValueError,
            FloatingPointError, ZeroDivisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    flags = {k[5:]: v for k, v in vars(args).items() if k.startswith("cfg__") and v is not None}
    try:
        cfg = load_config(args.config, flags)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    sys.stderr.write("".join(f"# {ln}\n" for ln in cfg.dump().splitlines()))
    return dispatch(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
