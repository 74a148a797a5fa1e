import numpy as np
import pytest

from deepris.cli import (CSV_HEADER, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, dataset_config,
                         main, read_csv, train_config, write_csv)
from deepris.config import ConfigError, RunConfig, load_config, parse_config_text, resolve_config
from deepris.evaluation import BerCurve, BerPoint
from deepris.training import load_checkpoint

# tiny model and budget so an end-to-end run takes seconds
TINY = ["--N", "4", "--M", "2", "--frame_length", "2", "--train_samples", "400",
        "--hidden", "8,6,4", "--max_epochs", "2", "--snr_grid_db", "0,10",
        "--min_bits", "2000", "--min_errors", "5", "--max_bits", "4000", "--eval_N", "8"]


class TestConfig:
    def test_defaults(self):
        cfg = resolve_config(env={})
        assert (cfg.N, cfg.M, cfg.batch_size, cfg.learning_rate) == (64, 32, 64, 0.01)
        assert (cfg.train_samples, cfg.validation_split, cfg.patience) == (70_000, 0.2, 50)
        assert (cfg.delta1, cfg.delta2, cfg.lam, cfg.dropout) == (0.9, 0.999, 1e-4, 0.5)
        assert (cfg.snr_train_min_db, cfg.snr_train_max_db) == (0.0, 30.0)
        assert cfg.hidden == (500, 250, 100) and cfg.modulation_order == 4

    def test_flag_override(self):
        cfg = resolve_config(flag_values={"N": "16"}, env={})
        assert cfg.N == 16
        base = RunConfig().to_dict()
        assert {k: v for k, v in cfg.to_dict().items() if v != base[k]} == {"N": 16}

    def test_negative_lambda_names_key(self):
        with pytest.raises(ConfigError) as err:
            resolve_config(flag_values={"lambda": "-1"}, env={})
        assert err.value.key == "lambda"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config_text("bogus = 1")

    def test_type_error(self):
        with pytest.raises(ConfigError, match="batch_size"):
            resolve_config(flag_values={"batch_size": "many"}, env={})

    def test_file_then_flags(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nN = 8   # trailing\nM = 2\n\nlearning_rate = 0.001\n")
        cfg = load_config(path, {"M": "3"}, env={})
        assert (cfg.N, cfg.M, cfg.learning_rate) == (8, 3, 0.001)

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_config_text("N 16")

    def test_seed_environment(self):
        assert resolve_config(env={"DEEPRIS_SEED": "42"}).seed == 42
        assert resolve_config(flag_values={"seed": "7"}, env={"DEEPRIS_SEED": "42"}).seed == 7

    def test_desk_profile(self):
        cfg = resolve_config(flag_values={"desk_scale": "true"}, env={})
        assert (cfg.N, cfg.M, cfg.frame_length) == (16, 4, 16)
        assert cfg.train_samples >= 30_000
        assert resolve_config(flag_values={"desk_scale": "1", "N": "8"}, env={}).N == 8

    def test_dump_round_trip(self):
        cfg = resolve_config(flag_values={"eval_N": "8,32", "fading": "nakagami"}, env={})
        again = resolve_config(parse_config_text(cfg.dump()), env={})
        assert again == cfg and again.digest == cfg.digest

    def test_mapping(self):
        cfg = resolve_config(flag_values={"N": "8", "adam_bias_correction": "yes"}, env={})
        assert dataset_config(cfg).link.n_elements == 8
        assert train_config(cfg).bias_correction is True


def curve(n_points):
    return BerCurve("ml", "a", 5, [BerPoint(float(s), s + 1, 1000) for s in range(n_points)])


class TestCsv:
    def test_rows(self, tmp_path):
        write_csv([curve(3)], tmp_path / "x.csv")
        lines = (tmp_path / "x.csv").read_text().splitlines()
        assert len(lines) == 4 and lines[0] == ",".join(CSV_HEADER)
        for row in read_csv(tmp_path / "x.csv"):
            assert float(row["ber"]) == int(row["errors"]) / int(row["bits"])

    def test_empty(self, tmp_path):
        write_csv([], tmp_path / "x.csv")
        assert (tmp_path / "x.csv").read_text() == ",".join(CSV_HEADER) + "\n"

    def test_plain_decimals(self, tmp_path):
        c = BerCurve("ml", "a", 0, [BerPoint(30.0, 1, 10_000_000)])
        write_csv([c], tmp_path / "x.csv")
        text = (tmp_path / "x.csv").read_text()
        assert "e-" not in text and "0.0000001" in text

    def test_comments(self, tmp_path):
        write_csv([curve(1)], tmp_path / "x.csv", ["seed=5"])
        assert (tmp_path / "x.csv").read_text().startswith("# seed=5\n")
        assert len(read_csv(tmp_path / "x.csv")) == 1


class TestMain:
    def test_complexity(self, capsys):
        assert main(["complexity", "--dims", "500,250,100,2"]) == EXIT_OK
        assert "inference multiplies: 150200" in capsys.readouterr().out

    def test_missing_checkpoint(self, tmp_path):
        rc = main(["eval", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "o.csv")])
        assert rc == EXIT_IO

    def test_config_error(self, tmp_path):
        assert main(["complexity", "--lambda", "-1"]) == EXIT_CONFIG
        assert main(["complexity", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO

    def test_numeric_error(self):
        assert main(["complexity", "--dims", "500,250,100"]) == EXIT_NUMERIC

    def test_config_echoed(self, capsys):
        main(["complexity", "--N", "12"])
        err = capsys.readouterr().err
        assert "# N = 12" in err and "# lambda = 0.0001" in err

    def test_end_to_end_is_reproducible(self, tmp_path):
        outs = []
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            assert main(["generate", "--out", str(d / "data.bin"), *TINY]) == EXIT_OK
            assert main(["train", "--data", str(d / "data.bin"), "--out", str(d / "m.ckpt"),
                         "--history", str(d / "hist.csv"), *TINY]) == EXIT_OK
            assert main(["eval", "--checkpoint", str(d / "m.ckpt"), "--out", str(d / "ber.csv"),
                         *TINY]) == EXIT_OK
            outs.append([(d / f).read_bytes() for f in ("data.bin", "m.ckpt", "hist.csv", "ber.csv")])
        assert outs[0] == outs[1]
        rows = read_csv(tmp_path / "a" / "ber.csv")
        assert {r["scenario"] for r in rows} == {"a_perfect_csi", "b_imperfect_csi", "c_nakagami",
                                                  "d_n8"}
        assert (tmp_path / "a" / "ber.csv").read_text().startswith("# deepris eval\n# config_digest=")
        ckpt = load_checkpoint(tmp_path / "a" / "m.ckpt")
        assert ckpt.params.layer_dims == [4, 8, 6, 4, 4]

    def test_train_without_dataset(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "m.ckpt"), *TINY]) == EXIT_OK
        assert (tmp_path / "m.ckpt").exists()

    def test_inputs_not_mutated(self, tmp_path):
        main(["generate", "--out", str(tmp_path / "data.bin"), *TINY])
        before = (tmp_path / "data.bin").read_bytes()
        main(["train", "--data", str(tmp_path / "data.bin"), "--out", str(tmp_path / "m.ckpt"), *TINY])
        assert (tmp_path / "data.bin").read_bytes() == before

    def test_sweep(self, tmp_path, capsys):
        rc = main(["sweep", "--etas", "0.01,0.001", "--out", str(tmp_path / "s.csv"), *TINY])
        assert rc == EXIT_OK
        rows = read_csv(tmp_path / "s.csv")
        assert {r["learning_rate"] for r in rows} == {"0.01", "0.001"}

    def test_scenario_file(self, tmp_path):
        main(["train", "--out", str(tmp_path / "m.ckpt"), *TINY])
        (tmp_path / "sc.ini").write_text("[mine]\ncsi_error = 0.2\ndetectors = ml,deepris\n"
                                         "snr_grid_db = 5\n")
        rc = main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--scenarios",
                   str(tmp_path / "sc.ini"), "--out", str(tmp_path / "o.csv"), *TINY])
        assert rc == EXIT_OK
        rows = read_csv(tmp_path / "o.csv")
        assert [(r["scenario"], r["detector"], r["snr_db"]) for r in rows] == [
            ("mine", "ml", "5"), ("mine", "deepris", "5")]

    def test_bad_scenario_key(self, tmp_path):
        main(["train", "--out", str(tmp_path / "m.ckpt"), *TINY])
        (tmp_path / "sc.ini").write_text("[mine]\nwhatever = 1\n")
        rc = main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--scenarios",
                   str(tmp_path / "sc.ini"), "--out", str(tmp_path / "o.csv"), *TINY])
        assert rc == EXIT_CONFIG
