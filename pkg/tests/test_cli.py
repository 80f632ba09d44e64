import csv
import json
import subprocess
import sys

import pytest

from ega import cli
from ega.codec import load_checkpoint

TINY_PRETRAIN = {"b": 8, "h": 8, "s": 32, "m": 4, "epochs": 2, "train_groups": 64, "test_groups": 32, "batch_size": 16}
QUAD_DATA = {"task": "quadratic", "num_clients": 4, "dim": 10, "rows_per_client": 20}
QUAD_FL = {"rounds": 3, "clients_per_round": 4, "learning_rate": 0.05, "s": 32, "n0": 1.0}


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


@pytest.fixture(scope="module")
def tiny_codec(tmp_path_factory):
    root = tmp_path_factory.mktemp("codec")
    cfg = write_config(root / "c.json", pretrain=TINY_PRETRAIN)
    assert cli.main(["pretrain", "--config", cfg, "--out", str(root / "run")]) == 0
    return str(root / "run" / "checkpoints" / "codec.ckpt")


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestParsing:
    @pytest.mark.parametrize("cmd", list(cli.COMMANDS))
    def test_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main([cmd, "--help"])
        assert exc.value.code == 0
        assert "--config" in capsys.readouterr().out

    def test_dotted_flags(self):
        assert cli.parse_dotted_flags(["--fl.rounds", "5", "--a.b=x"]) == [("fl.rounds", 5), ("a.b", "x")]

    def test_override_and_seed(self, tmp_path):
        path = write_config(tmp_path / "c.json", fl={"rounds": 2})
        config = cli.load_config(path, [("fl.rounds", 7), ("pretrain.m", 3)], seed=11)
        assert config["fl"] == {"rounds": 7, "seed": 11}
        assert config["pretrain"]["m"] == 3 and config["data"]["seed"] == 11

    def test_parse_ids(self):
        assert cli.parse_ids("all", 3) == [0, 1, 2]
        assert cli.parse_ids("1,4-5", 10) == [1, 4, 5]
        with pytest.raises(cli.ConfigError):
            cli.parse_ids("12", 10)


class TestErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["fl-run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
        assert "nope.json" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", fl={"roundz": 3})
        assert cli.main(["fl-run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_codec_m_mismatch(self, tmp_path, tiny_codec, capsys):
        cfg = write_config(tmp_path / "c.json", data=QUAD_DATA, fl={**QUAD_FL, "clients_per_round": 3})
        assert cli.main(["fl-run", "--config", cfg, "--codec", tiny_codec, "--out", str(tmp_path / "o")]) == 2
        assert "m=4" in capsys.readouterr().err

    def test_missing_codec(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", data=QUAD_DATA, fl=QUAD_FL)
        assert cli.main(["fl-run", "--config", cfg, "--codec", str(tmp_path / "x.ckpt"),
                         "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_codec_is_format_error(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"EGA1" + b"\0" * 40)
        cfg = write_config(tmp_path / "c.json", data=QUAD_DATA, fl=QUAD_FL)
        assert cli.main(["fl-run", "--config", cfg, "--codec", str(bad), "--out", str(tmp_path / "o")]) == 4


class TestPretrain:
    def test_checkpoint_reloads(self, tiny_codec):
        model = load_checkpoint(tiny_codec)
        assert (model.b, model.h, model.s, model.m_train) == (8, 8, 32, 4)

    def test_run_directory(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", pretrain=TINY_PRETRAIN)
        out = tmp_path / "run"
        assert cli.main(["pretrain", "--config", cfg, "--out", str(out)]) == 0
        assert len(read_rows(out / "metrics.csv")) == TINY_PRETRAIN["epochs"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "pretrain" and manifest["config_path"] == cfg
        assert manifest["outputs"]["codec_crc"]
        assert (out / "reports" / "pretrain.json").exists() and (out / "run.log").exists()

    def test_seed_flag_changes_weights(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", pretrain=TINY_PRETRAIN)
        paths = []
        for seed in (0, 0, 1):
            out = tmp_path / f"s{len(paths)}"
            assert cli.main(["pretrain", "--config", cfg, "--seed", str(seed), "--out", str(out)]) == 0
            paths.append(out / "checkpoints" / "codec.ckpt")
        a, b, c = (p.read_bytes() for p in paths)
        assert a == b and a != c


class TestFlRun:
    def test_plaintext_without_codec(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", data=QUAD_DATA, fl={**QUAD_FL, "ega_enabled": False})
        out = tmp_path / "o"
        assert cli.main(["fl-run", "--config", cfg, "--out", str(out), "--fl.rounds", "4"]) == 0
        rows = read_rows(out / "metrics.csv")
        assert len(rows) == 4 and {r["ega"] for r in rows} == {"0"}

    def test_reproducible(self, tmp_path, tiny_codec):
        cfg = write_config(tmp_path / "c.json", data=QUAD_DATA, fl=QUAD_FL, codec=tiny_codec)
        texts = []
        for i in range(2):
            out = tmp_path / f"o{i}"
            assert cli.main(["fl-run", "--config", cfg, "--out", str(out)]) == 0
            texts.append((out / "metrics.csv").read_bytes())
        assert texts[0] == texts[1]
        assert len(texts[0].splitlines()) == QUAD_FL["rounds"] + 1
        manifest = json.loads((tmp_path / "o0" / "manifest.json").read_text())
        assert manifest["artifacts"]["dataset_digest"] and manifest["artifacts"]["codec_crc"]
        assert manifest["resolved"]["fl"]["rounds"] == 3


class TestAnalysisCommands:
    def test_verify_bound(self, tmp_path, tiny_codec, capsys):
        cfg = write_config(tmp_path / "c.json", analysis={"n": [1.0, 0.5], "trials": 50})
        out = tmp_path / "o"
        assert cli.main(["verify-bound", "--config", cfg, "--codec", tiny_codec, "--out", str(out)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[-1] in ("PASS", "FAIL") and len(lines) == 3
        rows = read_rows(out / "reports" / "bound.csv")
        assert [float(r["n"]) for r in rows] == [1.0, 0.5]

    def test_sweep(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", pretrain=TINY_PRETRAIN, sweep={"ms": [2, 4]})
        out = tmp_path / "o"
        assert cli.main(["sweep", "--config", cfg, "--out", str(out)]) == 0
        assert [r["m"] for r in read_rows(out / "reports" / "sweep.csv")] == ["2", "4"]

    def test_report(self, tmp_path, tiny_codec):
        files = []
        for ega in (False, True):
            cfg = write_config(tmp_path / f"c{ega}.json", data=QUAD_DATA, codec=tiny_codec,
                               fl={**QUAD_FL, "ega_enabled": ega, "rounds": 2})
            out = tmp_path / f"run{ega}"
            assert cli.main(["fl-run", "--config", cfg, "--out", str(out)]) == 0
            files.append(str(out / "metrics.csv"))
        out = tmp_path / "rep"
        assert cli.main(["report", *files, "--compression", "1", "1", "--out", str(out)]) == 0
        rows = read_rows(out / "reports" / "compare.csv")
        assert [r["ega"] for r in rows] == ["0", "1"] and {r["rounds"] for r in rows} == {"2"}
        assert cli.main(["report", *files, "--compression", "1", "--out", str(out)]) == 2


class TestNetworked:
    def test_serve_and_clients_match_simulator(self, tmp_path, tiny_codec):
        fl = {**QUAD_FL, "wire_float32": True}
        cfg = write_config(tmp_path / "c.json", data=QUAD_DATA, fl=fl, codec=tiny_codec)
        server = subprocess.Popen(
            [sys.executable, "-m", "ega", "serve", "--config", cfg, "--out", str(tmp_path / "net"),
             "--token", "t", "--join-timeout-ms", "30000"],
            stdout=subprocess.PIPE, text=True,
        )
        try:
            line = server.stdout.readline()
            assert line.startswith("listening on ")
            address = line.split()[-1]
            client = subprocess.run(
                [sys.executable, "-m", "ega", "client", "--config", cfg, "--connect", address,
                 "--token", "t", "--client-id", "0-3"],
                capture_output=True, text=True, timeout=120,
            )
            assert client.returncode == 0, client.stderr
            assert server.wait(timeout=60) == 0
        finally:
            server.kill()
            server.stdout.close()
        assert cli.main(["fl-run", "--config", cfg, "--out", str(tmp_path / "sim")]) == 0
        net = read_rows(tmp_path / "net" / "metrics.csv")
        sim = read_rows(tmp_path / "sim" / "metrics.csv")
        assert len(net) == len(sim) == 3
        for a, b in zip(net, sim):
            assert float(a["loss"]) == pytest.approx(float(b["loss"]), abs=1e-9)
            assert a["n_used"] == b["n_used"]
