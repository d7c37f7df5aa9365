import subprocess
import sys
import time

import pytest

from cachenet import cli
from cachenet.config import ConfigError, coerce, parse_config, read_config, write_config

TOY = """# toy run
num_classes = 4
input_dim = 10
latent_dim = 3
samples_per_class = 50
frames = 300
epochs = 3
z_dim = 4
vae_hidden = 16
vae_hidden2 = 8
trunk_widths = 12
thresholds = 0, 0.2, 1
"""


@pytest.fixture()
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY)
    return path


class TestConfig:
    def test_parse(self):
        assert parse_config("# c\n\na = 1\nb=x = y\n") == {"a": "1", "b": "x = y"}

    def test_parse_error(self):
        with pytest.raises(ConfigError):
            parse_config("novalue\n")

    def test_coerce(self):
        out = coerce({"a": "3", "b": "true", "c": "1,2", "d": "none", "e": "0.5"},
                     {"a": 1, "b": False, "c": (0,), "d": None, "e": 1.0})
        assert out == {"a": 3, "b": True, "c": (1, 2), "d": None, "e": 0.5}

    @pytest.mark.parametrize("values", [{"zzz": "1"}, {"a": "x"}, {"b": "maybe"}])
    def test_coerce_errors(self, values):
        with pytest.raises(ConfigError):
            coerce(values, {"a": 1, "b": False})

    def test_write_read(self, tmp_path):
        write_config(tmp_path / "c.cfg", {"x": 1, "y": "z"})
        assert read_config(tmp_path / "c.cfg") == {"x": "1", "y": "z"}


class TestCommands:
    def test_belady(self, capsys):
        assert cli.main(["belady", "--traces", "100", "--K", "8"]) == 0
        assert "violations: 0" in capsys.readouterr().out.splitlines()

    def test_simulate_byte_identical(self, toy_cfg, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["simulate", "--config", str(toy_cfg), "--seed", "7", "--out", str(a)]) == 0
        assert cli.main(["simulate", "--config", str(toy_cfg), "--seed", "7", "--out", str(b)]) == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == ["histogram.csv", "losses.csv", "report.csv", "trace.csv"]
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert not list(a.glob("*.tmp")) and not list(a.glob(".*"))

    def test_seed_changes_output(self, toy_cfg, tmp_path):
        cli.main(["simulate", "--config", str(toy_cfg), "--seed", "1", "--out", str(tmp_path / "a")])
        cli.main(["simulate", "--config", str(toy_cfg), "--seed", "2", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "trace.csv").read_bytes() != (tmp_path / "b" / "trace.csv").read_bytes()

    def test_train_then_simulate_with_bundle(self, toy_cfg, tmp_path, capsys):
        out = tmp_path / "bundle"
        assert cli.main(["train", "--config", str(toy_cfg), "--out", str(out)]) == 0
        assert (out / "losses.csv").read_text().startswith("epoch,J,JF,LVAE,LVAE2\n")
        assert cli.main(["simulate", "--config", str(toy_cfg), "--bundle", str(out), "--loopback",
                         "--out", str(tmp_path / "sim")]) == 0
        assert not (tmp_path / "sim" / "losses.csv").exists()
        capsys.readouterr()
        assert cli.main(["report", str(tmp_path / "sim" / "report.csv"), str(out / "losses.csv"),
                         str(tmp_path / "sim" / "trace.csv")]) == 0
        text = capsys.readouterr().out
        assert "hit_rate" in text and "ratio=" in text

    def test_bad_config(self, tmp_path, capsys):
        assert cli.main(["simulate", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
        assert cli.main(["simulate", "-o", "bogus=1", "--out", str(tmp_path)]) == 2
        assert cli.main(["simulate", "-o", "epochs=many", "--out", str(tmp_path)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_device_without_server(self, capsys):
        start = time.perf_counter()
        code = cli.main(["device", "--port", "1", "-o", "retries=2", "-o", "backoff=0.01"])
        assert code != 0
        assert time.perf_counter() - start < 5
        assert "unreachable" in capsys.readouterr().err

    def test_gradcheck(self, capsys):
        assert cli.main(["gradcheck", "--trials", "1"]) == 0
        assert "16/16 checks below 0.0001" in capsys.readouterr().out
        assert cli.main(["gradcheck", "--trials", "1", "--tol", "0"]) == 1

    def test_serve_and_device_processes(self, toy_cfg, tmp_path):
        bundle = tmp_path / "bundle"
        assert cli.main(["train", "--config", str(toy_cfg), "--out", str(bundle)]) == 0
        server = subprocess.Popen([sys.executable, "-m", "cachenet.cli", "serve", "--bundle", str(bundle),
                                   "--port", "0"], stdout=subprocess.PIPE, text=True)
        try:
            line = server.stdout.readline()
            assert line.startswith("listening on ")
            port = line.rsplit(":", 1)[1].strip()
            trace = tmp_path / "trace.csv"
            done = subprocess.run([sys.executable, "-m", "cachenet.cli", "device", "--config", str(toy_cfg),
                                   "--port", port, "--out", str(trace)],
                                  capture_output=True, text=True, timeout=60)
            assert done.returncode == 0, done.stderr
            assert "hit_rate" in done.stdout
            assert cli.main(["simulate", "--config", str(toy_cfg), "--bundle", str(bundle),
                             "-o", "threshold=0.3", "--out", str(tmp_path / "sim")]) == 0
            assert trace.read_bytes() == (tmp_path / "sim" / "trace.csv").read_bytes()
        finally:
            server.terminate()
            server.wait(timeout=10)
