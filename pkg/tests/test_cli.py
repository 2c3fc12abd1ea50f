"""Command-line pipeline: config parsing, end-to-end run, reproducibility."""

import csv
from pathlib import Path

import numpy as np
import pytest

from diffsched.cli import load_config, main, write_svg_lines

TINY_CONFIG = """
# tiny end-to-end settings
seed = 3
data_kind = gaussian
data_dim = 2
n_train = 512
n_val = 256
n_test = 256
T = 200
eps = 0.8
batch_size = 32
score_iters = 300
sched_iters = 200
tau = 10
N = 3
M = 3
search_samples = 32
n_samples = 64
bound_t_count = 4
bound_mc = 50
bench_budgets = 3
bench_seeds = 2
"""


@pytest.fixture(scope="module")
def tiny_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.txt"
    path.write_text(TINY_CONFIG)
    return path


class TestConfig:
    def test_parse_with_comments(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("seed = 5  # inline comment\n\n# full-line comment\nT = 40\n")
        cfg = load_config(path)
        assert cfg.seed == 5
        assert cfg.T == 40

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("sneed = 1\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_config(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("seed 1\n")
        with pytest.raises(ValueError, match="key = value"):
            load_config(path)

    def test_bundled_configs_parse(self):
        root = Path(__file__).resolve().parent.parent / "configs"
        for name in ("gaussian2d.txt", "mixture8.txt"):
            cfg = load_config(root / name)
            assert cfg.seed >= 0
            assert cfg.budgets()


class TestCliContract:
    def test_seed_mandatory(self, tmp_path, capsys):
        path = tmp_path / "c.txt"
        path.write_text("T = 40\n")
        rc = main(["gen-data", "--config", str(path), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "seed is mandatory" in capsys.readouterr().err

    def test_missing_config_fails(self, tmp_path, capsys):
        rc = main(["gen-data", "--config", str(tmp_path / "nope.txt")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_inputs_fail_fast(self, tiny_cfg_path, tmp_path, capsys):
        out = tmp_path / "empty"
        rc = main(["train-score", "--config", str(tiny_cfg_path), "--out", str(out)])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and "missing" in err

    def test_invalid_schedule_file_rejected_before_sampling(
        self, tiny_cfg_path, tmp_path, capsys
    ):
        out = tmp_path / "run"
        out.mkdir()
        assert main(["gen-data", "--config", str(tiny_cfg_path), "--out", str(out)]) == 0
        assert main(["train-score", "--config", str(tiny_cfg_path), "--out", str(out)]) == 0
        (out / "schedule.txt").write_text("N 2\n0.2\n0.1\ninit 0.5 0.1\n")
        rc = main(["sample", "--config", str(tiny_cfg_path), "--out", str(out)])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
        assert not (out / "samples.txt").exists()


def _run_pipeline(cfg_path, out):
    for command in (
        "gen-data",
        "train-score",
        "train-schedule",
        "search",
        "sample",
        "eval-bounds",
        "bench",
    ):
        rc = main([command, "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0, f"{command} failed"


class TestPipeline:
    def test_end_to_end_and_reproducible(self, tiny_cfg_path, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        _run_pipeline(tiny_cfg_path, out1)
        _run_pipeline(tiny_cfg_path, out2)
        artifacts = [
            "data_train.txt",
            "data_val.txt",
            "data_test.txt",
            "score_loss.csv",
            "sched_loss.csv",
            "schedule.txt",
            "search_report.csv",
            "samples.txt",
            "bounds.csv",
            "bounds.svg",
            "bench.csv",
        ]
        for name in artifacts:
            a, b = (out1 / name).read_bytes(), (out2 / name).read_bytes()
            assert a == b, f"{name} differs between identical runs"

        # csv schemas
        with open(out1 / "bounds.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["t", "f_elbo", "f_elbo_se", "f_score", "f_score_se", "f_bddm", "f_bddm_se"]
        with open(out1 / "search_report.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["alpha_N", "beta_N", "steps", "metric", "skipped"]
        with open(out1 / "score_loss.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["iteration", "loss", "quadratic", "constant"]

        # bench table completeness: every (method, steps, seed) row has all cells
        with open(out1 / "bench.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "steps", "energy_distance", "seed"]
        body = rows[1:]
        assert body, "empty benchmark table"
        methods = {r[0] for r in body}
        assert methods == {"linear", "ddim", "ne", "bddm", "direct_beta", "legacy_grid"}
        for row in body:
            assert len(row) == 4 and all(cell != "" for cell in row)
            float(row[2])
        # one row per (method, steps, seed)
        keys = [(r[0], r[1], r[3]) for r in body]
        assert len(keys) == len(set(keys))
        assert len(body) == len(methods) * 1 * 2  # one budget, two seeds

    def test_inputs_not_mutated(self, tiny_cfg_path, tmp_path):
        out = tmp_path / "r3"
        rc = main(["gen-data", "--config", str(tiny_cfg_path), "--out", str(out)])
        assert rc == 0
        before = {p.name: p.read_bytes() for p in out.iterdir()}
        assert main(["train-score", "--config", str(tiny_cfg_path), "--out", str(out)]) == 0
        for name, blob in before.items():
            assert (out / name).read_bytes() == blob


class TestSvg:
    def test_writes_polylines(self, tmp_path):
        path = tmp_path / "p.svg"
        write_svg_lines(path, [1, 2, 3], {"a": [0.0, 1.0, 0.5], "b": [1.0, 0.0, 0.2]}, "demo")
        text = path.read_text()
        assert text.count("<polyline") == 2
        assert text.startswith("<svg")
