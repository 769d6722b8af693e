import csv
import io
import json

import numpy as np
import pytest

from nemon import network
from nemon.cli import main
from nemon.config import ExperimentConfig, load_config, parse_config
from nemon.robustness import AttackKind
from nemon.runner import compare_solvers, run
from nemon.training import OptimizerKind

SMALL = """\
# tiny synthetic run
seed=1
data.source=synth
data.train_count=120
data.test_count=40
model.n=8
train.batch_size=40
train.epochs=2
attack.count=20
attack.epsilons=0.0,0.05,0.2
attack.pgdm_steps=3
compare.n=6
compare.count=3
"""

ARTIFACTS = ["config.txt", "metrics.csv", "model.nemon", "T.npy", "certified.csv", "curves.csv", "summary.json"]


def csv_reemit(text):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in csv.reader(io.StringIO(text)):
        w.writerow(row)
    return buf.getvalue()


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL, encoding="utf-8")
    return p


class TestConfig:
    def test_parse(self, cfg_path):
        cfg = load_config(cfg_path)
        assert cfg.seed == 1 and cfg.n == 8 and cfg.epsilons == (0.0, 0.05, 0.2)
        assert cfg.optimizer is OptimizerKind.ADAM
        assert cfg.attack_kinds == tuple(AttackKind)

    def test_typed_values(self):
        cfg = parse_config("train.optimizer=sgd\nattack.kinds=fgsm,pgdm\nmodel.bias_only=true\n")
        assert cfg.optimizer is OptimizerKind.SGD
        assert cfg.attack_kinds == (AttackKind.FGSM, AttackKind.PGDM)
        assert cfg.bias_only

    @pytest.mark.parametrize(
        "text",
        ["bogus.key=1", "model.n", "model.n=abc", "model.gamma=1.0", "attack.epsilons=0.2,0.1", "data.source=cifar"],
    )
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_config(text)

    def test_hash_addresses_output(self):
        a = ExperimentConfig()
        assert a.config_hash() == ExperimentConfig().config_hash()
        assert a.config_hash() != a.with_overrides(seed=1).config_hash()
        assert a.config_hash() != a.with_overrides(lr=2e-3).config_hash()
        # where artifacts go does not change what they are
        assert a.config_hash() == a.with_overrides(out_dir="elsewhere").config_hash()

    def test_canonical_reparses(self):
        cfg = parse_config("seed=5\nmodel.activation=smooth_relu:0.2\nattack.kinds=inversion\n")
        again = parse_config(cfg.canonical())
        assert again.canonical() == cfg.canonical()
        assert again == cfg

    def test_relative_data_paths_follow_config_file(self, cfg_path):
        cfg = load_config(cfg_path)
        assert cfg.resolve("data/x") == cfg_path.parent / "data/x"


class TestRunner:
    def test_smoke_and_determinism(self, cfg_path, tmp_path):
        cfg = load_config(cfg_path).with_overrides(out_dir=str(tmp_path / "a"))
        summary = run(cfg)
        out = cfg.output_dir()
        for name in ARTIFACTS:
            assert (out / name).exists(), name
        parsed = json.loads((out / "summary.json").read_text())
        assert parsed == json.loads(json.dumps(summary))
        assert parsed["config_hash"] == cfg.config_hash()
        assert 0 <= parsed["test_accuracy"] <= 1
        assert network.load(out / "model.nemon").n == 8
        assert np.load(out / "T.npy").shape == (8, 8)
        for name in ("metrics.csv", "certified.csv", "curves.csv"):
            text = (out / name).read_text()
            assert csv_reemit(text) == text

        cfg_b = cfg.with_overrides(out_dir=str(tmp_path / "b"))
        run(cfg_b)
        for name in ARTIFACTS:
            assert (out / name).read_bytes() == (cfg_b.output_dir() / name).read_bytes(), name

    def test_different_configs_do_not_collide(self, cfg_path, tmp_path):
        cfg = load_config(cfg_path).with_overrides(out_dir=str(tmp_path))
        assert cfg.output_dir() != cfg.with_overrides(seed=2).output_dir()

    def test_compare_solvers(self, cfg_path, tmp_path):
        cfg = load_config(cfg_path).with_overrides(out_dir=str(tmp_path))
        rows = compare_solvers(cfg)
        assert len(rows) == 3
        for r in rows:
            assert r["mu_inf"] == pytest.approx(0.9)
            assert r["averaged_status"] == "converged"
            assert r["inf_norm"] >= r["pf_eig_abs"] - 1e-9
        text = (cfg.output_dir() / "compare_solvers.csv").read_text()
        assert csv_reemit(text) == text


class TestCli:
    def test_commands_and_byte_identical_reruns(self, cfg_path, tmp_path, capsys):
        roots = [tmp_path / "r1", tmp_path / "r2"]
        for root in roots:
            for cmd in ("train", "certify", "attack", "compare-solvers", "run"):
                assert main([cmd, "--config", str(cfg_path), "--out", str(root)]) == 0, cmd
        dirs = [next(r.iterdir()) for r in roots]
        files = sorted(p.name for p in dirs[0].iterdir())
        assert {"compare_solvers.csv", *ARTIFACTS} <= set(files)
        for name in files:
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name

    def test_seed_override_changes_directory(self, cfg_path, tmp_path):
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out), "--seed", "7"]) == 0
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert len(list(out.iterdir())) == 2

    def test_measure(self, tmp_path, capsys):
        A = np.array([[-3.5, 2.0], [0.0, 0.5]])
        np.save(tmp_path / "a.npy", A)
        np.savetxt(tmp_path / "a.txt", A)
        for path in ("a.npy", "a.txt"):
            assert main(["measure", str(tmp_path / path)]) == 0
            out = capsys.readouterr().out
            assert "measure: 0.5" in out and "norm: 5.5" in out
            assert "alpha_linf: 0.2222" in out
        assert main(["measure", str(tmp_path / "a.npy"), "--norm", "l1"]) == 0
        assert "measure: 2.5" in capsys.readouterr().out

    def test_measure_rejects_non_square(self, tmp_path):
        np.save(tmp_path / "a.npy", np.ones((2, 3)))
        assert main(["measure", str(tmp_path / "a.npy")]) == 2

    def test_bad_config_reports_error(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("model.n=zero\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 1
        assert "error" in capsys.readouterr().err
