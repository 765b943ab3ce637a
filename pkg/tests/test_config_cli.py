import json
import subprocess
import sys

import numpy as np
import pytest

from udmlss.cli import main
from udmlss.config import ExperimentConfig, parse_config, parse_override
from udmlss.data import load_idx
from udmlss.errors import ConfigError

TINY = ["k=4", "P=4", "M=5", "epochs=1", "synth_classes=4", "synth_per_class=20",
        "synth_heldout_per_class=5", "image_size=16", "widths=[4,8,8]", "d_embed=8", "recall_ks=[1,2]"]


def sets(items):
    out = []
    for it in items:
        out += ["-s", it]
    return out


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.json").write_text("{}")
        c = parse_config(tmp_path / "c.json")
        assert (c.k, c.eta, c.M, c.alpha, c.beta, c.lam, c.eps) == (100, 0.1, 5, 2.0, 50.0, 1.0, 0.1)
        assert c == ExperimentConfig()

    def test_override(self):
        c = parse_config(None, ["eta=0.5", "widths=[2,3]", "loss=\"triplet\"", "loss=lifted"])
        assert c.eta == 0.5 and c.widths == [2, 3] and c.loss == "lifted"

    def test_int_promoted_to_float(self):
        assert parse_config(None, ["eta=1"]).eta == 1.0

    @pytest.mark.parametrize("item,needle", [
        ("k=0", "k"), ("M=1", "M"), ("eta=-1", "eta"), ("nope=1", "nope"),
        ("k=\"ten\"", "k"), ("loss=\"huber\"", "loss"), ("k", "key=value"),
    ])
    def test_rejected(self, item, needle):
        with pytest.raises(ConfigError, match=needle):
            parse_config(None, [item])

    def test_file_errors(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError, match="JSON"):
            parse_config(tmp_path / "bad.json")
        (tmp_path / "list.json").write_text("[]")
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "list.json")
        (tmp_path / "u.json").write_text('{"foo": 1}')
        with pytest.raises(ConfigError, match="foo"):
            parse_config(tmp_path / "u.json")

    def test_parse_override_json(self):
        assert parse_override("margin=null") == ("margin", None)


class TestCli:
    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "-o", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "gradcheck.json").read_text())
        assert max(res.values()) < 1e-4 and "network" in res
        assert (tmp_path / "config.json").exists()

    def test_eval_without_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "-o", str(tmp_path)]) == 2
        assert str(tmp_path / "checkpoint.udml") in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", "-c", str(tmp_path / "none.json"), "-o", str(tmp_path)]) == 2

    def test_bad_override_exit_1(self, tmp_path, capsys):
        assert main(["train", "-s", "k=0", "-o", str(tmp_path)]) == 1
        assert "k" in capsys.readouterr().err

    def test_train_eval_embed_cluster(self, tmp_path, capsys):
        args = sets(TINY) + ["-o", str(tmp_path)]
        assert main(["train"] + args) == 0
        assert (tmp_path / "checkpoint.udml").exists()
        assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 1
        assert main(["eval"] + args) == 0
        rep = json.loads((tmp_path / "eval.json").read_text())
        assert set(rep["recall"]) == {"1", "2"} and 0 <= rep["nmi"] <= 1 and rep["n_queries"] == 20
        assert main(["embed", "--split", "train"] + args) == 0
        rows = (tmp_path / "embeddings_train.csv").read_text().splitlines()
        assert len(rows) == 81 and rows[0].count(",") == 8
        assert main(["cluster"] + args) == 0
        assert (tmp_path / "centroids_heldout.udml").exists()

    def test_env_out_dir_wins(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("UDML_OUT", str(tmp_path / "env"))
        assert main(["synth", "-o", str(tmp_path / "flag")] + sets(TINY)) == 0
        assert (tmp_path / "env" / "dataset.json").exists()
        assert not (tmp_path / "flag").exists()

    def test_synth_idx_roundtrip(self, tmp_path, capsys):
        assert main(["synth", "--idx", "-o", str(tmp_path)] + sets(TINY)) == 0
        desc = json.loads((tmp_path / "dataset.json").read_text())
        assert desc["n_train"] == 80 and desc["n_heldout"] == 20
        ds = load_idx(tmp_path / "train-images.idx3-ubyte", tmp_path / "train-labels.idx1-ubyte")
        assert ds.images.shape == (80, 1, 16, 16)
        rt = parse_config(None, TINY + ['dataset="idx"', f'idx_images="{tmp_path / "train-images.idx3-ubyte"}"'])
        from udmlss.training import load_data
        train, _ = load_data(rt)
        assert np.array_equal(train.images, ds.images)

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "udmlss", "eval", "-o", str(tmp_path)],
                           capture_output=True, text=True)
        assert r.returncode == 2 and "checkpoint not found" in r.stderr
