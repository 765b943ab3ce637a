import json
import os

import numpy as np
import pytest

from udmlss import container
from udmlss.errors import CorruptionError, FormatError, NumericError
from udmlss.tensor import Tensor
from udmlss.training import (
    LOG_KEYS, AdamState, adam_step, load_checkpoint, load_data, rotation_accuracy, run_training, save_checkpoint,
)


def one_param(value):
    return {"w": Tensor(np.array(value, dtype=np.float64), requires_grad=True)}


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = one_param([1.0, -2.0])
        st = AdamState.zeros_like(p)
        adam_step(p, {"w": np.zeros(2)}, st, lr=0.1)
        assert p["w"].data.tolist() == [1.0, -2.0]
        assert st.t == 1

    def test_first_step_is_lr_times_sign(self):
        p = one_param([1.0, 1.0, 1.0])
        adam_step(p, {"w": np.array([3.0, -0.5, 1e-3])}, AdamState.zeros_like(p), lr=0.01)
        np.testing.assert_allclose(p["w"].data, [0.99, 1.01, 0.99], atol=1e-5)

    def test_non_finite_names_parameter(self):
        p = one_param([1.0])
        with pytest.raises(NumericError, match="w"):
            adam_step(p, {"w": np.array([np.nan])}, AdamState.zeros_like(p), lr=0.1)
        assert p["w"].data.tolist() == [1.0]


def test_tiny_run_logs_and_learns_something(tiny_config, tmp_path):
    ckpt, hist = run_training(tiny_config, tmp_path)
    assert len(hist) == tiny_config.epochs
    assert list(hist[0]) == list(LOG_KEYS)
    assert [h["epoch"] for h in hist] == [1, 2, 3]
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == hist
    assert json.loads((tmp_path / "config.json").read_text())["k"] == 4
    assert all(np.isfinite(h["loss_total"]) for h in hist)
    assert np.isclose(hist[0]["loss_total"], hist[0]["loss_ms"] + 0.5 * hist[0]["loss_rot"], rtol=1e-6)
    loaded = load_checkpoint(tmp_path / "checkpoint.udml")
    assert loaded.epoch == 3 and loaded.history == hist
    for k, v in ckpt.params.items():
        assert np.array_equal(loaded.params[k], v)


def test_deterministic(tiny_config):
    cfg = tiny_config.replace(epochs=2)
    a, ha = run_training(cfg)
    b, hb = run_training(cfg)
    assert ha == hb
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_resume_matches_uninterrupted(tiny_config, tmp_path):
    full, hist = run_training(tiny_config)
    half, _ = run_training(tiny_config, tmp_path, stop_after=2)
    resumed, hist2 = run_training(tiny_config, resume=load_checkpoint(tmp_path / "checkpoint.udml"))
    assert hist2 == hist
    for k in full.params:
        assert full.params[k].tobytes() == resumed.params[k].tobytes()


def test_eta_zero_leaves_rotation_head_alone(tiny_config):
    from udmlss.training import new_model

    cfg = tiny_config.replace(eta=0.0, epochs=1)
    init = {k: t.data.copy() for k, t in new_model(cfg).named().items()}
    ckpt, _ = run_training(cfg)
    for k in ("rot.w", "rot.b"):
        assert np.array_equal(ckpt.params[k], init[k])
    assert not np.array_equal(ckpt.params["embed.w"], init["embed.w"])


def test_checkpoint_corruption(tiny_config, tmp_path):
    ckpt, _ = run_training(tiny_config.replace(epochs=1))
    path = tmp_path / "c.udml"
    save_checkpoint(ckpt, path)
    raw = path.read_bytes()
    (tmp_path / "t.udml").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "t.udml")
    bumped = raw[:4] + (container.VERSION + 1).to_bytes(4, "little") + raw[8:]
    (tmp_path / "v.udml").write_bytes(bumped)
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "v.udml")


def test_unwritable_dir_fails_before_training(tiny_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        run_training(tiny_config, blocker / "sub")


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_dir(tiny_config, tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        with pytest.raises(OSError):
            run_training(tiny_config, ro)
    finally:
        ro.chmod(0o700)


def test_rotation_accuracy_bounds(tiny_config):
    from udmlss.training import new_model

    train, held = load_data(tiny_config)
    acc = rotation_accuracy(new_model(tiny_config), held.images)
    assert 0.0 <= acc <= 1.0
    assert len(held) == 20


def test_worker_count_does_not_change_run(tiny_config):
    a, ha = run_training(tiny_config.replace(epochs=2))
    b, hb = run_training(tiny_config.replace(epochs=2, workers=3))
    assert ha == hb
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_resumed_log_file_matches_byte_for_byte(tiny_config, tmp_path):
    cfg = tiny_config.replace(epochs=4, checkpoint_every=3)
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b", stop_after=2)
    run_training(cfg, tmp_path / "b", resume=load_checkpoint(tmp_path / "b" / "checkpoint.udml"))
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
