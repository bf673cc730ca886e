import hashlib

import numpy as np
import pytest

from mtarcface.cli import run
from mtarcface.trainer import TrainConfig, lr_at, read_log


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["make-fixture", "--out", str(root / "d"), "--seed", "1", "--num-identities", "4",
                "--images-per-identity", "6"]) == 0
    return root


def test_augment_smoke(data, tmp_path):
    assert run(["augment", "--in", str(data / "d"), "--out", str(tmp_path / "m"), "--seed", "7"]) == 0
    assert sorted(p.name for p in (tmp_path / "m").iterdir()) == sorted(p.name for p in (data / "d").iterdir())
    assert run(["augment", "--in", str(data / "d"), "--out", str(tmp_path / "m2"), "--seed", "7",
                "--workers", "2"]) == 0
    assert _digest(tmp_path / "m") == _digest(tmp_path / "m2")


def test_make_fixture_deterministic(tmp_path):
    args = ["make-fixture", "--seed", "3", "--num-identities", "3", "--images-per-identity", "4",
            "--pairs-per-fold", "4", "--folds", "2"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert len((tmp_path / "a" / "pairs.txt").read_text().splitlines()) == 8


def test_data_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MTARCFACE_DATA_DIR", str(tmp_path))
    assert run(["make-fixture", "--out", "rel", "--num-identities", "2", "--images-per-identity", "2"]) == 0
    assert (tmp_path / "rel" / "id_0000").is_dir()


def test_usage_errors(capsys, tmp_path):
    assert run([]) == 1
    assert run(["no-such-command"]) == 1
    assert run(["augment", "--in", "x"]) == 1
    assert "usage: mtarcface" in capsys.readouterr().err
    assert run(["augment", "--in", "x", "--out", "y", "--bogus", "1"]) == 1


def test_runtime_error_exit_code(tmp_path):
    assert run(["augment", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_train_missing_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(f"original = {tmp_path}\nmasked = {tmp_path}\ntotal_steps = 10\nlr_decay_steps = 5\n")
    assert run(["train", "--config", str(cfg)]) == 1
    assert "out" in capsys.readouterr().err


def test_train_unknown_override(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("original = a\nmasked = b\nout = c\n")
    assert run(["train", "--config", str(cfg), "--learning_rate", "0.1"]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_plot_curves(tmp_path, capsys):
    log = tmp_path / "log.csv"
    log.write_text("step,lr,loss_total,loss_arcface,loss_mask,id_acc,mask_acc\n"
                   "0,0.1,3.0,2.5,0.7,0.1,0.5\n10,0.1,2.0,1.8,0.4,0.3,0.8\n")
    assert run(["plot-curves", "--log", str(log), "--out", str(tmp_path / "c.png")]) == 0
    png = (tmp_path / "c.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert run(["plot-curves", "--log", str(log), "--out", str(tmp_path / "d.png")]) == 0
    assert (tmp_path / "d.png").read_bytes() == png
    bad = tmp_path / "bad.csv"
    bad.write_text("step,lr,loss_total,loss_arcface,loss_mask,id_acc\n0,0.1,1,1,1,0\n")
    assert run(["plot-curves", "--log", str(bad), "--out", str(tmp_path / "e.png")]) == 2
    assert "mask_acc" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, capsys):
    """make-fixture -> augment -> train (both variants) -> eval-verify -> eval-mask -> compare -> plot."""
    d, m = tmp_path / "d", tmp_path / "m"
    ev, evm = tmp_path / "ev", tmp_path / "evm"
    assert run(["make-fixture", "--out", str(d), "--seed", "2", "--num-identities", "4",
                "--images-per-identity", "8"]) == 0
    assert run(["make-fixture", "--out", str(ev), "--seed", "2", "--num-identities", "4",
                "--images-per-identity", "4", "--first-image", "8", "--pairs-per-fold", "4",
                "--folds", "5"]) == 0
    assert run(["augment", "--in", str(d), "--out", str(m), "--seed", "3"]) == 0
    assert run(["augment", "--in", str(ev), "--out", str(evm), "--seed", "4"]) == 0
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"original = {d}\nmasked = {m}\ntotal_steps = 12\nlr_decay_steps = 8\n"
                   "batch_size = 8\nwidths = 8, 16\ndepth = 1\nembedding_dim = 16\n"
                   "log_every = 2\ncheckpoint_every = 6\nbase_lr = 0.005\n")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "mt"), "--seed", "1"]) == 0
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "base"), "--seed", "1",
                "--masked_probability", "0", "--mask_loss_weight", "0"]) == 0
    assert "masked_probability = 0.0" in (tmp_path / "base" / "config.cfg").read_text()
    results = tmp_path / "results.csv"
    for model in ("mt", "base"):
        for name, root in (("fx", ev), ("masked_fx", evm)):
            assert run(["eval-verify", "--checkpoint", str(tmp_path / model / "final.ckpt"),
                        "--data", str(root), "--pairs", str(ev / "pairs.txt"), "--folds", "5",
                        "--dataset", name, "--model", model, "--out", str(results), "--append"]) == 0
    assert len(results.read_text().splitlines()) == 5
    assert run(["eval-mask", "--checkpoint", str(tmp_path / "mt" / "final.ckpt"), "--unmasked", str(ev),
                "--masked", str(evm), "--out", str(tmp_path / "mask.csv")]) == 0
    assert (tmp_path / "mask.csv").read_text().splitlines()[0] == "dataset,model,accuracy,num_faces,threshold"
    assert run(["compare", "--results", str(results), "--proposed", "mt", "--baseline", "base",
                "--out", str(tmp_path / "table")]) == 0
    out = capsys.readouterr().out
    assert "masked_fx" in out and (tmp_path / "table.csv").exists() and (tmp_path / "table.txt").exists()
    assert run(["compare", "--results", str(results), "--proposed", "mt", "--baseline", "nope"]) == 1
    assert run(["plot-curves", "--log", str(tmp_path / "mt" / "train_log.csv"),
                "--out", str(tmp_path / "curves.png")]) == 0
    # the plotted lr column is the lr_at staircase: non-increasing, one drop at step 8
    log = read_log(tmp_path / "mt" / "train_log.csv")
    tc = TrainConfig(total_steps=12, lr_decay_steps=(8,), base_lr=0.005)
    assert log["lr"].tolist() == [lr_at(int(s), tc) for s in log["step"]]
    assert (np.diff(log["lr"]) <= 0).all() and len(set(log["lr"])) == 2
    # rerunning with identical flags reproduces every output byte for byte
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "mt2"), "--seed", "1"]) == 0
    for f in ("train_log.csv", "final.ckpt", "ckpt_000006.ckpt", "ckpt_000012.ckpt"):
        assert (tmp_path / "mt" / f).read_bytes() == (tmp_path / "mt2" / f).read_bytes()
    # resuming from the mid-run checkpoint lands on the same final state
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "mt3"), "--seed", "1"]) == 0
    (tmp_path / "mt3" / "final.ckpt").unlink()
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "mt3"), "--seed", "1",
                "--resume", str(tmp_path / "mt" / "ckpt_000006.ckpt")]) == 0
    for f in ("train_log.csv", "final.ckpt"):
        assert (tmp_path / "mt" / f).read_bytes() == (tmp_path / "mt3" / f).read_bytes()
