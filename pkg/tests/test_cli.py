import csv
import json

import numpy as np
import pytest

from dvmsr.checkpoint import Checkpoint, load_checkpoint, pack_params, save_checkpoint
from dvmsr.cli import build_parser, main
from dvmsr.data import dataset_layout, load_dataset
from dvmsr.imaging import bicubic_resize, read_png, write_png
from dvmsr.metrics import evaluate_pair
from dvmsr.model import ModelConfig, build_model

TOY_FLAGS = ["--set", "n_rssb=1", "--set", "vimm_per_rssb=1", "--set", "channels=8"]
QUICK = ["--synthetic", "4", "--synthetic-size", "32", "--set", "train.batch=2", "--set", "train.patch=16"]


@pytest.fixture(scope="module")
def toy_ckpt(tmp_path_factory):
    cfg = ModelConfig(1, 1, 8)
    path = tmp_path_factory.mktemp("ck") / "toy.ckpt"
    save_checkpoint(Checkpoint(cfg, pack_params("param.", build_model(cfg, 5))), path)
    return path


@pytest.fixture(scope="module")
def toy_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("set")
    (root / "HR").mkdir()
    rng = np.random.default_rng(2)
    for i in range(3):
        write_png(rng.uniform(size=(28, 24, 3)), root / "HR" / f"img{i}.png")
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_for_every_subcommand(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"profile", "train", "distill", "eval", "infer"}
    assert run(capsys, "--help")[0] == 0
    for name, p in sub.choices.items():
        code, out, _ = run(capsys, name, "--help")
        assert code == 0
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in out, (name, opt)


def test_profile_student(capsys, tmp_path):
    code, out, _ = run(capsys, "profile", "--preset", "student", "--input-size", "256x256",
                       "--json", "--out-dir", tmp_path)
    assert code == 0 and "424.2 K" in out and "MAC=1" in out
    assert json.loads((tmp_path / "profile.json").read_text())["params"] == 424_188
    assert (tmp_path / "resolved_config.json").exists()
    code, out, _ = run(capsys, "profile", "--preset", "student", "--bidirectional")
    assert code == 0 and "484.7 K" in out


def test_profile_errors_exit_2(capsys, tmp_path):
    code, out, err = run(capsys, "profile", "--model-config", tmp_path / "nope.json")
    assert code == 2 and out == "" and "not found" in err
    assert run(capsys, "profile", "--set", "colour=3")[0] == 2
    assert run(capsys, "profile", "--set", "channels=0")[0] == 2
    assert run(capsys, "profile", "--input-size", "big")[0] == 2
    assert run(capsys, "bogus")[0] == 2


def test_model_config_file(capsys, tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"n_rssb": 1, "vimm_per_rssb": 1, "channels": 8}))
    code, out, _ = run(capsys, "profile", "--model-config", tmp_path / "m.json", "--json")
    assert code == 0
    doc = json.loads(out[out.index("{"):])
    assert doc["params"] < 20_000


def test_train_toy_and_resume(capsys, tmp_path):
    a = tmp_path / "a"
    base = ["train", *TOY_FLAGS, *QUICK, "--scale-factor", "2e-5", "--seed", "1"]
    code, out, _ = run(capsys, *base, "--set", "train.checkpoint_every=5", "--out-dir", a)
    assert code == 0 and (a / "final.ckpt").exists()
    assert load_checkpoint(a / "final.ckpt").iteration == 10
    snap = json.loads((a / "resolved_config.json").read_text())
    assert snap["train"]["iterations"] == 10 and snap["train"]["seed"] == 1

    b = tmp_path / "b"
    b.mkdir()
    (b / "metrics.csv").write_bytes((a / "metrics.csv").read_bytes())
    code, _, _ = run(capsys, *base, "--set", "train.checkpoint_every=5",
                     "--resume", a / "iter_5.ckpt", "--out-dir", b)
    assert code == 0
    assert (b / "metrics.csv").read_bytes() == (a / "metrics.csv").read_bytes()
    assert (b / "final.ckpt").read_bytes() == (a / "final.ckpt").read_bytes()
    with (b / "metrics.csv").open() as fh:
        assert [int(r["iteration"]) for r in csv.DictReader(fh)] == list(range(1, 11))


def test_same_seed_identical_csv(capsys, tmp_path):
    for d in ("x", "y"):
        assert run(capsys, "train", *TOY_FLAGS, *QUICK, "--val-synthetic", "1", "--scale-factor", "1e-5",
                   "--seed", "4", "--out-dir", tmp_path / d)[0] == 0
    assert (tmp_path / "x" / "metrics.csv").read_bytes() == (tmp_path / "y" / "metrics.csv").read_bytes()
    assert (tmp_path / "x" / "final.ckpt").read_bytes() == (tmp_path / "y" / "final.ckpt").read_bytes()


def test_distill_mid(capsys, tmp_path, toy_ckpt):
    code, _, _ = run(capsys, "distill", *TOY_FLAGS, *QUICK, "--scale-factor", "1e-5", "--teacher", toy_ckpt,
                     "--strategy", "mid", "--out-dir", tmp_path)
    assert code == 0
    assert "adapter.weight" in load_checkpoint(tmp_path / "final.ckpt").tensors
    assert json.loads((tmp_path / "resolved_config.json").read_text())["distill"]["strategy"] == "mid"


def test_train_needs_data(capsys, tmp_path):
    assert run(capsys, "train", *TOY_FLAGS, "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "distill", *TOY_FLAGS, *QUICK, "--teacher", tmp_path / "none.ckpt",
               "--out-dir", tmp_path)[0] == 3


def test_eval_identity_baseline(capsys, tmp_path, toy_set):
    code, out, _ = run(capsys, "eval", "--baseline", "identity", "--data", toy_set, "--out-dir", tmp_path)
    assert code == 0
    with (tmp_path / "eval.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert all(float(r["psnr_db"]) == 100.0 and float(r["ssim"]) == 1.0 for r in rows)


def test_eval_bicubic_matches_library(capsys, tmp_path, toy_set):
    assert run(capsys, "eval", "--baseline", "bicubic", "--data", toy_set, "--out-dir", tmp_path)[0] == 0
    with (tmp_path / "eval.csv").open() as fh:
        rows = {r["image"]: (float(r["psnr_db"]), float(r["ssim"])) for r in csv.DictReader(fh)}
    hr_dir, lr_dir = dataset_layout(toy_set, 4)
    for p in load_dataset(hr_dir, lr_dir, 4):
        rep = evaluate_pair(bicubic_resize(p.lr, 4), p.hr, 4)
        assert rows[p.name] == (rep.psnr_db, rep.ssim)


def test_eval_errors(capsys, tmp_path, toy_set, toy_ckpt):
    (tmp_path / "empty").mkdir()
    assert run(capsys, "eval", "--baseline", "identity", "--data", tmp_path / "empty")[0] == 2
    assert run(capsys, "eval", "--checkpoint", toy_ckpt, "--data", toy_set, "--scale", "2")[0] == 2
    assert run(capsys, "eval", "--data", toy_set)[0] == 2


def test_eval_checkpoint(capsys, toy_set, toy_ckpt):
    code, out, _ = run(capsys, "eval", "--checkpoint", toy_ckpt, "--data", toy_set)
    assert code == 0 and out.strip().splitlines()[-1].startswith("mean")


def test_infer_shape_determinism_gray(capsys, tmp_path, toy_ckpt):
    rng = np.random.default_rng(0)
    write_png(rng.uniform(size=(16, 16, 3)), tmp_path / "in.png")
    write_png(rng.uniform(size=(16, 16, 1)), tmp_path / "gray.png")
    for name in ("a", "b"):
        assert run(capsys, "infer", "--checkpoint", toy_ckpt, tmp_path / "in.png", tmp_path / f"{name}.png")[0] == 0
    out = read_png(tmp_path / "a.png")
    assert (out.height, out.width, out.channels) == (64, 64, 3)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert run(capsys, "infer", "--checkpoint", toy_ckpt, tmp_path / "gray.png", tmp_path / "g.png")[0] == 0
    assert read_png(tmp_path / "g.png").channels == 3
    assert run(capsys, "infer", "--checkpoint", toy_ckpt, tmp_path / "missing.png", tmp_path / "m.png")[0] == 3
