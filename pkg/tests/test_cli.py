import csv
import json

import numpy as np
import pytest
from filelock import FileLock

from vis2therm.cli import main
from vis2therm.data import BoundingBox, load_manifest
from vis2therm.detector import Detection
from vis2therm.pipeline import FN_COLOR, FP_COLOR, TP_COLOR, overlay_frame

SMALL = [
    "gan.base_channels=4",
    "gan.num_rrdb=1",
    "gan.growth_rate=2",
    "disc.base_features=4",
    "disc.num_scales=1",
    "gan.max_steps=3",
    "gan.batch_size=2",
    "detector.width=4",
    "detector.backbone_depth=1,1,1,1,1",
    "schedule.max_epochs=1",
    "phi.tap_layer=stages.stage3",
    "data.min_height=20",
    "eval.min_height=20",
]


def run(*args, sets=()):
    argv = list(args)
    for s in list(SMALL) + list(sets):
        argv += ["--set", s]
    return main(argv)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(
        ["toy-data", "--out", str(root / "data"), "--seed", "1"]
        + sum((["--set", s] for s in ("toy.n_train=6", "toy.n_test=6", "toy.height=64", "toy.width=64")), [])
    )
    assert code == 0
    return root, root / "data" / "toy.cfg"


def test_toy_data_layout(toy):
    root, cfg = toy
    assert len(load_manifest(root / "data" / "train.tsv")) == 6
    assert "schedule.input_size = 64,64" in cfg.read_text()


def test_gan_loss_log_has_one_row_per_step(toy, capsys):
    root, cfg = toy
    assert run("train-gan", "--config", str(cfg), "--out", str(root / "gan")) == 0
    with open(root / "gan" / "gan_loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"step", "adversarial", "mae", "perceptual", "total", "discriminator"}
    assert "checkpoint\t" in capsys.readouterr().out


def test_stage_chain_and_curve_files(toy, capsys):
    root, cfg = toy
    c = ["--config", str(cfg)]
    if not (root / "gan" / "gan.ckpt").exists():
        assert run("train-gan", *c, "--out", str(root / "gan")) == 0
    assert run("synthesize", *c, "--out", str(root / "syn"), sets=[f"gan_checkpoint={root / 'gan' / 'gan.ckpt'}"]) == 0
    syn = [f"synthetic_manifest={root / 'syn' / 'synthetic.tsv'}"]
    assert run("build-mixture", *c, "--out", str(root / "mix"), "--regime", "mixed-50", sets=syn) == 0
    mix = load_manifest(root / "mix" / "mixture_mixed-50.tsv")
    assert mix.meta["real_count"] == "3" and len(mix) == 6
    assert run("train-detector", *c, "--out", str(root / "det"), "--regime", "mixed-50", sets=syn) == 0
    with open(root / "det" / "train_log.csv") as fh:
        assert [float(r["lr"]) for r in csv.DictReader(fh)] == [1e-3]
    capsys.readouterr()
    assert run("evaluate", *c, "--out", str(root / "det"), "--overlays", sets=[f"detector_checkpoint={root / 'det' / 'detector.ckpt'}"]) == 0
    out = capsys.readouterr().out
    assert "lamr_all\t" in out
    curves = sorted((root / "det").glob("curve_*.tsv"))
    assert root / "det" / "curve_all.tsv" in curves
    for path in curves:
        for line in path.read_text().splitlines():
                fppi, mr = (float(v) for v in line.split("\t"))
                assert fppi >= 0 and 0 <= mr <= 1
    report = json.loads((root / "det" / "report.json").read_text())
    assert report["meta"]["seed"] == 1 and len(report["meta"]["config_digest"]) == 64
    assert len(list((root / "det" / "overlays").glob("*.png"))) == 6


def test_missing_manifest_is_config_error(tmp_path, capsys):
    assert main(["train-gan", "--out", str(tmp_path)]) == 2
    assert "'train_manifest'" in capsys.readouterr().err


def test_nonexistent_path_names_key(toy, tmp_path, capsys):
    _, cfg = toy
    code = main(["evaluate", "--config", str(cfg), "--out", str(tmp_path), "--set", f"detector_checkpoint={tmp_path / 'x.ckpt'}"])
    assert code == 2
    assert "'detector_checkpoint'" in capsys.readouterr().err


def test_corrupt_checkpoint_is_config_error(toy, tmp_path, capsys):
    _, cfg = toy
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path), "--set", f"detector_checkpoint={bad}"]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_key_and_bad_regime(toy, tmp_path):
    _, cfg = toy
    assert main(["train-gan", "--config", str(cfg), "--out", str(tmp_path), "--set", "gan.nope=1"]) == 2
    assert main(["build-mixture", "--config", str(cfg), "--out", str(tmp_path), "--regime", "half"]) == 2


def test_divergence_is_runtime_error(toy, tmp_path, capsys):
    _, cfg = toy
    code = run("train-detector", "--config", str(cfg), "--out", str(tmp_path), sets=["schedule.init_lr_high=1e30", "schedule.grad_clip=none"])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_locked_output_directory(toy, tmp_path, capsys):
    _, cfg = toy
    with FileLock(str(tmp_path / ".vis2therm.lock")):
        assert main(["build-mixture", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert "in use" in capsys.readouterr().err


def test_list_regimes(capsys):
    assert main(["train-detector", "--list-regimes"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 12 and lines[0] == "synthesized\t0" and lines[-1] == "combined\t0.5"


def test_overlay_colors():
    thermal = np.zeros((1, 64, 64), np.float32)
    gts = [BoundingBox(2, 2, 10, 20), BoundingBox(30, 2, 10, 20)]
    dets = [Detection(BoundingBox(2, 2, 10, 20), 0.9), Detection(BoundingBox(20, 40, 10, 20), 0.8)]
    img = np.asarray(overlay_frame(thermal, dets, gts))
    assert tuple(img[2, 5]) == TP_COLOR  # top edge of the matched box
    assert tuple(img[2, 35]) == FN_COLOR  # missed ground truth
    assert tuple(img[40, 25]) == FP_COLOR  # unmatched detection
    assert tuple(img[30, 5]) == (0, 0, 0)
