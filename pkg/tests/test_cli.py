import csv
import filecmp
import shutil

import numpy as np
import pytest
from PIL import Image

from centerseg import checkpoint, cli, data, gradcheck, interpret
from centerseg import tensor as T
from centerseg.train import Model

SMALL = ["--height", "16", "--width", "16", "--n-train", "6", "--n-val", "2", "--n-test", "2"]
TRAIN = ["--num-classes", "3", "--prototypes", "2", "--feature-dim", "6", "--hidden", "4", "--epochs", "1"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate-data", "--out", str(root / "ds"), "--classes", "3", "--modes", "2", *SMALL]) == 0
    assert cli.main(["train", "--dataset", str(root / "ds"), "--out", str(root / "run"), *TRAIN]) == 0
    return root


def test_generate_counts_modes(tmp_path, capsys):
    assert cli.main(["generate-data", "--out", str(tmp_path), "--classes", "4", "--modes", "3", "--seed", "7",
                     *SMALL]) == 0
    assert len(data.read_manifest(tmp_path).modes) == 12
    assert "12 modes" in capsys.readouterr().out


def test_generate_repeatable(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["generate-data", "--out", str(tmp_path / name), "--seed", "7", *SMALL]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    for sub in ("train", "val", "test"):
        assert not cmp.subdirs[sub].diff_files


def test_generate_requires_out(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate-data", "--classes", "3"])
    assert exc.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_train_outputs(run):
    out = run / "run"
    assert checkpoint.load(out / "checkpoint.bin").epoch == 1
    assert (out / "train_log.csv").exists() and (out / "config.txt").exists()


def test_train_config_file_and_override(run, tmp_path):
    (tmp_path / "c.txt").write_text(f"dataset={run / 'ds'}\nnum_classes=3\nprototypes=2\nfeature_dim=6\n"
                                    "hidden=4\nepochs=3\n")
    assert cli.main(["train", "--config", str(tmp_path / "c.txt"), "--epochs", "1", "--gumbel-noise", "false",
                     "--out", str(tmp_path / "r")]) == 0
    ck = checkpoint.load(tmp_path / "r" / "checkpoint.bin")
    assert ck.config.epochs == 1 and ck.config.gumbel_noise is False and ck.config.prototypes == 2


def test_train_bad_config(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("momentum=3\n")
    assert cli.main(["train", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "r")]) == 2
    assert "config error" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path):
    assert cli.main(["train", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 1


def test_train_resume(run, tmp_path):
    shutil.copytree(run / "run", tmp_path / "r")
    assert cli.main(["train", "--resume", str(tmp_path / "r" / "checkpoint.bin"), "--epochs", "2",
                     "--out", str(tmp_path / "r")]) == 0
    assert checkpoint.load(tmp_path / "r" / "checkpoint.bin").epoch == 2


def test_eval_writes_metrics_and_renders(run, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(run / "run" / "checkpoint.bin"), "--split", "test",
                     "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "metrics_test.csv")))
    assert len(rows) - 1 == 3 + 1
    assert sorted(p.name for p in (tmp_path / "pred_test").iterdir()) == ["0.png", "1.png"]


def test_eval_class_mismatch(run, tmp_path):
    cli.main(["generate-data", "--out", str(tmp_path / "ds4"), "--classes", "4", *SMALL])
    code = cli.main(["eval", "--checkpoint", str(run / "run" / "checkpoint.bin"), "--dataset", str(tmp_path / "ds4"),
                     "--out", str(tmp_path / "e")])
    assert code == 2


def test_predict(run, tmp_path):
    img = run / "ds" / "test" / "img_0.ppm"
    assert cli.main(["predict", "--checkpoint", str(run / "run" / "checkpoint.bin"), "--out", str(tmp_path),
                     str(img)]) == 0
    labels = np.asarray(Image.open(tmp_path / "img_0_labels.pgm"))
    assert labels.shape == (16, 16) and labels.max() < 3


def test_inspect_prototypes(run, tmp_path):
    ck = str(run / "run" / "checkpoint.bin")
    for name in ("a", "b"):
        assert cli.main(["inspect-prototypes", "--checkpoint", ck, "--out", str(tmp_path / name)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "exemplars.csv")))
    assert len(rows) == 3 * 2
    for f in ("exemplars.csv", "projection.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    proj = list(csv.DictReader(open(tmp_path / "a" / "projection.csv")))
    assert {r["class"] for r in proj} <= {"0", "1", "2"} and len(proj) > 6


def test_inspect_planted_prototype(run, tmp_path):
    ck = checkpoint.load(run / "run" / "checkpoint.bin")
    model = Model.from_checkpoint(ck)
    manifest = data.read_manifest(run / "ds")
    images, labels = data.load_split(manifest, "train")
    with T.default_dtype(np.float32):
        feats = model.features(images[3]).data
    centers, valid, _ = interpret.patch_centers(feats, labels[3], 3, 4, (2, 2))
    p = int(np.flatnonzero(valid[1])[0])
    ck.bank.prototypes[1, 0] = centers[1, p]
    checkpoint.save(ck, tmp_path / "planted.bin")
    assert cli.main(["inspect-prototypes", "--checkpoint", str(tmp_path / "planted.bin"),
                     "--out", str(tmp_path / "o")]) == 0
    rows = {(r["k"], r["i"]): r for r in csv.DictReader(open(tmp_path / "o" / "exemplars.csv"))}
    assert float(rows[("1", "0")]["distance"]) == pytest.approx(0.0, abs=1e-5)
    assert rows[("1", "0")]["sample"] == "3"


def test_grad_check_report(capsys):
    assert cli.main(["grad-check"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split()[0] for ln in lines] == list(gradcheck.TERMS)
    assert all(ln.endswith("ok") for ln in lines)


def test_grad_check_detects_corruption(monkeypatch, capsys):
    real = gradcheck.loss_fp1

    def corrupted(distances, target):
        out = real(distances, target)
        return T.straight_through(out.data, out * 1.5)  # same value, gradient scaled by 1.5

    monkeypatch.setattr(gradcheck, "loss_fp1", corrupted)
    assert cli.main(["grad-check"]) == 1
    out = capsys.readouterr().out
    assert "fp1" in out and "FAIL" in out
