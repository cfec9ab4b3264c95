import subprocess
import sys

import numpy as np
import pytest

from carseg.analysis import read_matrix_csv
from carseg.cli import build_configs, main, read_config
from carseg.model import load_checkpoint
from carseg.train import read_log


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(root), "--train", "8", "--test-common", "4", "--test-rare", "4",
                 "--height", "16", "--width", "16"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "train.cfg"
    cfg.write_text("# tiny run\niterations = 4\nbatch_size = 2  # small\nchannels = 4,4,4\nfeature_dim = 4\n")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--config", str(cfg), "--lr", "0.02"]) == 0
    return out


def test_gen_data_layout(dataset):
    lines = (dataset / "index.csv").read_text().splitlines()
    assert lines[0] == "split,image_path,mask_path,fg,bg"
    assert len(lines) == 1 + 16
    assert (dataset / "images" / "train_00000.ppm").exists()


def test_train_outputs(trained):
    assert [r["step"] for r in read_log(trained / "loss.csv")] == [0, 1, 2, 3]
    assert read_log(trained / "loss.csv")[0]["lr"] == 0.02
    assert load_checkpoint(trained / "model.carm").feature_dim == 4


def test_train_reruns_byte_identical(dataset, trained, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--config", str(trained / "train.cfg"),
                 "--lr=0.02"]) == 0
    for name in ("loss.csv", "model.carm"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_eval(dataset, trained, tmp_path, capsys):
    out = tmp_path / "iou.csv"
    assert main(["eval", "--checkpoint", str(trained / "model.carm"), "--data", str(dataset),
                 "--split", "test_rare", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "class,iou" and lines[-1].startswith("mean,")
    assert capsys.readouterr().out == out.read_text()


def test_depmap(dataset, trained, tmp_path, capsys):
    assert main(["depmap", "--checkpoint", str(trained / "model.carm"), "--data", str(dataset),
                 "--out", str(tmp_path), "--scale", "2"]) == 0
    m = read_matrix_csv(tmp_path / "depmap.csv")
    assert m.shape == (4, 4)
    assert (tmp_path / "depmap.ppm").read_bytes()[:2] == b"P6"
    assert "mean off-diagonal dependency" in capsys.readouterr().out


def test_pixrel(dataset, trained, tmp_path):
    assert main(["pixrel", "--checkpoint", str(trained / "model.carm"), "--data", str(dataset),
                 "--out", str(tmp_path), "--index", "1", "--anchor", "3,5", "--scale", "1"]) == 0
    m = read_matrix_csv(tmp_path / "pixrel_1_3_5.csv")
    assert m.shape == (16, 16)


def test_pixrel_bad_anchor(dataset, trained, tmp_path):
    assert main(["pixrel", "--checkpoint", str(trained / "model.carm"), "--data", str(dataset),
                 "--out", str(tmp_path), "--anchor", "40,0"]) == 2


def test_gradcheck_seed0(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_compare_layout(dataset, tmp_path, capsys):
    assert main(["compare", "--seeds", "0,1", "--data", str(dataset), "--out", str(tmp_path),
                 "--iterations", "2", "--batch_size", "2", "--channels", "4,4,4", "--feature_dim", "4"]) == 0
    csv_lines = (tmp_path / "compare.csv").read_text().splitlines()
    assert csv_lines[0].startswith("seed,baseline_miou_rare,car_miou_rare,delta_rare")
    assert [line.split(",")[0] for line in csv_lines[1:]] == ["0", "1"]
    table = (tmp_path / "compare.txt").read_text().splitlines()
    assert table[0] == "Methods | 0 | 1"
    assert table[1].startswith("Baseline | ")
    assert table[2].startswith("Baseline + CAR | ") and "(" in table[2]
    printed = capsys.readouterr().out
    assert "Baseline + CAR" in printed


@pytest.mark.parametrize("argv", [
    ["train", "--data", "x", "--out", "y", "--bogus", "1"],
    ["eval", "--checkpoint", "x", "--data", "y", "--extra"],
    ["nosuchcommand"],
    ["gradcheck", "--nope"],
])
def test_unknown_flags_fail(argv, capsys):
    assert main(argv) != 0
    assert "usage" in capsys.readouterr().err


def test_bad_config_value(tmp_path):
    with pytest.raises(Exception, match="parse"):
        build_configs({"iterations": "many"})


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr = 0.05   # base\n\n# comment only\ncenter-scope = image\ndetach_centers = true\n")
    tc, mc = build_configs(read_config(p))
    assert tc.lr == 0.05 and tc.center_scope == "image" and tc.detach_centers
    p.write_text("no equals sign\n")
    with pytest.raises(Exception, match="key = value"):
        read_config(p)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "carseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gen-data", "train", "eval", "gradcheck", "depmap", "pixrel", "compare"):
        assert name in proc.stdout


def test_untrained_eval_near_chance(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--iterations", "0"]) == 0
    capsys.readouterr()
    main(["eval", "--checkpoint", str(tmp_path / "model.carm"), "--data", str(dataset)])
    miou = float(capsys.readouterr().out.splitlines()[-1].split(",")[1])
    print(f"untrained mIOU {miou:.3f}")
    assert np.isfinite(miou)
