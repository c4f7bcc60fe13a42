import csv
import subprocess
import sys

import numpy as np
import pytest

from gcolearn import pnm
from gcolearn.cli import main


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Tiny end-to-end pipeline through the CLI entry point."""
    root = tmp_path_factory.mktemp("cli")
    data, ck = root / "data", root / "m.gckp"
    assert main(["gen-data", "--classes", "6", "--per-class", "4", "--size", "32", "--seed", "1",
                 "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--epochs", "1", "--episodes-per-epoch", "2", "--k", "2",
                 "--seed", "0", "--out", str(ck)]) == 0
    return root, data, ck


def test_train_outputs(run):
    root, _, ck = run
    assert ck.exists() and (root / "m.loss.png").exists()
    rows = list(csv.reader(open(root / "m.loss.csv")))
    assert rows[0] == ["step", "l_sal", "l_ctm", "l_cls", "total"] and len(rows) == 3


def test_eval(run, capsys):
    root, data, ck = run
    report = root / "rep" / "eval.csv"
    assert main(["eval", "--ckpt", str(ck), "--data", str(data), "--split", "eval", "--report", str(report)]) == 0
    rows = list(csv.reader(open(report)))
    assert rows[0] == ["group", "n_images", "Emax", "S", "Fmax", "MAE"]
    assert rows[-1][0] == "ALL" and len(rows) == 4
    assert (root / "rep" / "eval.png").exists()
    assert "ALL" in capsys.readouterr().out


def test_infer_and_attention(run):
    root, data, ck = run
    group = data / "eval" / "cross"
    out = root / "maps"
    assert main(["infer", "--ckpt", str(ck), "--group", str(group), "--out", str(out)]) == 0
    maps = sorted(out.glob("*.pgm"))
    assert len(maps) == 4
    first = pnm.read_gray(maps[0])
    assert first.shape == (32, 32) and first.dtype == np.uint8
    again = root / "maps2"
    main(["infer", "--ckpt", str(ck), "--group", str(group), "--out", str(again)])
    assert all(a.read_bytes() == (again / a.name).read_bytes() for a in maps)

    att = root / "att"
    assert main(["dump-attention", "--ckpt", str(ck), "--group", str(group), "--out", str(att)]) == 0
    assert len(list(att.glob("*.att.pgm"))) == 4
    lines = (att / "attention_range.txt").read_text().splitlines()
    assert lines[0] == "file,min,max" and len(lines) == 5
    lo, hi = map(float, lines[1].split(",")[1:])
    assert 0 < lo <= hi
    img = pnm.read_gray(att / lines[1].split(",")[0])
    assert img.shape == (8, 8) and img.min() == 0 and img.max() == 255


def test_export_consensus(run):
    root, data, ck = run
    out = root / "cons.csv"
    assert main(["export-consensus", "--ckpt", str(ck), "--data", str(data), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert all(len(ln.split(",")) == 32 + 2 for ln in lines[:-1])
    assert lines[-1].startswith("# d1=") and (root / "cons.png").exists()


def test_single_image_group_rejected(run, tmp_path, capsys):
    _, data, ck = run
    (tmp_path / "g").mkdir()
    src = next((data / "eval" / "cross").glob("*.ppm"))
    (tmp_path / "g" / src.name).write_bytes(src.read_bytes())
    assert main(["infer", "--ckpt", str(ck), "--group", str(tmp_path / "g"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ValueError:")


@pytest.mark.parametrize("argv", [["eval", "--ckpt", "/nonexistent.gckp", "--data", "/nonexistent", "--report", "x"],
                                  ["train", "--data", "/nonexistent", "--out", "x"]])
def test_missing_files(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")


def test_usage_error(capsys):
    assert main(["train", "--epochs", "x"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: UsageError:")


def test_console_script_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gcolearn.cli", "eval", "--ckpt", str(tmp_path / "none"),
                           "--data", str(tmp_path), "--report", str(tmp_path / "r.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.count("\n") == 1
