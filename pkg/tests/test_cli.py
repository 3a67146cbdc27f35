import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from slicealign.cli import main
from slicealign.image import read_masks, read_volume


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph")
    assert main(["gen-phantom", "--seed", "7", "--size", "128", "--out", str(out)]) == 0
    return out


def test_gen_phantom_is_byte_identical(tmp_path, phantom_dir):
    assert main(["gen-phantom", "--seed", "7", "--size", "128", "--out", str(tmp_path)]) == 0
    assert tree_bytes(tmp_path) == tree_bytes(phantom_dir)
    gt = json.loads((phantom_dir / "ground_truth.json").read_text())
    assert gt["seed"] == 7 and len(gt["correspondence"]) == 3
    assert read_volume(phantom_dir / "lge.raw").shape == (128, 128)


def test_gen_phantom_correspondence_flag(tmp_path):
    assert main(["gen-phantom", "--size", "64", "--correspondence", "0,2,5", "--out", str(tmp_path)]) == 0
    gt = json.loads((tmp_path / "ground_truth.json").read_text())
    assert [c["fixed"] for c in gt["correspondence"]] == [0, 2, 5]


def test_eval_self_comparison(tmp_path, phantom_dir):
    m = str(phantom_dir / "lge_masks.raw")
    assert main(["eval", "--pred", m, "--ref", m, "--labels", "MYO,ME", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert rep["dice_percent"] == {"MYO": 100.0, "ME": 100.0}
    assert rep["hd95_px"] == {"MYO": 0.0, "ME": 0.0}


def test_register_pair(tmp_path, phantom_dir):
    gt = json.loads((phantom_dir / "ground_truth.json").read_text())
    k, j = gt["correspondence"][0]["fixed"], gt["correspondence"][0]["moving"]
    rc = main(["register-pair", "--fixed", str(phantom_dir / "lge.raw"), "--fixed-index", str(k),
               "--moving", str(phantom_dir / "t1m.raw"), "--moving2", str(phantom_dir / "t2m.raw"),
               "--moving-index", str(j), "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "registration.json").read_text())
    assert rep["final_loss"] <= rep["initial_loss"]
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,stage,objective"
    assert (tmp_path / "overlay_0.pgm").read_bytes().startswith(b"P5\n128 128\n255\n")


def test_align_recovers_correspondence(tmp_path, phantom_dir):
    assert main(["align", "--phantom", str(phantom_dir), "--overlays", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "matches.json").read_text())
    gt = json.loads((phantom_dir / "ground_truth.json").read_text())
    assert [(m["fixed"], m["moving"]) for m in rep["matches"]] == \
        [(c["fixed"], c["moving"]) for c in gt["correspondence"]]
    assert all(c["myocardium_dice_percent"] >= 90.0 for c in rep["mask_check"])
    meta = json.loads((tmp_path / "t1m_registered.json").read_text())
    assert sum(meta["present"]) == 3
    assert len(list(tmp_path.glob("overlay_*.pgm"))) == 3


def test_fuse_demo(tmp_path):
    assert main(["fuse-demo", "--size", "64", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "fusion_report.json").read_text())
    assert rep["all_pass"] is True


def test_inputs_are_not_mutated(tmp_path, phantom_dir):
    before = tree_bytes(phantom_dir)
    m = str(phantom_dir / "mapping_masks.raw")
    main(["eval", "--pred", m, "--ref", m, "--out", str(tmp_path)])
    assert tree_bytes(phantom_dir) == before


@pytest.mark.parametrize("argv", [
    ["gen-phantom", "--bogus"],
    ["frobnicate"],
    ["eval", "--pred", "/nonexistent.raw", "--ref", "/nonexistent.raw", "--out", "/tmp"],
    ["gen-phantom", "--K", "2", "--N", "3", "--out", "/tmp/x"],
    ["eval", "--pred", "a", "--ref", "b", "--labels", "HEART", "--out", "/tmp"],
])
def test_validation_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("slicealign: error:")


def test_malformed_file_exits_2(tmp_path):
    bad = tmp_path / "bad.raw"
    bad.write_bytes(b"\x00" * 10)
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["eval", "--pred", str(bad), "--ref", str(bad), "--out", str(tmp_path)]) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SLICEALIGN_OUTPUT_DIR", str(tmp_path))
    assert main(["gen-phantom", "--size", "64"]) == 0
    assert (tmp_path / "ground_truth.json").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "slicealign", "gen-phantom", "--nope"],
                       capture_output=True, text=True)
    assert r.returncode == 2 and r.stderr.startswith("slicealign: error:")
