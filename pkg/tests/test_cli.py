"""Command-line surface: exit codes, file outputs, manifests, and the
pipeline subcommands wired end to end on tiny inputs."""

import json
import os

import numpy as np
import pytest

from fovx import nnet, phantom
from fovx.cli import main
from fovx.core import Grid3
from fovx.nifti import read_nifti
from fovx.preprocess import FovCut
from fovx.training import TrainConfig


@pytest.fixture(scope="module")
def scan_dir(tmp_path_factory):
    """One tiny phantom written through the CLI, reused by the pipeline tests."""
    out = str(tmp_path_factory.mktemp("scan"))
    rc = main(["phantom", "--grid", "16", "--spacing", "2", "--dirs", "6", "--n-b0", "1",
               "--sigma", "0", "--seed", "3", "--out-dir", out])
    assert rc == 0
    return out


def _dwi_args(d):
    return ["--bval", os.path.join(d, "dwi.bval"), "--bvec", os.path.join(d, "dwi.bvec")]


def test_no_arguments_prints_usage():
    assert main([]) == 1


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("fovx ")


def test_unknown_subcommand_exits_1():
    assert main(["frobnicate"]) == 1


def test_phantom_writes_files_and_manifest(scan_dir):
    names = ["dwi.nii", "dwi.bval", "dwi.bvec", "t1.nii", "brain.nii", "bundles.nii",
             "truth_tensors.nii", "truth_fa.nii", "truth_md.nii", "truth_v1.nii",
             "manifest.json"]
    for n in names:
        assert os.path.exists(os.path.join(scan_dir, n)), n
    with open(os.path.join(scan_dir, "manifest.json")) as f:
        man = json.load(f)
    assert man["command"] == "phantom"
    assert man["seed"] == 3
    assert man["config"]["grid"] == 16


def test_truncate_then_qa_inverts(scan_dir, tmp_path):
    cut_nii = str(tmp_path / "cut.nii")
    cut_json = str(tmp_path / "cut.json")
    rc = main(["truncate", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
               "--side", "top", "--mm", "8", "--out", cut_nii, "--cut-json", cut_json])
    assert rc == 0
    with open(cut_json) as f:
        cut = FovCut.from_json(f.read())
    assert cut.side == "top"
    assert cut.n_slices == 4

    report = str(tmp_path / "qa.csv")
    rc = main(["qa", "--in", cut_nii, *_dwi_args(scan_dir),
               "--mask", os.path.join(scan_dir, "brain.nii"), "--report", report])
    assert rc == 0
    rows = open(report).read().strip().split("\n")
    assert rows[0] == "scan_id,side,cut_mm"
    sid, side, mm = rows[1].split(",")
    assert side == "top"
    assert abs(float(mm) - 8.0) <= 2.0  # within one slice


def test_qa_reports_none_on_complete_scan(scan_dir, capsys):
    rc = main(["qa", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
               "--mask", os.path.join(scan_dir, "brain.nii")])
    assert rc == 0
    assert ",none,0" in capsys.readouterr().out


def test_fit_dti_outputs(scan_dir, tmp_path):
    fa = str(tmp_path / "fa.nii")
    v1 = str(tmp_path / "v1.nii")
    rc = main(["fit-dti", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
               "--mask", os.path.join(scan_dir, "brain.nii"), "--out-fa", fa, "--out-v1", v1])
    assert rc == 0
    img = read_nifti(fa)
    assert img.grid.dims == (16, 16, 16)
    assert float(img.data.max()) <= 1.0
    assert read_nifti(v1).stack().shape == (16, 16, 16, 3)


def test_fit_dti_without_outputs_fails(scan_dir):
    rc = main(["fit-dti", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
               "--mask", os.path.join(scan_dir, "brain.nii")])
    assert rc == 1


def test_evaluate_self_agreement(scan_dir, tmp_path):
    report = str(tmp_path / "eval.json")
    dwi = os.path.join(scan_dir, "dwi.nii")
    rc = main(["evaluate", "--ref", dwi, "--test", dwi, *_dwi_args(scan_dir),
               "--mask", os.path.join(scan_dir, "brain.nii"), "--report", report])
    assert rc == 0
    with open(report) as f:
        rep = json.load(f)
    assert rep["acc_mean"] == pytest.approx(1.0, abs=1e-9)
    assert rep["psnr_wm_b0"] is None  # zero error encodes as null
    assert rep["voxels_included"] > 0


def test_train_and_impute_round_trip(scan_dir, tmp_path):
    corpus = tmp_path / "corpus" / "train" / "s0"
    corpus.mkdir(parents=True)
    for n in os.listdir(scan_dir):
        (corpus / n).write_bytes(open(os.path.join(scan_dir, n), "rb").read())
    cfg = TrainConfig(epochs=1, batch_size=4, seed=2, batches_per_epoch=1,
                      z_dim=4, base_channels=4, cut_min_mm=6.0, cut_max_mm=10.0)
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as f:
        f.write(cfg.to_json())
    ckpt = str(tmp_path / "ckpt")
    rc = main(["train", "--corpus", str(tmp_path / "corpus"), "--config", cfg_path,
               "--out-dir", ckpt])
    assert rc == 0
    assert os.path.exists(os.path.join(ckpt, "model_b0.ckpt"))
    assert os.path.exists(os.path.join(ckpt, "train_log.csv"))

    cut_nii = str(tmp_path / "cut.nii")
    cut_json = str(tmp_path / "cut.json")
    main(["truncate", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
          "--side", "top", "--mm", "8", "--out", cut_nii, "--cut-json", cut_json])
    imp = str(tmp_path / "imputed.nii")
    rc = main(["impute", "--in", cut_nii, *_dwi_args(scan_dir),
               "--structural", os.path.join(scan_dir, "t1.nii"),
               "--model-b0", os.path.join(ckpt, "model_b0.ckpt"),
               "--model-dwi", os.path.join(ckpt, "model_dwi.ckpt"),
               "--cut-json", cut_json, "--mask", os.path.join(scan_dir, "brain.nii"),
               "--out", imp])
    assert rc == 0
    out = read_nifti(imp)
    trunc = read_nifti(cut_nii)
    assert out.stack()[:, :, :12, :].tobytes() == trunc.stack()[:, :, :12, :].tobytes()
    assert float(np.abs(out.stack()[:, :, 12:, :]).max()) > 0.0


def test_impute_missing_model_file_exits_2(scan_dir, tmp_path):
    cut_json = str(tmp_path / "cut.json")
    with open(cut_json, "w") as f:
        f.write(FovCut("top", 8.0, 12, 15).to_json())
    rc = main(["impute", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
               "--structural", os.path.join(scan_dir, "t1.nii"),
               "--model-b0", str(tmp_path / "nope_b0.ckpt"),
               "--model-dwi", str(tmp_path / "nope_dwi.ckpt"),
               "--cut-json", cut_json, "--out", str(tmp_path / "o.nii")])
    assert rc == 2


def test_tract_and_compare(scan_dir, tmp_path):
    fa = str(tmp_path / "fa.nii")
    v1 = str(tmp_path / "v1.nii")
    main(["fit-dti", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
          "--mask", os.path.join(scan_dir, "brain.nii"), "--out-fa", fa, "--out-v1", v1])
    trk = str(tmp_path / "lines.json")
    occ = str(tmp_path / "occ.nii")
    rc = main(["tract", "--fa", fa, "--v1", v1, "--seeds", os.path.join(scan_dir, "bundles.nii"),
               "--out-trk", trk, "--out-mask", occ])
    assert rc == 0
    with open(trk) as f:
        lines = json.load(f)
    assert lines and len(lines[0][0]) == 3  # point lists in mm
    assert read_nifti(occ).data.max() == 1.0

    report = str(tmp_path / "cmp.csv")
    rc = main(["tract-compare", "--ref-mask", occ, "--test-mask", occ,
               "--ref-trk", trk, "--test-trk", trk, "--report", report])
    assert rc == 0
    rows = open(report).read().strip().split("\n")
    assert rows[0].startswith("kind,label,dice")
    assert rows[1].split(",")[2] == "1"  # self-comparison dice


def test_nonexistent_input_exits_2(tmp_path):
    rc = main(["qa", "--in", str(tmp_path / "missing.nii"), "--bval", "x", "--bvec", "y",
               "--mask", "z"])
    assert rc == 2


def test_evaluate_truncated_scan(scan_dir, tmp_path):
    cut_nii = str(tmp_path / "cut.nii")
    cut_json = str(tmp_path / "cut.json")
    main(["truncate", "--in", os.path.join(scan_dir, "dwi.nii"), *_dwi_args(scan_dir),
          "--side", "bottom", "--mm", "8", "--out", cut_nii, "--cut-json", cut_json])
    # slab-restricted: the zeroed test volumes have no valid fit -> everything excluded
    report = str(tmp_path / "eval_slab.json")
    rc = main(["evaluate", "--ref", os.path.join(scan_dir, "dwi.nii"), "--test", cut_nii,
               *_dwi_args(scan_dir), "--mask", os.path.join(scan_dir, "brain.nii"),
               "--cut-json", cut_json, "--report", report])
    assert rc == 0
    with open(report) as f:
        rep = json.load(f)
    assert rep["voxels_included"] == 0
    assert rep["acc_mean"] is None
    # whole-brain: acquired voxels still agree, the zeros show up in PSNR
    report = str(tmp_path / "eval_all.json")
    rc = main(["evaluate", "--ref", os.path.join(scan_dir, "dwi.nii"), "--test", cut_nii,
               *_dwi_args(scan_dir), "--mask", os.path.join(scan_dir, "brain.nii"),
               "--report", report])
    assert rc == 0
    with open(report) as f:
        rep = json.load(f)
    assert rep["voxels_included"] > 0
    assert rep["acc_mean"] == pytest.approx(1.0, abs=1e-6)
    assert rep["psnr_wm_dwi"] is not None and rep["psnr_wm_dwi"] < 60.0
