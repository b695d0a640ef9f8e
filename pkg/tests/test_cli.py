import json
import subprocess
import sys

import numpy as np
import pytest

from idifkin import __version__
from idifkin.cli import main
from idifkin.io import read_volume, write_volume
from idifkin.volume import LabelVolume


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--preset", "liver", "--seed", "3", "--phantom"]) == 0
    return out


def _idif_flags(d):
    return [f for n in ("aorta", "pv", "pa", "ureter") for f in (f"--idif-{n}", str(d / f"idif_{n}.csv"))]


def test_synth_outputs(synth_dir):
    for name in ("timing.json", "tac.csv", "tac.truth.json", "provenance.json", "phantom_mask.f32raw"):
        assert (synth_dir / name).exists()
    assert len(list((synth_dir / "pet").glob("frame_*.f32raw"))) == 62


def test_synth_is_byte_identical(tmp_path):
    for run in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / run), "--seed", "5", "--noise-sd", "0.3"]) == 0
    for name in ("tac.csv", "idif_pv.csv", "tac.truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # provenance differs only in the echoed output directory
    prov = [json.loads((tmp_path / run / "provenance.json").read_text()) for run in ("a", "b")]
    for p in prov:
        p["config"].pop("out")
    assert prov[0] == prov[1]


def test_fit_writes_report_curves_and_provenance(synth_dir, tmp_path):
    args = ["fit", "--tac", str(synth_dir / "tac.csv"), *_idif_flags(synth_dir), "--preset", "liver", "--out", str(tmp_path)]
    assert main(args) == 0
    report = json.loads((tmp_path / "fit_report.json").read_text())
    assert set(report["fits"]) == {"baseline", "multi"}
    assert report["fits"]["multi"]["mse"] <= report["fits"]["baseline"]["mse"]
    assert report["relative_mse_change_pct"] < 0
    lines = (tmp_path / "fitted_curves.csv").read_text().splitlines()
    assert lines[0] == "frame_start_s,frame_duration_s,frame_mid_s,curve,value_kbq_ml"
    assert len(lines) == 1 + 3 * 62
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["tool_version"] == __version__
    assert prov["config"]["preset"] == "liver"
    assert str(synth_dir / "tac.csv") in prov["input_digests"]
    assert "timestamp" not in json.dumps(prov)


def test_fit_missing_ureter_file_names_it(synth_dir, tmp_path, capsys):
    missing = tmp_path / "no_such_ureter.csv"
    args = [
        "fit", "--tac", str(synth_dir / "tac.csv"),
        "--idif-aorta", str(synth_dir / "idif_aorta.csv"),
        "--idif-ureter", str(missing),
        "--preset", "kidney", "--out", str(tmp_path / "o"),
    ]
    assert main(args) != 0
    assert str(missing) in capsys.readouterr().err


def test_fit_kidney_without_ureter_flag_fails(synth_dir, tmp_path, capsys):
    args = ["fit", "--tac", str(synth_dir / "tac.csv"), "--idif-aorta", str(synth_dir / "idif_aorta.csv"),
            "--preset", "kidney", "--out", str(tmp_path)]
    assert main(args) != 0
    assert "--idif-ureter" in capsys.readouterr().err


def test_fit_baseline_needs_only_aorta(synth_dir, tmp_path):
    args = ["fit", "--tac", str(synth_dir / "tac.csv"), "--idif-aorta", str(synth_dir / "idif_aorta.csv"),
            "--preset", "liver", "--mode", "baseline", "--out", str(tmp_path)]
    assert main(args) == 0
    assert set(json.loads((tmp_path / "fit_report.json").read_text())["fits"]) == {"baseline"}


def test_paramap_maps_and_diffs(synth_dir, tmp_path):
    args = ["paramap", "--pet-dir", str(synth_dir / "pet"), "--mask", str(synth_dir / "phantom_mask.f32raw"),
            "--label", "region_b", *_idif_flags(synth_dir), "--preset", "liver", "--mode", "both",
            "--fine-step-s", "1.0", "--threads", "2", "--out", str(tmp_path)]
    assert main(args) == 0
    for name in ("k1", "k2", "k3", "v_b"):
        base = read_volume(tmp_path / f"baseline_{name}.f32raw")
        multi = read_volume(tmp_path / f"multi_{name}.f32raw")
        diff = read_volume(tmp_path / f"diff_{name}.f32raw")
        inside = ~np.isnan(base.data)
        np.testing.assert_allclose(diff.data[inside], multi.data[inside] - base.data[inside], atol=1e-6)
        assert np.isnan(diff.data[~inside]).all()
    mask = read_volume(synth_dir / "phantom_mask.f32raw")
    assert np.array_equal(~np.isnan(read_volume(tmp_path / "multi_k1.f32raw").data), mask.data == 2)
    assert json.loads((tmp_path / "failed_voxels.json").read_text()) == []


def test_extract_idif_uses_label_names(synth_dir, tmp_path):
    args = ["extract-idif", "--pet-dir", str(synth_dir / "pet"), "--mask", str(synth_dir / "phantom_mask.f32raw"),
            "--out", str(tmp_path)]
    assert main(args) == 0
    assert (tmp_path / "idif_region_a.csv").exists() and (tmp_path / "idif_region_b.csv").exists()


def test_extract_idif_missing_pet_dir(tmp_path, capsys):
    mask = write_volume(tmp_path / "m", LabelVolume(np.ones((2, 2, 2), np.int32), (1, 1, 1)))
    assert main(["extract-idif", "--pet-dir", str(tmp_path / "nope"), "--mask", str(mask), "--out", str(tmp_path / "o")]) != 0
    assert "nope" in capsys.readouterr().err


def _kidney_file(tmp_path, suffix=""):
    m = np.zeros((16, 16, 6), np.int32)
    m[2:14, 2:14, 1:5] = 1
    m[5:11, 5:11, 1:5] = 0
    m[11:14, 7:9, 1:5] = 0
    return write_volume(tmp_path / f"kidney{suffix}", LabelVolume(m, (2.0, 2.0, 2.0)))


@pytest.mark.parametrize("suffix", ["", ".nii.gz"])
def test_renal_pelvis_command(tmp_path, suffix):
    kidney = _kidney_file(tmp_path, suffix)
    out = tmp_path / "out"
    assert main(["renal-pelvis", "--mask", str(kidney), "--radii", "8,8,6", "--out", str(out)]) == 0
    surrogate = read_volume(out / f"renal_pelvis{suffix or '.f32raw'}", kind="label")
    assert surrogate.count() > 0
    assert not np.any((surrogate.data > 0) & (read_volume(kidney, kind="label").data > 0))
    report = json.loads((out / "renal_pelvis_report.json").read_text())
    assert report["radii_mm"] == [8.0, 8.0, 6.0]


def test_renal_pelvis_tiny_radii_fails(tmp_path, capsys):
    kidney = _kidney_file(tmp_path)
    assert main(["renal-pelvis", "--mask", str(kidney), "--radii", "0.1,0.1,0.1", "--out", str(tmp_path / "o")]) != 0
    assert "empty" in capsys.readouterr().err


def test_renal_pelvis_bad_radii_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["renal-pelvis", "--mask", "x", "--radii", "1,2", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_nearest_component_command(tmp_path):
    m = np.zeros((12, 6, 6), np.int32)
    m[0:2, 0:2, 0:2] = 1
    m[8:12, 2:6, 2:6] = 1
    mask = write_volume(tmp_path / "pv", LabelVolume(m, (1.0, 1.0, 1.0)))
    liver = np.zeros_like(m)
    liver[10, 4, 4] = 1
    ref = write_volume(tmp_path / "liver", LabelVolume(liver, (1.0, 1.0, 1.0)))
    out = tmp_path / "o"
    assert main(["nearest-component", "--mask", str(mask), "--ref-mask", str(ref), "--out", str(out)]) == 0
    kept = read_volume(out / "nearest_component.f32raw", kind="label")
    assert kept.count() == 64
    assert main(["nearest-component", "--mask", str(mask), "--reference", "1,1,1", "--out", str(out)]) == 0
    assert read_volume(out / "nearest_component.f32raw", kind="label").count() == 8


def test_cohort_command(tmp_path, capsys):
    csv_path = tmp_path / "cohort.csv"
    rows = ["subject_id,organ,mse_baseline,mse_multi"]
    rows += [f"s{i},liver,{10 + i},{8 + i * 0.9}" for i in range(9)]
    csv_path.write_text("\n".join(rows) + "\n")
    assert main(["cohort", "--cohort", str(csv_path), "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "cohort_summary.json").read_text())
    assert summary["organs"][0]["wilcoxon"]["p"] == 0.00390625
    assert "0.00391*" in (tmp_path / "o" / "cohort_table.txt").read_text()
    assert "0.00391*" in capsys.readouterr().out


def test_cohort_missing_file(tmp_path, capsys):
    assert main(["cohort", "--cohort", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) != 0
    assert "missing.csv" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "idifkin", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
