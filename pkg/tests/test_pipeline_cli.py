import json

import numpy as np
import pytest

from vox2p1d.cli import main
from vox2p1d.net import build_net, load_net, save_net
from vox2p1d.pipeline import (
    config_hash,
    extract_features,
    extract_stage_hash,
    load_config,
)
from vox2p1d.tensor import read_array
from vox2p1d.volumes import load_manifest, permute_labels

SPEC = {
    "n_per_class": 5,
    "dims": [16, 20, 16],
    "noise_sigma": 0.05,
    "seed": 31,
    "effect_regions": [
        {"center": [8, 10, 8], "radius": 3, "delta": {"gm": 0.2, "wm": 0.2, "csf": 0.2}}
    ],
}

# slice counts here are below what the deep net accepts, so pipeline tests
# run the linear-head ablation unless stated otherwise
CONFIG = {
    "manifest": "cohort/manifest.json",
    "out_dir": "cvout",
    "seed": 5,
    "n_folds": 3,
    "n_repeats": 1,
    "extractor": {
        "stub": {
            "seed": 2,
            "descriptor": {"input_height": 16, "input_width": 16, "out_dims": [3, 3, 32]},
        }
    },
    "train": {"epochs": 4},
    "ablation": {"skip_net1d": True},
    "jobs": 1,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    (root / "spec.json").write_text(json.dumps(SPEC))
    assert main(["synth", "--spec", str(root / "spec.json"), "--out", str(root / "cohort")]) == 0
    (root / "config.json").write_text(json.dumps(CONFIG))
    return root


def test_synth_writes_cohort(workspace):
    manifest = load_manifest(workspace / "cohort/manifest.json")
    assert len(manifest.subjects) == 10
    files = list((workspace / "cohort/volumes").glob("*.v21t"))
    assert len(files) == 30


def test_synth_rerun_identical_bytes(workspace, tmp_path):
    spec_path = workspace / "spec.json"
    assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "again")]) == 0
    for f in sorted((workspace / "cohort/volumes").glob("*.v21t")):
        other = tmp_path / "again/volumes" / f.name
        assert f.read_bytes() == other.read_bytes()


def test_synth_invalid_spec_exit_code(tmp_path, capsys):
    bad = dict(SPEC, noise_sigma=-1)
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["synth", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_extract_builds_expected_files(workspace):
    config = load_config(workspace / "config.json")
    feat_dir = extract_features(config)
    files = sorted(p.name for p in feat_dir.glob("*.v21t"))
    assert len(files) == 10 * 3 * 3
    maps = read_array(feat_dir / "sz000_gm_axial.v21t")
    # dims 16x20x16 pad to even, subvolumes 8x10x8: axial N=8
    assert maps.shape == (8, 3, 3, 32)
    assert maps.min() >= 0.0


def test_extract_cache_hit_touches_nothing(workspace):
    config = load_config(workspace / "config.json")
    feat_dir = extract_features(config)
    stamps = {p.name: p.stat().st_mtime_ns for p in feat_dir.iterdir()}
    feat_dir2 = extract_features(config)
    assert feat_dir2 == feat_dir
    assert {p.name: p.stat().st_mtime_ns for p in feat_dir.iterdir()} == stamps


def test_extract_cache_rebuild_byte_identical(workspace):
    config = load_config(workspace / "config.json")
    feat_dir = extract_features(config)
    name = "sz000_wm_coronal.v21t"
    before = (feat_dir / name).read_bytes()
    for p in feat_dir.iterdir():
        p.unlink()
    feat_dir.rmdir()
    extract_features(config)
    assert (feat_dir / name).read_bytes() == before


def test_extract_hash_ignores_labels(workspace):
    config = load_config(workspace / "config.json")
    manifest = load_manifest(config.manifest)
    permuted_path = workspace / "cohort/manifest_permuted.json"
    from vox2p1d.volumes import save_manifest

    save_manifest(permute_labels(manifest, seed=3), permuted_path)
    doc = dict(CONFIG, manifest="cohort/manifest_permuted.json")
    (workspace / "config_perm.json").write_text(json.dumps(doc))
    permuted_config = load_config(workspace / "config_perm.json")
    assert extract_stage_hash(permuted_config) == extract_stage_hash(config)
    assert config_hash(permuted_config) != config_hash(config)


def test_skip_decomposition_full_resolution(workspace):
    doc = dict(CONFIG, out_dir="cvout_nodecomp")
    doc["ablation"] = {"skip_net1d": True, "skip_decomposition": True}
    (workspace / "config_nd.json").write_text(json.dumps(doc))
    config = load_config(workspace / "config_nd.json")
    feat_dir = extract_features(config)
    maps = read_array(feat_dir / "sz000_gm_axial.v21t")
    assert maps.shape == (16, 3, 3, 32)  # padded z dim, no down-sampling


def test_cv_produces_report_and_summary(workspace):
    assert main(["cv", "--config", str(workspace / "config.json")]) == 0
    report = json.loads((workspace / "cvout/cv_report.json").read_text())
    assert len(report["cells"]) == 3
    assert "config_hash" in report
    summary = (workspace / "cvout/summary.txt").read_text()
    header = [l for l in summary.splitlines() if "ROC-AUC" in l][0]
    assert header.index("Acc") < header.index("Sp") < header.index("Se") < header.index("ROC-AUC")
    assert "115,259" in summary and "not comparable" in summary


def test_cv_byte_identical_reruns(workspace, tmp_path):
    doc = dict(CONFIG, out_dir=str(tmp_path / "a"))
    (workspace / "config_a.json").write_text(json.dumps(doc))
    doc["out_dir"] = str(tmp_path / "b")
    (workspace / "config_b.json").write_text(json.dumps(doc))
    assert main(["cv", "--config", str(workspace / "config_a.json")]) == 0
    assert main(["cv", "--config", str(workspace / "config_b.json")]) == 0
    assert (tmp_path / "a/cv_report.json").read_bytes() == (
        tmp_path / "b/cv_report.json"
    ).read_bytes()


def test_report_command(workspace, capsys):
    assert main(["report", "--report", str(workspace / "cvout/cv_report.json")]) == 0
    out = capsys.readouterr().out
    assert "repeat seeds" in out
    assert "per-cell fused accuracy" in out


def test_report_missing_file_exit_code(tmp_path, capsys):
    assert main(["report", "--report", str(tmp_path / "nope.json")]) == 2


def test_cache_env_override(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("VOX2P1D_CACHE", str(tmp_path / "cache_override"))
    config = load_config(workspace / "config.json")
    feat_dir = extract_features(config)
    assert str(feat_dir).startswith(str(tmp_path / "cache_override"))


def test_config_validation_requires_one_extractor(workspace):
    doc = dict(CONFIG)
    doc["extractor"] = {
        "stub": {"seed": 1},
        "import_dir": "somewhere",
    }
    (workspace / "config_two.json").write_text(json.dumps(doc))
    with pytest.raises(Exception):
        load_config(workspace / "config_two.json")


def test_parameter_counts_in_report(workspace):
    report = json.loads((workspace / "cvout/cv_report.json").read_text())
    counts = report["parameter_counts"]
    # linear head on 4x3x3x8 pooled features: 288*2 + 2
    assert counts["gm_axial"] == 4 * 3 * 3 * 8 * 2 + 2
    assert counts["total"] == sum(counts[nm] for nm in report["branches"])


def test_manifest_embeds_spec_hash(workspace):
    import hashlib

    doc = json.loads((workspace / "cohort/manifest.json").read_text())
    expected = hashlib.sha256((workspace / "spec.json").read_bytes()).hexdigest()
    assert doc["config_hash"] == expected


def test_skip_global_pooling_parameter_counts(workspace):
    from vox2p1d.net import parameter_count_for
    from vox2p1d.pipeline import branch_dimensions

    doc = dict(CONFIG, out_dir="cvout_gp")
    doc["ablation"] = {"skip_global_pooling": True}
    (workspace / "config_gp.json").write_text(json.dumps(doc))
    config = load_config(workspace / "config_gp.json")
    feat_dir = extract_features(config)
    dims = branch_dimensions(config, feat_dir)
    # axial N=8, CH=32: full maps feed the net (J=N, K=CH)
    assert dims["gm_axial"]["j"] == 8 and dims["gm_axial"]["k"] == 32
    assert dims["gm_axial"]["parameters"] == parameter_count_for(8, 32)
    assert dims["gm_axial"]["parameters"] > parameter_count_for(4, 8)


def test_net_bundle_round_trip(tmp_path):
    net = build_net(8, 4, seed=9, width=2, height=2)
    save_net(net, tmp_path / "bundle")
    meta = json.loads((tmp_path / "bundle/net.json").read_text())
    assert meta["parameter_count"] == net.parameter_count
    back = load_net(tmp_path / "bundle")
    x = np.random.default_rng(0).random((8, 2, 2, 4))
    p1, _ = net.forward(x)
    # float32 storage rounds the weights; predictions stay close
    p2, _ = back.forward(x)
    np.testing.assert_allclose(p1, p2, atol=1e-5)
    files = sorted(p.name for p in (tmp_path / "bundle").glob("*.v21t"))
    assert len(files) == 16  # 8 layers x (weights, bias)