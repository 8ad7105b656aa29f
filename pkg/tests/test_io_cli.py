import json
import os

import numpy as np
import pytest

from dfcformer import io
from dfcformer.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from dfcformer.dfc import BoldSeries
from dfcformer.exceptions import ConfigError, DataError

TINY = {
    "synth": {"n_subjects_per_group": 4, "n_rois": 4, "n_timepoints": 60},
    "window": {"length": 20, "stride": 5},
    "model": {"d_model": 8, "heads": 2, "ffn_hidden": 8, "conv_kernel": 2, "conv_stride": 1,
              "conv_channels": 8, "embed_dim": 4},
    "train": {"epochs": 2, "lr": 1e-2},
    "eval": {"folds": 2},
}


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return str(path)


def read_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def tiny_cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    config = write_json(root / "config.json", TINY)
    assert main(["synth", "--config", config, "--out", str(root / "data")]) == EXIT_OK
    return config, str(root / "data" / "manifest.json")


# --- formats -----------------------------------------------------------------------------


def test_scan_round_trip(tmp_path):
    series = BoldSeries("s", "s_0", 1, np.random.default_rng(0).standard_normal((6, 3)), ("a", "b", "c"))
    io.write_scan(tmp_path / "x.csv", series)
    back = io.read_scan(tmp_path / "x.csv", "s", "s_0", 1)
    np.testing.assert_array_equal(back.samples, series.samples)
    assert back.roi_names == ("a", "b", "c")


def test_malformed_scan_files(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError):
        io.read_scan(tmp_path / "bad.csv", "s", "s", 0)
    (tmp_path / "wide.csv").write_text("a,b\n1,2,3\n4,5,6\n")
    with pytest.raises(DataError, match="header"):
        io.read_scan(tmp_path / "wide.csv", "s", "s", 0)


@pytest.mark.parametrize("doc, match", [
    ([], "non-empty"),
    ([{"subject_id": "a", "scan_id": "a", "label": "AD", "path": "a.csv"}], "NC or MCI"),
    ([{"subject_id": "a", "scan_id": "a", "label": "NC"}], "exactly"),
    ([{"subject_id": "a", "scan_id": "a", "label": "NC", "path": "a.csv"},
      {"subject_id": "b", "scan_id": "a", "label": "MCI", "path": "b.csv"}], "duplicate"),
])
def test_manifest_validation(tmp_path, doc, match):
    with pytest.raises(DataError, match=match):
        io.read_manifest(write_json(tmp_path / "m.json", doc))


def test_config_parsing():
    config = io.parse_config(TINY)
    assert config.window.length == 20 and config.model.conv_channels == 8
    assert io.parse_config({}).train.lr == 2e-6
    with pytest.raises(ConfigError, match="unknown key"):
        io.parse_config({"train": {"learning_rate": 1.0}})
    with pytest.raises(ConfigError, match="unknown config section"):
        io.parse_config({"optimizer": {}})
    with pytest.raises(ConfigError):
        io.parse_config({"eval": {"folds": 1}})
    json.dumps(config.echo())


# --- commands -------------------------------------------------------------------------------


def test_synth_default_cohort_layout(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert "subjects 60  scans 60  N 12  L_total 200" in capsys.readouterr().out
    files = read_tree(tmp_path / "a")
    assert sum(name.endswith(".csv") for name in files) == 60
    assert "manifest.json" in files
    assert main(["synth", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert read_tree(tmp_path / "b") == files


def test_synth_seed_flag_changes_data(tmp_path):
    config = write_json(tmp_path / "c.json", TINY)
    main(["synth", "--config", config, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["synth", "--config", config, "--out", str(tmp_path / "b"), "--seed", "2"])
    assert read_tree(tmp_path / "a") != read_tree(tmp_path / "b")


def test_synth_reports_uncreatable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--out", str(blocker / "sub")]) == EXIT_DATA


def test_bad_configs_exit_with_config_code(tmp_path, capsys):
    bad = write_json(tmp_path / "bad.json", {"model": {"depth": 3}})
    assert main(["synth", "--config", bad, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "depth" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["cv"]) == EXIT_CONFIG


def test_cv_missing_scan_reports_path(tmp_path, capsys):
    manifest = write_json(tmp_path / "m.json", [
        {"subject_id": "a", "scan_id": "a", "label": "NC", "path": "nowhere.csv"}])
    out = tmp_path / "r.json"
    assert main(["cv", manifest, "--out", str(out)]) == EXIT_DATA
    assert "nowhere.csv" in capsys.readouterr().err
    assert not out.exists()


def test_cv_writes_results_and_is_repeatable(tiny_cohort, tmp_path, capsys):
    config, manifest = tiny_cohort
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["cv", manifest, "--config", config, "--out", str(a)]) == EXIT_OK
    assert main(["cv", manifest, "--config", config, "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert doc["config"]["train"]["epochs"] == 2
    folds = doc["variants"]["full"]["folds"]
    assert len(folds) == 2
    for fold in folds:
        assert not set(fold["train_subjects"]) & set(fold["test_subjects"])
        assert len(fold["history"]["total"]) == 2
    assert capsys.readouterr().out.splitlines()[0].split() == ["Method", "ACC", "SEN", "SPE", "AUC", "F1"]


def test_cv_ablation_table(tiny_cohort, tmp_path, capsys):
    config, manifest = tiny_cohort
    out = tmp_path / "abl.json"
    assert main(["cv", manifest, "--config", config, "--out", str(out), "--ablate"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["Method", "ACC", "SEN", "SPE", "AUC", "F1"]
    assert [line.split()[0] for line in lines[1:]] == ["full", "s_only", "t_only", "os_fc"]
    assert set(json.loads(out.read_text())["variants"]) == {"full", "s_only", "t_only", "os_fc"}


def test_cv_variant_flag(tiny_cohort, tmp_path):
    config, manifest = tiny_cohort
    out = tmp_path / "v.json"
    assert main(["cv", manifest, "--config", config, "--out", str(out), "--variant", "os-fc"]) == EXIT_OK
    assert list(json.loads(out.read_text())["variants"]) == ["os_fc"]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "3"]) == EXIT_OK
    first = capsys.readouterr().out
    assert "FAIL" not in first and "model.full" in first
    assert main(["gradcheck", "--seed", "3"]) == EXIT_OK
    assert capsys.readouterr().out == first


def test_gradcheck_fault_injection(capsys):
    assert main(["gradcheck", "--inject-fault", "head.w"]) == EXIT_NUMERIC
    assert "failing parameter: model.full/head.w" in capsys.readouterr().out
