import json

import pytest

from buildfunc.cli import main
from buildfunc.config import RunConfig
from buildfunc.errors import ConfigError

from conftest import write_fixture


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "city", "--seed", 4,
                     "--synth.nx", 2, "--synth.ny", 2, "--synth.buildings_per_zone", 25)
    assert code == 0
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"paths": {"footprints": "city/buildings.geojson",
                                         "pois": "city/pois.geojson"},
                               "output_dir": "out", "stage2": {"k": 5}}))
    return tmp_path, cfg


class TestIngest:
    def test_fixture(self, tmp_path, capsys):
        fp, pp = write_fixture(tmp_path)
        code, out, _ = run(capsys, "ingest", "--out", tmp_path / "o",
                           "--paths.footprints", fp, "--paths.pois", pp)
        assert code == 0
        rep = json.loads((tmp_path / "o" / "ingest_report.json").read_text())["report"]
        assert rep["duplicates_dropped"] == 2
        assert rep["buildings_kept"] == 10
        assert json.loads(out)["report"] == rep

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "ingest", "--out", tmp_path,
                           "--paths.footprints", tmp_path / "x.geojson",
                           "--paths.pois", tmp_path / "y.geojson")
        assert code == 3
        assert json.loads(err)["error"] == "IoError"
        assert json.loads(err)["category"] == "data"


class TestLabel:
    def test_noise_free_matches_truth(self, synth_dir, capsys):
        root, cfg = synth_dir
        code, _, _ = run(capsys, "label", "--config", cfg, "--keep-stages")
        assert code == 0
        out = root / "out"
        for name in ("labels.geojson", "labels_stage1.geojson", "labels_stage2.geojson",
                     "manifest.json"):
            assert (out / name).exists()
        truth = {}
        for line in (root / "city" / "ground_truth.csv").read_text().splitlines()[1:]:
            bid, label, _ = line.split(",")
            truth[bid] = label
        feats = json.loads((out / "labels.geojson").read_text())["features"]
        assert {f["properties"]["id"]: f["properties"]["label"] for f in feats} == truth

    def test_rerun_same_manifest(self, synth_dir, capsys):
        root, cfg = synth_dir
        run(capsys, "label", "--config", cfg)
        first = (root / "out" / "manifest.json").read_bytes()
        run(capsys, "label", "--config", cfg, "--threads", 3)
        assert (root / "out" / "manifest.json").read_bytes() == first

    def test_k_too_large(self, synth_dir, capsys):
        _, cfg = synth_dir
        code, _, err = run(capsys, "label", "--config", cfg, "--stage2.k", 1000)
        assert code == 4
        e = json.loads(err)
        assert e["error"] == "KTooLarge" and e["stage"] == 2

    def test_bad_param_rejected_before_compute(self, synth_dir, capsys):
        root, cfg = synth_dir
        code, _, err = run(capsys, "label", "--config", cfg, "--stage1.d_max", -5)
        assert code == 2 and json.loads(err)["category"] == "config"
        assert not (root / "out").exists()

    def test_unknown_key(self, synth_dir, capsys):
        _, cfg = synth_dir
        code, _, err = run(capsys, "label", "--config", cfg, "--stage2.kk", 3)
        assert code == 2


class TestEval:
    def test_baseline_and_w1(self, synth_dir, capsys):
        root, cfg = synth_dir
        run(capsys, "label", "--config", cfg)
        code, out, _ = run(capsys, "eval", "--config", cfg, "--w", 1.0,
                           "--baseline", root / "city" / "random_labels.csv")
        assert code == 0
        res = json.loads(out)
        assert res["labels"]["bfmi"] > res["baseline"]["bfmi"]
        assert res["labels"]["bfmi"] == res["labels"]["mean_top1"]
        table = json.loads((root / "out" / "eval_comparison.json").read_text())
        assert set(table["baseline"]["delta_vs_labels"]) == {"mean_top1", "mean_cosine", "bfmi"}

    def test_unknown_ids(self, synth_dir, capsys):
        root, cfg = synth_dir
        bad = root / "bad.csv"
        bad.write_text("id,label\nnot_a_building,Residential\n")
        code, _, err = run(capsys, "eval", "--config", cfg, "--labels", bad)
        assert code == 3
        e = json.loads(err)
        assert e["error"] == "UnknownIds" and "not_a_building" in e["message"]

    def test_report(self, synth_dir, capsys):
        root, cfg = synth_dir
        run(capsys, "label", "--config", cfg)
        run(capsys, "eval", "--config", cfg)
        code, out, _ = run(capsys, "report", "--config", cfg)
        assert code == 0 and "bfmi" in out
        assert (root / "out" / "report.txt").exists()


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig.load(None)
        assert cfg.stage2.k == 7 and cfg.w == 0.5 and cfg.kde.bandwidth == 200.0

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"stage9": {}}')
        with pytest.raises(ConfigError):
            RunConfig.load(str(p))

    def test_w_range(self):
        with pytest.raises(ConfigError):
            RunConfig.load(None, {"w": 1.5})
