import json
import shutil

import pytest
import yaml

from onramp import cli
from onramp.forest import Forest
from onramp.pipeline import (STAGES, StageError, derive_seed, load_config, read_rows, rescore,
                             run_pipeline, run_stage)

TINY = {
    "seed": 11,
    "data": {"synthetic": {"n_ramp": 8, "n_target": 10, "noise": 0.0}},
    "lstm": {"hidden": 4, "layers": 1, "epochs": 1, "max_windows": 200},
    "cf": {"n_starts": 4, "maxiter": 60},
    "forest": {"n_trees": 3, "max_depth": 5, "horizons": [0, 3]},
}


def bundle_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "bundle"
    manifest = run_pipeline(load_config(overrides=TINY), out)
    return out, manifest


class TestRun:
    def test_sections_populated(self, bundle):
        out, manifest = bundle
        for name in ("fits.csv", "forecast_rows.csv", "classification_rows.csv", "importance_rows.csv",
                     "metrics/cf_fit.csv", "metrics/classification.csv", "metrics/importance_groups.csv",
                     "models/lstm_ramp.npz", "models/lstm_adjacent.npz", "counts.json"):
            assert (out / name).stat().st_size > 0, name
        for fam in ("idm", "gipps", "ghr"):
            rows = read_rows(out / "metrics" / f"forecast_{fam}.csv")
            assert [int(r["horizon_s"]) for r in rows] == list(range(1, 16))
        assert set(manifest["counts"]) == set(STAGES) - {"report"}
        assert manifest["seed"] == 11
        assert set(manifest["files"]) >= {"fits.csv", "counts.json", "forests/cumulative_t03.json"}

    def test_forest_registry(self, bundle):
        out, _ = bundle
        names = sorted(p.name for p in (out / "forests").iterdir())
        assert names == ["cumulative_t00.json", "cumulative_t03.json", "exact_t00.json", "exact_t03.json"]
        f = Forest.load(out / "forests" / "exact_t03.json")
        assert (f.kind, f.t, f.config.n_trees) == ("exact", 3, 3)

    def test_metrics_trace_to_rows(self, bundle):
        out, _ = bundle
        fams = {r["family"] for r in read_rows(out / "forecast_rows.csv")}
        assert fams == {"idm", "gipps", "ghr"}
        cl = read_rows(out / "metrics" / "classification.csv")
        rows = read_rows(out / "classification_rows.csv")
        for r in cl:
            mine = [x for x in rows if x["kind"] == r["kind"] and x["t"] == r["t"]]
            assert int(r["n"]) == len(mine)
            hits = sum(x["label"] == x["pred"] for x in mine)
            assert float(r["accuracy"]) == pytest.approx(hits / len(mine))

    def test_rescore_is_bit_for_bit(self, bundle, tmp_path):
        out, _ = bundle
        copy = tmp_path / "copy"
        shutil.copytree(out, copy)
        for p in (copy / "metrics").iterdir():
            p.write_text("stale\n")
        rescore(copy)
        for name in ("cf_fit.csv", "classification.csv", "forecast_idm.csv", "forecast_ghr.csv"):
            assert (copy / "metrics" / name).read_bytes() == (out / "metrics" / name).read_bytes()

    @pytest.mark.slow
    def test_deterministic(self, bundle, tmp_path):
        out, _ = bundle
        again = tmp_path / "bundle"
        run_pipeline(load_config(overrides=TINY), again)
        assert bundle_bytes(again) == bundle_bytes(out)


class TestStages:
    def test_missing_input_is_tagged(self, tmp_path):
        with pytest.raises(StageError) as err:
            run_stage("scenes", load_config(overrides=TINY), tmp_path / "empty")
        assert err.value.stage == "scenes" and "ingest" in str(err.value)

    def test_missing_data_file(self, tmp_path):
        cfg = load_config(overrides={"data": {"source": "files", "files": {1: str(tmp_path / "nope.txt")}}})
        with pytest.raises(StageError, match=r"\[ingest\]"):
            run_stage("ingest", cfg, tmp_path / "out")

    def test_derive_seed(self):
        assert derive_seed(0, "forest", "exact", 3) == derive_seed(0, "forest", "exact", 3)
        assert derive_seed(0, "forest", "exact", 3) != derive_seed(0, "forest", "exact", 4)
        assert derive_seed(1, "a") != derive_seed(2, "a")


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg["split"] == {"train": [1, 3], "test": [2]}
        assert cfg["forest"]["n_trees"] == 100 and cfg["forest"]["feature_subset_size"] == 7

    def test_file_merge_and_relative_paths(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"seed": 5, "lstm": {"epochs": 2},
                                        "data": {"source": "files", "files": {2: "raw/w2.txt"}}}))
        cfg = load_config(path, {"lstm": {"hidden": 8}})
        assert cfg["seed"] == 5
        assert (cfg["lstm"]["epochs"], cfg["lstm"]["hidden"], cfg["lstm"]["layers"]) == (2, 8, 4)
        assert cfg["data"]["files"][2] == str(tmp_path / "raw" / "w2.txt")


class TestCli:
    def test_synth(self, tmp_path, capsys):
        assert cli.main(["synth", str(tmp_path / "raw.csv"), "--n-ramp", "2", "--n-target", "2"]) == 0
        assert "wrote 4 vehicles" in capsys.readouterr().out
        assert (tmp_path / "raw.csv").read_text().startswith("vehicle_id,t,x,y")

    def test_stage_error_exit_code(self, tmp_path):
        assert cli.main(["fit", "--out", str(tmp_path / "b")]) == 1

    def test_bad_family_rejected(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["fit", "--family", "krauss"])
        assert err.value.code == 2

    def test_overrides(self, tmp_path):
        args = cli.build_parser().parse_args(["fit", "--family", "ghr", "--family", "idm", "--horizon", "4",
                                              "--seed", "9"])
        cfg = cli._config(args)
        assert cfg["cf"]["families"] == ["idm", "ghr"]
        assert cfg["forest"]["horizons"] == [4] and cfg["seed"] == 9

    def test_stage_by_stage(self, tmp_path):
        cfg_path = tmp_path / "tiny.yaml"
        cfg_path.write_text(yaml.safe_dump(TINY))
        out = tmp_path / "b"
        common = ["--config", str(cfg_path), "--out", str(out), "--family", "gipps", "--horizon", "0"]
        for stage in STAGES:
            assert cli.main([stage, *common]) == 0, stage
        assert {r["family"] for r in read_rows(out / "fits.csv")} == {"gipps"}
        assert [p.name for p in (out / "forests").iterdir()] != []
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["cf"]["families"] == ["gipps"]
