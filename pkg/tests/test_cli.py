import json

import pytest

from xfdreid.main import EXIT_DOMAIN_ERROR, EXIT_OK, EXIT_USAGE, dispatch
from xfdreid.retrieval import read_distance_matrix


@pytest.fixture
def fixture_dir(tmp_path):
    out = tmp_path / "fixture"
    assert dispatch(["synth", "--out-dir", str(out), "--num-ids", "16", "--seed", "3",
                     "--with-flip"]) == EXIT_OK
    return out


def _data_args(fixture_dir):
    return ["--features", str(fixture_dir / "features.xfdf"),
            "--manifest", str(fixture_dir / "manifest.csv")]


def _train_and_eval(fixture_dir, work):
    work.mkdir()
    head = work / "head.json"
    report = work / "report.json"
    assert dispatch(["train", *_data_args(fixture_dir), "--out", str(head),
                     "--max-epochs", "3", "--batch", "32"]) == EXIT_OK
    assert dispatch(["eval", *_data_args(fixture_dir),
                     "--flip-features", str(fixture_dir / "flipped.xfdf"),
                     "--head", str(head), "--rerank", "--k1", "8", "--k2", "3",
                     "--out", str(report)]) == EXIT_OK
    return head, report


class TestUsage:
    def test_help(self, capsys):
        assert dispatch(["eval", "--help"]) == EXIT_OK
        assert "--features" in capsys.readouterr().out

    def test_unknown_flag(self):
        assert dispatch(["eval", "--bogus"]) == EXIT_USAGE

    def test_missing_command(self):
        assert dispatch([]) == EXIT_USAGE

    def test_missing_input_file(self, tmp_path):
        assert dispatch(["eval", "--features", str(tmp_path / "nope.xfdf"),
                         "--manifest", str(tmp_path / "nope.csv")]) == EXIT_USAGE

    def test_domain_error(self):
        assert dispatch(["config", "--k1", "2", "--k2", "5"]) == EXIT_DOMAIN_ERROR

    @pytest.mark.parametrize("text", ["{oops", "[1, 2]", '{"base_lr": "fast"}'])
    def test_bad_config_file(self, tmp_path, text):
        path = tmp_path / "run.json"
        path.write_text(text)
        assert dispatch(["config", "--config", str(path)]) == EXIT_DOMAIN_ERROR

    def test_missing_config_file(self, tmp_path):
        assert dispatch(["config", "--config", str(tmp_path / "none.json")]) == EXIT_USAGE

    @pytest.mark.parametrize("text", ["{oops", '{"num_ids": "a"}', '{"seed": 1.5}',
                                      '{"colour": 3}'])
    def test_bad_fixture_config(self, tmp_path, text):
        path = tmp_path / "fixture.json"
        path.write_text(text)
        assert dispatch(["synth", "--out-dir", str(tmp_path / "out"),
                         "--config", str(path)]) == EXIT_DOMAIN_ERROR

    def test_bad_manifest_row(self, tmp_path):
        assert dispatch(["synth", "--out-dir", str(tmp_path / "fx"), "--num-ids", "4"]) == EXIT_OK
        features = tmp_path / "fx" / "features.xfdf"
        manifest = tmp_path / "m.csv"
        manifest.write_text(
            "tracklet_index,person_id,camera_id,domain,altitude_m,distance_m,angle_deg,split,"
            "has_flip\n0,1,0,aerial,nan,60,45,query,0\n")
        assert dispatch(["eval", "--features", str(features),
                         "--manifest", str(manifest)]) == EXIT_DOMAIN_ERROR

    def test_bad_feature_file(self, tmp_path):
        features = tmp_path / "f.xfdf"
        features.write_bytes(b"JUNK" + bytes(40))
        manifest = tmp_path / "m.csv"
        manifest.write_text("tracklet_index\n0\n")
        assert dispatch(["eval", "--features", str(features),
                         "--manifest", str(manifest)]) == EXIT_DOMAIN_ERROR


class TestConfigCommand:
    def test_stage_one_values(self, capsys):
        assert dispatch(["config", "--stage", "1"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        train = doc["train"]
        assert train["schedule"]["base_lr"] == 2e-4
        assert train["schedule"]["max_epochs"] == 50
        assert train["schedule"]["schedule"] == "cosine"
        assert train["batch"] == 48
        assert train["loss_weights"] == {"lambda_id": 0.25, "lambda_tri": 1.0,
                                         "lambda_i2t": 1.0, "lambda_t2i": 1.0}
        assert (doc["rerank"]["k1"], doc["rerank"]["k2"]) == (28, 6)
        assert doc["rerank"]["lambda_value"] == 0.28

    def test_rerank_default_follows_preset(self, capsys):
        assert dispatch(["config"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["rerank_enabled"] is True
        assert dispatch(["config", "--preset", "baseline"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["rerank_enabled"] is False

    def test_stage_two_weight_decay(self, capsys):
        assert dispatch(["config", "--stage", "2"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["train"]["optimizer"]["weight_decay"] == 2.5e-4

    def test_flags_are_reflected(self, capsys):
        assert dispatch(["config", "--k1", "20", "--threads", "4", "--mode", "mean"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["rerank"]["k1"] == 20
        assert doc["threads"] == 4
        assert doc["train"]["pooling_mode"] == "mean"


class TestPipeline:
    def test_synth_writes_inputs(self, fixture_dir):
        for name in ("features.xfdf", "manifest.csv", "corruption.csv", "flipped.xfdf",
                     "fixture.json"):
            assert (fixture_dir / name).is_file()

    def test_train_then_eval(self, fixture_dir, tmp_path):
        head, report = _train_and_eval(fixture_dir, tmp_path / "run")
        doc = json.loads(report.read_text())
        assert [p["name"] for p in doc["protocols"]] == ["A2G", "G2A", "A2A"]
        assert 0.0 <= doc["overall_map"] <= 100.0
        assert doc["config"]["rerank"]["k1"] == 8
        assert len(json.loads(head.read_text())["history"]["total"]) == 3

    def test_pipeline_is_deterministic(self, fixture_dir, tmp_path):
        head_a, report_a = _train_and_eval(fixture_dir, tmp_path / "a")
        head_b, report_b = _train_and_eval(fixture_dir, tmp_path / "b")
        assert head_a.read_bytes() == head_b.read_bytes()
        assert report_a.read_bytes() == report_b.read_bytes()

    def test_stage_two_continues_from_stage_one(self, fixture_dir, tmp_path):
        stage_one = tmp_path / "s1.json"
        stage_two = tmp_path / "s2.json"
        assert dispatch(["train", *_data_args(fixture_dir), "--out", str(stage_one),
                         "--max-epochs", "2", "--batch", "32"]) == EXIT_OK
        assert dispatch(["train", *_data_args(fixture_dir), "--out", str(stage_two),
                         "--stage", "2", "--init-head", str(stage_one),
                         "--max-epochs", "2", "--batch", "32"]) == EXIT_OK
        doc = json.loads(stage_two.read_text())
        assert doc["config"]["train"]["schedule"]["stage"] == "stage2"

    def test_eval_reranks_by_default_unless_disabled(self, fixture_dir, tmp_path):
        head = tmp_path / "head.json"
        assert dispatch(["train", *_data_args(fixture_dir), "--out", str(head),
                         "--max-epochs", "1", "--batch", "32"]) == EXIT_OK
        configs = {}
        for flags in ((), ("--no-rerank",)):
            report = tmp_path / f"report{len(flags)}.json"
            assert dispatch(["eval", *_data_args(fixture_dir), "--head", str(head),
                             "--k1", "8", "--k2", "3", *flags, "--out", str(report)]) == EXIT_OK
            configs[flags] = json.loads(report.read_text())["config"]
        assert configs[()]["rerank"]["k1"] == 8
        assert configs[("--no-rerank",)]["rerank"] is None

    def test_rerank_flags_are_exclusive(self, fixture_dir):
        assert dispatch(["eval", *_data_args(fixture_dir), "--rerank", "--no-rerank"]) == EXIT_USAGE

    def test_pool_and_rerank(self, fixture_dir, tmp_path):
        query = tmp_path / "query.xfdf"
        gallery = tmp_path / "gallery.xfdf"
        for split, path in (("query", query), ("gallery", gallery)):
            assert dispatch(["pool", *_data_args(fixture_dir), "--split", split,
                             "--mode", "mean", "--out", str(path)]) == EXIT_OK
        meta = json.loads((tmp_path / "query.xfdf.meta.json").read_text())
        assert len(meta["tracklet_indices"]) == 32

        outputs = []
        for threads in ("1", "4"):
            out = tmp_path / f"d{threads}.xfdd"
            assert dispatch(["rerank", "--query-emb", str(query), "--gallery-emb", str(gallery),
                             "--k1", "10", "--k2", "3", "--threads", threads,
                             "--out", str(out)]) == EXIT_OK
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
        assert read_distance_matrix(tmp_path / "d1.xfdd").shape == (32, 32)

    def test_ablate(self, fixture_dir, tmp_path, capsys):
        out = tmp_path / "ablation.json"
        assert dispatch(["ablate", *_data_args(fixture_dir), "--modes", "mean",
                         "--rerank-params", "8,3,0.28", "--out", str(out)]) == EXIT_OK
        cells = json.loads(out.read_text())["cells"]
        assert len(cells) == 2
        assert cells[0]["delta"] == 0.0
        assert "rerank(8,3,0.28)" in capsys.readouterr().out

    def test_bad_rerank_params(self, fixture_dir):
        assert dispatch(["ablate", *_data_args(fixture_dir), "--modes", "mean",
                         "--rerank-params", "8;3"]) == EXIT_USAGE

    def test_gradcheck_command(self, capsys):
        assert dispatch(["gradcheck", "--cases", "4"]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out
