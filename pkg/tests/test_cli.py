import json

import cv2
import numpy as np
import pytest

from mycobow import pipeline
from mycobow.cli import main
from mycobow.config import load_config, save_config
from mycobow.dataset import read_manifest
from mycobow.encode import load_encoded_dataset
from mycobow.errors import MissingDescriptors, NoForegroundPatches

from conftest import clone_config, small_run_config


class TestPreprocess:
    def test_one_mask_per_scan(self, synth_run):
        masks = sorted((synth_run["out"] / "masks").glob("*.png"))
        records = read_manifest(synth_run["manifest"])
        assert len(masks) == len(records)

    def test_index_has_expected_header_and_gates(self, synth_run):
        entries = pipeline.read_patch_index(
            synth_run["out"] / "patch_index.tsv"
        )
        gates = {g for _, _, _, g in entries}
        assert gates <= {"fg", "bg", "skip"}
        assert any(g == "fg" for _, _, _, g in entries)
        assert any(g == "bg" for _, _, _, g in entries)

    def test_rerun_is_byte_identical(self, synth_run, tmp_path):
        cfg = clone_config(synth_run["cfg"], output_dir=str(tmp_path / "o2"))
        pipeline.cmd_preprocess(cfg)
        a = (synth_run["out"] / "patch_index.tsv").read_bytes()
        b = (tmp_path / "o2" / "patch_index.tsv").read_bytes()
        assert a == b

    def test_worker_count_does_not_change_outputs(self, synth_run, tmp_path):
        cfg = clone_config(synth_run["cfg"], output_dir=str(tmp_path / "o3"),
                           workers=2)
        pipeline.cmd_preprocess(cfg)
        assert (tmp_path / "o3" / "patch_index.tsv").read_bytes() == \
            (synth_run["out"] / "patch_index.tsv").read_bytes()
        name = sorted((synth_run["out"] / "masks").glob("*.png"))[0].name
        assert (tmp_path / "o3" / "masks" / name).read_bytes() == \
            (synth_run["out"] / "masks" / name).read_bytes()

    def test_resolved_config_written_and_reloadable(self, synth_run):
        path = synth_run["out"] / "run_config.json"
        cfg = load_config(path)
        assert cfg.manifest == synth_run["cfg"].manifest
        assert cfg.vocab_k == synth_run["cfg"].vocab_k


class TestEncode:
    def test_fv_encoding_length(self, synth_run):
        ds = load_encoded_dataset(synth_run["out"] / "encodings" / "run1.pvev")
        assert ds.encoding == "fv"
        assert ds.matrix.shape[1] == 2 * 5 * 16

    def test_bow_encoding_length(self, synth_run, tmp_path):
        cfg = clone_config(synth_run["cfg"],
                           output_dir=str(tmp_path / "bow"),
                           encoding="bow", vocab_k=10)
        pipeline.cmd_preprocess(cfg)
        pipeline.cmd_encode(cfg)
        ds = load_encoded_dataset(tmp_path / "bow" / "encodings" / "run1.pvev")
        assert ds.matrix.shape[1] == 10
        assert np.allclose(ds.matrix.sum(axis=1), 1.0, atol=1e-6)

    def test_reuse_gives_identical_encodings(self, synth_run):
        out = synth_run["out"]
        before = (out / "encodings" / "run1.pvev").read_bytes()
        pipeline.cmd_encode(synth_run["cfg"], reuse=True)
        after = (out / "encodings" / "run1.pvev").read_bytes()
        assert before == after

    def test_file_ingest_roundtrip(self, synth_run, tmp_path):
        # descriptors exported by a previous run serve as an external source
        src = synth_run["out"] / "descriptors"
        cfg = clone_config(synth_run["cfg"],
                           output_dir=str(tmp_path / "ing"),
                           descriptor_source="file",
                           descriptor_dir=str(src))
        pipeline.cmd_preprocess(cfg)
        pipeline.cmd_encode(cfg)
        a = load_encoded_dataset(tmp_path / "ing" / "encodings" / "run1.pvev")
        b = load_encoded_dataset(synth_run["out"] / "encodings" / "run1.pvev")
        assert np.array_equal(a.matrix, b.matrix)

    def test_missing_descriptor_file_lists_patch_ids(self, synth_run,
                                                     tmp_path):
        src = tmp_path / "empty_dir"
        src.mkdir()
        cfg = clone_config(synth_run["cfg"],
                           output_dir=str(tmp_path / "miss"),
                           descriptor_source="file",
                           descriptor_dir=str(src))
        pipeline.cmd_preprocess(cfg)
        with pytest.raises(MissingDescriptors) as err:
            pipeline.cmd_encode(cfg)
        assert len(err.value.patch_ids) > 0


class TestEvaluate:
    def test_report_files_exist(self, synth_run):
        reports = synth_run["out"] / "reports"
        for name in ("patch_report.tsv", "scan_report.tsv",
                     "confusion_run1.tsv", "confusion_run2.tsv",
                     "chosen_params.json", "patch_predictions.tsv",
                     "scan_predictions.tsv", "report.json"):
            assert (reports / name).exists()

    def test_single_point_grid_reported_exactly(self, synth_run):
        chosen = json.loads(
            (synth_run["out"] / "reports" / "chosen_params.json").read_text()
        )
        for run in ("run1", "run2"):
            assert chosen[run] == {"k": 5, "kernel": "linear", "C": 10.0,
                                   "gamma": None}

    def test_confusion_rows_sum_to_one(self, synth_run):
        text = (synth_run["out"] / "reports" / "confusion_run1.tsv").read_text()
        for line in text.strip().split("\n")[1:]:
            cells = [float(v) for v in line.split("\t")[1:]]
            assert sum(cells) == pytest.approx(1.0, abs=1e-9)

    def test_rerun_reports_byte_stable(self, synth_run):
        reports = synth_run["out"] / "reports"
        keep = {
            name: (reports / name).read_bytes()
            for name in ("scan_report.tsv", "confusion_run1.tsv",
                         "confusion_run2.tsv", "patch_predictions.tsv",
                         "chosen_params.json", "scan_predictions.tsv")
        }
        patch_before = (reports / "patch_report.tsv").read_text()
        report_before = json.loads((reports / "report.json").read_text())
        pipeline.cmd_evaluate(synth_run["cfg"])
        for name, blob in keep.items():
            assert (reports / name).read_bytes() == blob, name
        # the training-time column is wall clock; everything else is stable
        patch_after = (reports / "patch_report.tsv").read_text()
        strip = lambda text: [line.rsplit("\t", 1)[0]
                              for line in text.strip().split("\n")]
        assert strip(patch_after) == strip(patch_before)
        report_after = json.loads((reports / "report.json").read_text())
        report_before.pop("timing")
        report_after.pop("timing")
        assert report_after == report_before

    def test_models_persisted(self, synth_run):
        models = synth_run["out"] / "models"
        for name in ("run1.vocab.bin", "run2.vocab.bin", "run1.svm.bin",
                     "run2.svm.bin", "deploy.vocab.bin", "deploy.svm.bin",
                     "run1.summary.txt"):
            assert (models / name).exists()


class TestPredict:
    def test_training_fixture_scan_predicted_correctly(self, synth_run):
        scan = synth_run["root"] / "data" / "scans" / "CA_p1_00.png"
        result = pipeline.cmd_predict(synth_run["cfg"], scan)
        assert result["winner"] == "CA"
        assert result["scan_id"] == "CA_p1_00"
        assert sum(result["votes"].values()) >= 1

    def test_output_is_structured(self, synth_run):
        scan = synth_run["root"] / "data" / "scans" / "CG_p2_01.png"
        result = pipeline.cmd_predict(synth_run["cfg"], scan)
        blob = json.dumps(result)
        parsed = json.loads(blob)
        assert {"scan_id", "winner", "votes", "patches"} <= set(parsed)
        for patch in parsed["patches"]:
            assert {"patch_id", "row", "col", "gate", "predicted",
                    "decision_values"} <= set(patch)

    def test_background_only_scan_raises(self, synth_run, tmp_path):
        # white slide with sparse dark dust: the mask comes out empty
        rng = np.random.default_rng(0)
        blank = np.full((384, 384), 60000, dtype=np.uint16)
        dust = rng.random(blank.shape) < 0.03
        blank[dust] = 59000
        path = tmp_path / "blank.png"
        cv2.imwrite(str(path), blank)
        with pytest.raises(NoForegroundPatches):
            pipeline.cmd_predict(synth_run["cfg"], path)


class TestReportCommand:
    def test_mean_bow_has_k_columns_per_species(self, synth_run):
        text = (synth_run["out"] / "analysis" / "mean_bow.tsv").read_text()
        lines = text.strip().split("\n")
        header = lines[0].split("\t")
        k = synth_run["cfg"].report_bow_k
        assert header == ["species", "stat"] + [f"c{j}" for j in range(k)]
        species = {line.split("\t")[0] for line in lines[1:]}
        assert species == {"CA", "CG", "CL", "CN"}
        for line in lines[1:]:
            assert len(line.split("\t")) == 2 + k

    def test_nearest_lists_have_n_entries(self, synth_run):
        text = (synth_run["out"] / "analysis"
                / "nearest_patches.tsv").read_text()
        lines = text.strip().split("\n")[1:]
        cfg = synth_run["cfg"]
        counts = {}
        for line in lines:
            centroid = line.split("\t")[0]
            counts[centroid] = counts.get(centroid, 0) + 1
        assert len(counts) == cfg.report_bow_k
        assert all(v == cfg.report_neighbors for v in counts.values())

    def test_certainty_covers_each_fg_test_patch_once(self, synth_run):
        pred_text = (synth_run["out"] / "reports"
                     / "patch_predictions.tsv").read_text()
        lines = pred_text.strip().split("\n")
        header = lines[0].split("\t")
        gate_col = header.index("gate")
        pid_col = header.index("patch_id")
        fg_ids = {line.split("\t")[pid_col] for line in lines[1:]
                  if line.split("\t")[gate_col] == "fg"}

        rank_text = (synth_run["out"] / "analysis"
                     / "certainty_ranking.tsv").read_text()
        ranked = [line.split("\t")[2]
                  for line in rank_text.strip().split("\n")[1:]]
        assert sorted(ranked) == sorted(fg_ids)


class TestCliEntry:
    def test_exit_zero_on_preprocess(self, synth_run, tmp_path, capsys):
        config_path = tmp_path / "cfg.json"
        cfg = clone_config(synth_run["cfg"], output_dir=str(tmp_path / "o"))
        save_config(cfg, config_path)
        assert main(["--config", str(config_path), "preprocess"]) == 0
        assert "patch index" in capsys.readouterr().out

    def test_exit_one_on_empty_manifest(self, tmp_path, capsys):
        manifest = tmp_path / "empty.tsv"
        manifest.write_text("scan_id\tpath\tspecies\tpreparation_id\n")
        code = main(["--manifest", str(manifest),
                     "--output-dir", str(tmp_path / "o"), "preprocess"])
        assert code == 1

    def test_exit_one_on_missing_species(self, synth_run, tmp_path):
        # keep only preparation-1 rows: fold 2 then lacks every species;
        # the partial manifest sits beside the scans so paths resolve
        lines = synth_run["manifest"].read_text().strip().split("\n")
        kept = [lines[0]] + [l for l in lines[1:] if "\t1" == l[-2:]]
        manifest = synth_run["root"] / "data" / "partial.tsv"
        manifest.write_text("\n".join(kept) + "\n")
        cfg = clone_config(synth_run["cfg"], manifest=str(manifest),
                           output_dir=str(tmp_path / "o"))
        config_path = tmp_path / "cfg.json"
        save_config(cfg, config_path)
        assert main(["--config", str(config_path), "preprocess"]) == 0
        assert main(["--config", str(config_path), "encode"]) == 1

    def test_exit_two_on_unreadable_scan(self, tmp_path):
        manifest = tmp_path / "m.tsv"
        manifest.write_text(
            "scan_id\tpath\tspecies\tpreparation_id\n"
            "s1\tmissing.png\tCA\t1\n"
            "s2\tmissing2.png\tCA\t2\n"
        )
        code = main(["--manifest", str(manifest),
                     "--output-dir", str(tmp_path / "o"), "preprocess"])
        assert code == 2

    def test_predict_cli_prints_json(self, synth_run, tmp_path, capsys):
        config_path = tmp_path / "cfg.json"
        save_config(synth_run["cfg"], config_path)
        scan = synth_run["root"] / "data" / "scans" / "CA_p1_01.png"
        assert main(["--config", str(config_path), "predict",
                     str(scan)]) == 0
        parsed = json.loads(capsys.readouterr().out)
        assert parsed["winner"] == "CA"

    def test_env_override_for_output_dir(self, synth_run, tmp_path,
                                         monkeypatch):
        monkeypatch.setenv("MYCOBOW_OUT", str(tmp_path / "env_out"))
        cfg = clone_config(synth_run["cfg"])
        config_path = tmp_path / "cfg.json"
        save_config(cfg, config_path)
        assert main(["--config", str(config_path), "preprocess"]) == 0
        assert (tmp_path / "env_out" / "patch_index.tsv").exists()
