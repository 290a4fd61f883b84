import csv
import json
import os

import numpy as np
import pytest

from meshflow import cli, pipeline, synthdata
from meshflow.losses import LossConfig
from meshflow.mesh import load_obj
from meshflow.pipeline import EvalReport, Model, NumericalError, TrainConfig
from meshflow.synthdata import DataError


def tiny_cfg(**overrides):
    base = dict(
        feature_mode="pooling",
        loss={"variant": "sampled_chamfer", "sample_count": 40, "alpha": 0.05},
        epochs=1,
        lr=1e-4,
        accumulation_steps=2,
        fold_count=2,
        seed=0,
        map_count=2,
        conv_blocks=1,
        layer_count=2,
        hidden_width=8,
        heads=2,
        max_steps=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    synthdata.make_dataset(str(root), 2, 3, rng_seed=0, vertex_budget=120, img_dims=(16, 16))
    return synthdata.load_dataset(str(root)), str(root)


class TestTrainConfig:
    def test_protocol_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-5
        assert cfg.batch_size == 1
        assert cfg.accumulation_steps == 5
        assert cfg.epochs == 100
        assert cfg.fold_count == 10
        assert cfg.loss.alpha == 0.05
        assert cfg.loss.sample_count == 1000
        assert cfg.feature_mode == "pooling"

    def test_validation(self):
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=2)
        with pytest.raises(ValueError, match="feature_mode"):
            TrainConfig(feature_mode="magic")
        with pytest.raises(ValueError, match="accumulation_steps"):
            TrainConfig(accumulation_steps=0)
        with pytest.raises(ValueError, match="fold_count"):
            TrainConfig(fold_count=1)

    def test_loss_dict_coerced(self):
        cfg = TrainConfig(loss={"variant": "chamfer", "alpha": 0.1})
        assert isinstance(cfg.loss, LossConfig)
        assert cfg.loss.alpha == 0.1

    def test_round_trips_through_dict(self):
        cfg = tiny_cfg()
        assert TrainConfig(**cfg.to_dict()).to_dict() == cfg.to_dict()


class TestModel:
    def test_untrained_model_is_identity(self, dataset):
        seqs, _ = dataset
        model = Model(tiny_cfg())
        pred, _ = pipeline.infer(model, seqs[0].reference, seqs[0].frames[1][1])
        np.testing.assert_allclose(pred.vertices, seqs[0].reference.vertices, atol=1e-12)

    def test_global_mode_features(self, dataset):
        seqs, _ = dataset
        model = Model(tiny_cfg(feature_mode="global"))
        pred, _ = pipeline.infer(model, seqs[0].reference, seqs[0].frames[1][1])
        assert pred.vertices.shape == seqs[0].reference.vertices.shape

    def test_save_load_round_trip(self, dataset, tmp_path):
        seqs, _ = dataset
        model = Model(tiny_cfg())
        rng = np.random.default_rng(1)
        model.net.head_w.values = rng.normal(size=model.net.head_w.shape) * 0.01
        path = tmp_path / "m.ckpt"
        model.save(str(path))
        loaded = Model.load(str(path))
        assert loaded.cfg.to_dict() == model.cfg.to_dict()
        a, _ = pipeline.infer(model, seqs[0].reference, seqs[0].frames[1][1])
        b, _ = pipeline.infer(loaded, seqs[0].reference, seqs[0].frames[1][1])
        np.testing.assert_array_equal(a.vertices, b.vertices)


class TestTrain:
    def test_smoke_run_writes_artifacts(self, dataset, tmp_path):
        seqs, _ = dataset
        out = tmp_path / "run"
        model, ckpt = pipeline.train(seqs, tiny_cfg(), str(out))
        assert os.path.exists(ckpt)
        with open(out / "training_log.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "data_loss", "identity_loss", "total_loss"]
        assert len(rows) == 1 + 4  # max_steps samples
        for _, data_val, ident_val, total_val in rows[1:]:
            assert np.isfinite(float(total_val))
            assert float(total_val) == pytest.approx(
                float(data_val) + 0.05 * float(ident_val), rel=1e-9
            )

    def test_training_changes_parameters(self, dataset, tmp_path):
        seqs, _ = dataset
        model, _ = pipeline.train(seqs, tiny_cfg(), str(tmp_path / "run"))
        fresh = Model(tiny_cfg())
        assert np.any(model.net.head_w.values != fresh.net.head_w.values)

    def test_determinism_bitwise_checkpoints(self, dataset, tmp_path):
        seqs, _ = dataset
        _, c1 = pipeline.train(seqs, tiny_cfg(), str(tmp_path / "a"))
        _, c2 = pipeline.train(seqs, tiny_cfg(), str(tmp_path / "b"))
        with open(c1, "rb") as f1, open(c2, "rb") as f2:
            assert f1.read() == f2.read()

    def test_subject_restriction(self, dataset, tmp_path):
        seqs, _ = dataset
        _, ckpt = pipeline.train(seqs, tiny_cfg(), str(tmp_path / "r"), train_subjects=[1])
        assert os.path.exists(ckpt)
        with pytest.raises(DataError, match="no training subjects"):
            pipeline.train(seqs, tiny_cfg(), str(tmp_path / "e"), train_subjects=[])

    def test_divergence_raises_numerical_error(self, dataset, tmp_path):
        seqs, _ = dataset
        cfg = tiny_cfg(lr=1e30, accumulation_steps=1, max_steps=4, epochs=2)
        with pytest.raises(NumericalError, match="non-finite|collapsed"):
            pipeline.train(seqs, cfg, str(tmp_path / "boom"))


class TestEvaluate:
    def test_identity_model_scores_zero_on_reference_frame(self, dataset):
        seqs, _ = dataset
        report = pipeline.evaluate(Model(tiny_cfg()), seqs, [0, 1])
        assert len(report.rows) == 6  # 2 subjects x 3 frames
        for row in report.rows:
            assert row["avg_error_mm"] >= 0.0
            assert row["inference_seconds"] > 0.0
            if row["frame"] == 0:  # frame 0 equals the reference exactly
                assert row["avg_error_mm"] == pytest.approx(0.0, abs=1e-9)
                assert row["chamfer_l2"] == pytest.approx(0.0, abs=1e-12)

    def test_static_baseline_positive(self, dataset):
        seqs, _ = dataset
        base = pipeline.static_baseline_error(seqs, [0, 1])
        assert base > 0.0

    def test_report_round_trip_and_tamper_detection(self, dataset, tmp_path):
        seqs, _ = dataset
        report = pipeline.evaluate(Model(tiny_cfg()), seqs, [0])
        report.save(str(tmp_path))
        back = EvalReport.load(str(tmp_path))
        assert back.aggregates == pytest.approx(report.aggregates)
        # tamper with the summary: reload must notice the inconsistency
        summary = tmp_path / "eval_summary.json"
        agg = json.loads(summary.read_text())
        agg["avg_error_mm_mean"] += 1.0
        summary.write_text(json.dumps(agg))
        with pytest.raises(DataError, match="does not match"):
            EvalReport.load(str(tmp_path))


class TestFoldsAndCrossval:
    def test_folds_partition_subjects(self):
        folds = pipeline.make_folds(10, 3, seed=0)
        flat = sorted(s for f in folds for s in f)
        assert flat == list(range(10))

    def test_folds_deterministic(self):
        assert pipeline.make_folds(8, 4, seed=1) == pipeline.make_folds(8, 4, seed=1)

    def test_too_many_folds_rejected(self):
        with pytest.raises(DataError, match="fold_count"):
            pipeline.make_folds(3, 5, seed=0)

    def test_crossval_writes_summary(self, dataset, tmp_path):
        seqs, _ = dataset
        out = tmp_path / "cv"
        reports, aggregate = pipeline.crossval(seqs, tiny_cfg(max_steps=2), str(out))
        assert len(reports) == 2
        assert len(aggregate["fold_avg_error_mm"]) == 2
        summary = json.loads((out / "crossval_summary.json").read_text())
        assert summary["avg_error_mm_mean"] == pytest.approx(aggregate["avg_error_mm_mean"])
        assert (out / "fold_0" / "model.ckpt").exists()
        assert (out / "fold_1" / "eval_frames.csv").exists()


class TestExportViz:
    def test_writes_ply_and_contours(self, dataset, tmp_path):
        seqs, _ = dataset
        pred, truth = seqs[0].frames[1][0], seqs[0].frames[2][0]
        paths = pipeline.export_viz(pred, truth, str(tmp_path))
        assert [os.path.basename(p) for p in paths] == [
            "signed_distance.ply",
            "contour_sagittal.csv",
            "contour_coronal.csv",
            "contour_axial.csv",
        ]
        header = (tmp_path / "signed_distance.ply").read_bytes().split(b"end_header")[0]
        assert b"property float quality" in header
        assert b"element vertex %d" % pred.num_vertices in header
        with open(tmp_path / "contour_coronal.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        labels = {r["mesh"] for r in rows}
        assert labels == {"pred", "truth"}


class TestCli:
    def run(self, *argv):
        return cli.main(list(argv))

    def test_generate_data(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {"data": {"subjects": 1, "frames_per_subject": 2,
                          "vertex_budget": 120, "img_dims": [12, 12]}}
            )
        )
        out = tmp_path / "ds"
        assert self.run("--config", str(cfg), "generate-data", "--out-dir", str(out)) == 0
        assert (out / "subject_0" / "frame_1.pgm").exists()

    def test_full_cli_cycle(self, dataset, tmp_path):
        _, root = dataset
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(tiny_cfg().to_dict()))
        run_dir = tmp_path / "run"
        assert (
            self.run("--config", str(cfg), "train", "--dataset", root,
                     "--subjects", "0", "--out-dir", str(run_dir))
            == 0
        )
        ckpt = run_dir / "model.ckpt"
        out_obj = tmp_path / "pred.obj"
        assert (
            self.run("infer", "--checkpoint", str(ckpt),
                     "--reference", os.path.join(root, "subject_1", "reference.obj"),
                     "--slice", os.path.join(root, "subject_1", "frame_1.pgm"),
                     "--output", str(out_obj))
            == 0
        )
        pred = load_obj(str(out_obj))
        ref = load_obj(os.path.join(root, "subject_1", "reference.obj"))
        assert pred.vertices.shape == ref.vertices.shape
        eval_dir = tmp_path / "eval"
        assert (
            self.run("eval", "--checkpoint", str(ckpt), "--dataset", root,
                     "--subjects", "1", "--out-dir", str(eval_dir))
            == 0
        )
        assert (eval_dir / "eval_summary.json").exists()
        viz_dir = tmp_path / "viz"
        assert (
            self.run("export-viz", "--pred", str(out_obj),
                     "--truth", os.path.join(root, "subject_1", "frame_1.obj"),
                     "--out-dir", str(viz_dir))
            == 0
        )
        assert (viz_dir / "signed_distance.ply").exists()

    def test_crossval_command(self, dataset, tmp_path):
        _, root = dataset
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(tiny_cfg(max_steps=2).to_dict()))
        out = tmp_path / "cv"
        assert self.run("--config", str(cfg), "crossval",
                        "--dataset", root, "--out-dir", str(out)) == 0
        assert (out / "crossval_summary.json").exists()

    def test_missing_dataset_is_data_error(self, tmp_path):
        code = self.run("train", "--dataset", str(tmp_path / "nope"),
                        "--out-dir", str(tmp_path / "o"))
        assert code == cli.EXIT_DATA

    def test_bad_config_value_is_usage_error(self, dataset, tmp_path):
        _, root = dataset
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"feature_mode": "magic"}))
        code = self.run("--config", str(cfg), "train", "--dataset", root,
                        "--out-dir", str(tmp_path / "o"))
        assert code == cli.EXIT_USAGE

    def test_no_arguments_is_usage_error(self):
        assert self.run() == cli.EXIT_USAGE

    def test_divergence_is_numerical_error(self, dataset, tmp_path):
        _, root = dataset
        cfg = tmp_path / "diverge.json"
        cfg.write_text(
            json.dumps(tiny_cfg(lr=1e30, accumulation_steps=1, max_steps=4, epochs=2).to_dict())
        )
        code = self.run("--config", str(cfg), "train", "--dataset", root,
                        "--out-dir", str(tmp_path / "o"))
        assert code == cli.EXIT_NUMERICAL

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"data": {"subjects": 1, "frames_per_subject": 1,
                                            "vertex_budget": 120, "img_dims": [12, 12]}}))
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        self.run("--config", str(cfg), "--seed", "5", "generate-data", "--out-dir", str(a))
        self.run("--config", str(cfg), "--seed", "5", "generate-data", "--out-dir", str(b))
        self.run("--config", str(cfg), "--seed", "6", "generate-data", "--out-dir", str(c))
        ref = "subject_0/reference.obj"
        assert (a / ref).read_bytes() == (b / ref).read_bytes()
        assert (a / ref).read_bytes() != (c / ref).read_bytes()
