import json
from pathlib import Path

import numpy as np
import pytest

from binroad import imgio, osmmaker, synth
from binroad.cli import main


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-synthetic", "--out", str(root), "--n", "6", "--resolution", "64",
                 "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main([
        "train", "--data", str(tiny_dataset), "--out", str(out),
        "--epochs", "2", "--batch-size", "4", "--widths", "4,8,12,16",
        "--val-fraction", "0.34", "--quiet", "--seed", "1",
    ])
    assert code == 0
    return out


class TestGenSynthetic:
    def test_sample_count_and_layout(self, tiny_dataset):
        dirs = synth.sample_dirs(tiny_dataset)
        assert len(dirs) == 6
        for name in ("image.ppm", "labels.pgm", "cloud_00.txt", "cloud_01.txt",
                     "poses.txt", "calib.txt", "meta.json"):
            assert (dirs[0] / name).exists()

    def test_same_seed_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-synthetic", "--out", str(tmp_path / d), "--n", "3",
                         "--resolution", "64", "--seed", "9"]) == 0
        assert synth.dataset_digest(tmp_path / "a") == synth.dataset_digest(tmp_path / "b")

    def test_void_fraction_within_band(self, tmp_path):
        for target in (0.3, 0.7):
            out = tmp_path / f"v{int(target * 100)}"
            assert main(["gen-synthetic", "--out", str(out), "--n", "4",
                         "--resolution", "64", "--seed", "2",
                         "--void-fraction", str(target)]) == 0
            for s in synth.load_dataset(out):
                achieved = 1.0 - s.void_mask.mean()
                assert abs(achieved - target) < 0.05

    def test_unwritable_output_fails(self):
        assert main(["gen-synthetic", "--out", "/proc/nope/ds", "--n", "1"]) == 1


class TestTrainEvalInfer:
    def test_train_writes_artifacts(self, trained_run):
        for name in ("model.npz", "config.txt", "loss_curve.csv", "loss_curve.png",
                     "train_log.txt", "val_scores.png"):
            assert (trained_run / name).exists(), name
        rows = (trained_run / "loss_curve.csv").read_text().strip().splitlines()
        assert len(rows) == 3  # header + 2 epochs

    def test_eval_exits_zero_and_writes_metrics(self, tiny_dataset, trained_run, tmp_path, capsys):
        code = main(["eval", "--data", str(tiny_dataset),
                     "--checkpoint", str(trained_run / "model.npz"),
                     "--config", str(trained_run / "config.txt"),
                     "--out", str(tmp_path / "eval")])
        assert code == 0
        text = capsys.readouterr().out
        assert "point cloud" in text and "RoadIoU" in text
        assert (tmp_path / "eval" / "metrics.csv").exists()
        assert (tmp_path / "eval" / "metrics.png").exists()

    def test_eval_oracle_masks_reach_perfect_miou(self, tiny_dataset, tmp_path, capsys):
        pred = tmp_path / "oracle"
        pred.mkdir()
        for d in synth.sample_dirs(tiny_dataset):
            labels = imgio.read_pgm(d / "labels.pgm")
            imgio.write_pgm(pred / f"{d.name}.pgm", labels * 255)
        code = main(["eval", "--data", str(tiny_dataset), "--pred-dir", str(pred)])
        assert code == 0
        out = capsys.readouterr().out
        assert "1.0000" in out

    def test_infer_writes_masks(self, tiny_dataset, trained_run, tmp_path):
        out = tmp_path / "masks"
        code = main(["infer", "--data", str(tiny_dataset),
                     "--checkpoint", str(trained_run / "model.npz"),
                     "--config", str(trained_run / "config.txt"),
                     "--out", str(out)])
        assert code == 0
        masks = sorted(out.glob("*_img.pgm"))
        assert len(masks) == 6
        m = imgio.read_pgm(masks[0])
        assert set(np.unique(m)) <= {0, 255}

    def test_checkpoint_config_mismatch_fails(self, tiny_dataset, trained_run):
        code = main(["eval", "--data", str(tiny_dataset),
                     "--checkpoint", str(trained_run / "model.npz"),
                     "--widths", "8,16,24,32"])
        assert code == 1

    def test_commands_do_not_mutate_inputs(self, tiny_dataset, trained_run, tmp_path):
        before = synth.dataset_digest(tiny_dataset)
        assert main(["eval", "--data", str(tiny_dataset),
                     "--checkpoint", str(trained_run / "model.npz"),
                     "--config", str(trained_run / "config.txt")]) == 0
        assert main(["infer", "--data", str(tiny_dataset),
                     "--checkpoint", str(trained_run / "model.npz"),
                     "--config", str(trained_run / "config.txt"),
                     "--out", str(tmp_path / "m")]) == 0
        assert synth.dataset_digest(tiny_dataset) == before


class TestReportOpsAndBench:
    def test_report_ops_prints_ratio_and_writes(self, tmp_path, capsys):
        code = main(["report-ops", "--widths", "8,16,24,32", "--vit-depth", "1",
                     "--vit-heads", "2", "--out", str(tmp_path / "ops")])
        assert code == 0
        out = capsys.readouterr().out
        assert "OPs ratio" in out and "TOTAL" in out
        assert (tmp_path / "ops" / "ops_report.csv").exists()
        assert (tmp_path / "ops" / "ops_breakdown.png").exists()
        kv = (tmp_path / "ops" / "ops_report.kv").read_text()
        assert "ops_ratio_vs_twin" in kv

    def test_bench_small_sizes(self, tmp_path, capsys):
        code = main(["bench", "--sizes", "32,64", "--repeats", "1", "--out", str(tmp_path / "b")])
        assert code == 0
        assert "binary" in capsys.readouterr().out
        assert (tmp_path / "b" / "bench.csv").exists()
        assert (tmp_path / "b" / "bench.png").exists()


class TestMakeOsm:
    def make_mask_sequence(self, root, n=5, shift=10):
        """Synthetic straight road translating right by `shift` px per frame."""
        root.mkdir(parents=True, exist_ok=True)
        for k in range(n):
            mask = np.zeros((48, 64), dtype=np.uint8)
            mask[20:27, :] = 255
            mask[10:40, 30:37] = 255  # vertical spur to give the graph a junction
            imgio.write_pgm(root / f"frame_{k:02d}.pgm", mask)
        homs = [np.eye(3)]
        for _ in range(n - 1):
            h = np.eye(3)
            h[0, 2] = shift
            homs.append(h)
        lines = [" ".join(repr(float(v)) for v in h.reshape(9)) for h in homs]
        (root / "homs.txt").write_text("\n".join(lines) + "\n")
        (root.parent / "anchors.txt").write_text(
            "0 0 47.0 8.0\n100 0 47.0 8.001\n"
        )
        return root / "homs.txt", root.parent / "anchors.txt"

    def test_pipeline_on_translating_road(self, tmp_path, capsys):
        masks = tmp_path / "masks"
        homs, anchors = self.make_mask_sequence(masks)
        out = tmp_path / "osm"
        code = main(["make-osm", "--masks", str(masks), "--homographies", str(homs),
                     "--anchors", str(anchors), "--out", str(out)])
        assert code == 0
        for name in ("road.osm", "stitched.pgm", "skeleton.pgm", "overlay.png"):
            assert (out / name).exists()
        xml = (out / "road.osm").read_text()
        nodes, ways, tags = osmmaker.parse_osm_xml(xml)
        assert len(ways) >= 1
        assert all(t.get("highway") == "road" for t in tags)
        stitched = imgio.read_pgm(out / "stitched.pgm")
        assert stitched.shape[1] > 64  # canvas grew with the translation

    def test_estimated_translation_mode(self, tmp_path):
        masks = tmp_path / "m"
        masks.mkdir()
        base = np.zeros((40, 60), dtype=np.uint8)
        base[18:23, 5:55] = 255
        imgio.write_pgm(masks / "a.pgm", base)
        imgio.write_pgm(masks / "b.pgm", np.roll(base, 6, axis=1))
        (tmp_path / "anchors.txt").write_text("0 0 10.0 20.0\n50 0 10.0 20.0005\n")
        out = tmp_path / "o"
        code = main(["make-osm", "--masks", str(masks), "--estimate-translation",
                     "--anchors", str(tmp_path / "anchors.txt"), "--out", str(out)])
        assert code == 0
        assert (out / "road.osm").exists()

    def test_missing_masks_fails_cleanly(self, tmp_path, capsys):
        code = main(["make-osm", "--masks", str(tmp_path / "none"), "--anchors",
                     str(tmp_path / "none.txt"), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error" in capsys.readouterr().err
