import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mcaer.checkpoint import save_checkpoint
from mcaer.cli import EXIT_ABORT, EXIT_CACHE, EXIT_CUE, EXIT_IO, EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, main
from mcaer.data import read_sidecar
from mcaer.imageio import read_image
from mcaer.model import CLASS_NAMES, MCAERModel, reduced_config

from helpers import make_tiny_dataset, tree_digest

FAST = ["--width-divisor", "8", "--epochs", "1", "-q"]


@pytest.fixture(scope="module")
def ckpt(synth_dir, tmp_path_factory):
    """Three-stream checkpoint after one epoch on the synthetic training split."""
    out = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    assert main(["train", "--data", str(synth_dir), "--out", str(out), *FAST]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def scene(synth_dir):
    rec = read_sidecar(Path(synth_dir) / "annotations.jsonl")[0]
    return rec, str(Path(synth_dir) / rec["image"]), str(Path(synth_dir) / rec["mask"])


def infer_lines(capsys, argv):
    capsys.readouterr()
    assert main(argv) == EXIT_OK
    return capsys.readouterr().out.splitlines()


class TestSynth:
    def test_writes_reproducible_tree(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--n", "1", "--seed", "3"]) == EXIT_OK
        assert "wrote 7 scenes" in capsys.readouterr().out
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_zero_scenes_is_usage_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--n", "0"]) == EXIT_USAGE

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mcaer", "synth", "--out", str(tmp_path / "s"), "--n", "1"],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        assert "effective configuration" in proc.stderr
        assert len(list((tmp_path / "s").rglob("*.ppm"))) == 7


class TestCache:
    def test_reproduces_generated_cues(self, synth_dir, tmp_path):
        out = tmp_path / "cached.jsonl"
        assert main(["cache", "--data", str(synth_dir), "--out", str(out), "-q"]) == EXIT_OK
        original = read_sidecar(Path(synth_dir) / "annotations.jsonl")
        cached = read_sidecar(out)
        assert [r["face"] for r in cached] == [r["face"] for r in original]
        assert [r["mask"] for r in cached] == [r["mask"] for r in original]

    def test_idempotent(self, synth_dir, tmp_path):
        first, second = tmp_path / "1.jsonl", tmp_path / "2.jsonl"
        assert main(["cache", "--data", str(synth_dir), "--out", str(first), "-q"]) == EXIT_OK
        assert main(["cache", "--data", str(synth_dir), "--annotations", str(first), "--out", str(second), "-q"]) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()

    def test_lenient_keeps_null_mask(self, tmp_path):
        make_tiny_dataset(tmp_path / "d", 1)
        out = tmp_path / "c.jsonl"
        assert main(["cache", "--data", str(tmp_path / "d"), "--out", str(out), "--lenient", "-q"]) == EXIT_OK
        recs = read_sidecar(out)
        assert len(recs) == 7 and all(r["mask"] is None for r in recs)

    def test_strict_failure_writes_nothing(self, tmp_path):
        make_tiny_dataset(tmp_path / "d", 1)
        out = tmp_path / "c.jsonl"
        assert main(["cache", "--data", str(tmp_path / "d"), "--out", str(out), "-q"]) == EXIT_CACHE
        assert not out.exists()


class TestTrain:
    @pytest.mark.parametrize("streams", ["face,context", "face,context,body"])
    def test_completes(self, synth_dir, tmp_path, streams, capsys):
        out = tmp_path / "m.ckpt"
        assert main(["train", "--data", str(synth_dir), "--out", str(out), "--streams", streams, *FAST]) == EXIT_OK
        assert out.is_file() and Path(str(out) + ".history").is_file()
        assert "trained 1 epochs" in capsys.readouterr().out

    def test_creates_missing_output_directory(self, synth_dir, tmp_path):
        out = tmp_path / "new" / "dir" / "m.ckpt"
        argv = ["train", "--data", str(synth_dir), "--out", str(out), "--streams", "face,context", *FAST]
        assert main(argv) == EXIT_OK
        assert out.is_file() and Path(str(out) + ".history").is_file()

    def test_seed_reproducible(self, synth_dir, tmp_path):
        for run in ("a", "b"):
            argv = ["train", "--data", str(synth_dir), "--out", str(tmp_path / f"{run}.ckpt"),
                    "--streams", "face,context", "--seed", "9", *FAST]
            assert main(argv) == EXIT_OK
        assert (tmp_path / "a.ckpt.history").read_bytes() == (tmp_path / "b.ckpt.history").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_invalid_stream(self, synth_dir, tmp_path):
        assert main(["train", "--data", str(synth_dir), "--out", str(tmp_path / "m"), "--streams", "face,audio"]) == EXIT_USAGE

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, synth_dir, tmp_path):
        argv = ["train", "--data", str(synth_dir), "--out", str(tmp_path / "m"), "--streams", "face,context",
                "--width-divisor", "8", "--epochs", "2", "--lr", "1e30", "-q"]
        assert main(argv) == EXIT_ABORT

    def test_echoes_effective_configuration(self, synth_dir, tmp_path, capsys):
        main(["train", "--data", str(synth_dir), "--out", str(tmp_path / "m"), "--streams", "face,context",
              "--width-divisor", "8", "--epochs", "0"])
        assert "effective configuration" in capsys.readouterr().err


class TestEval:
    def test_confusion_rows_match_class_counts(self, synth_dir, ckpt, capsys):
        capsys.readouterr()
        assert main(["eval", "--data", str(synth_dir), "--ckpt", str(ckpt), "--split", "all", "--lenient", "-q"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        rows = np.array([[int(v) for v in r.split()] for r in lines[2:9]])
        assert rows.shape == (7, 7)
        np.testing.assert_array_equal(rows.sum(axis=1), 8)

    def test_missing_checkpoint(self, synth_dir, tmp_path):
        assert main(["eval", "--data", str(synth_dir), "--ckpt", str(tmp_path / "none.ckpt")]) == EXIT_IO

    def test_untrained_model_near_chance(self, synth_dir, tmp_path, capsys):
        accs = []
        for seed in range(5):
            path = tmp_path / f"u{seed}.ckpt"
            save_checkpoint(MCAERModel(reduced_config(8), seed=seed), path)
            capsys.readouterr()
            assert main(["eval", "--data", str(synth_dir), "--ckpt", str(path), "--split", "all", "--lenient", "-q"]) == EXIT_OK
            accs.append(float(capsys.readouterr().out.split()[1]))
        assert abs(np.mean(accs) - 1 / 7) <= 0.1


class TestInfer:
    def test_probabilities_and_determinism(self, ckpt, scene, capsys):
        rec, image, mask = scene
        argv = ["infer", "--ckpt", str(ckpt), "--image", image, "--mask", mask,
                "--face", ",".join(map(str, rec["face"])), "-q"]
        lines = infer_lines(capsys, argv)
        assert infer_lines(capsys, argv) == lines
        probs = {l.split()[1]: float(l.split()[2]) for l in lines if l.startswith("prob ")}
        lams = [float(l.split()[2]) for l in lines if l.startswith("lambda ")]
        assert list(probs) == list(CLASS_NAMES)
        assert abs(sum(probs.values()) - 1) <= 1e-6
        assert len(lams) == 3 and abs(sum(lams) - 1) <= 1e-6
        assert lines[0].split()[1] == max(probs, key=probs.get)
        assert lines[1] == "face " + " ".join(map(str, rec["face"]))

    def test_lenient_fallback_face(self, ckpt, scene, capsys):
        lines = infer_lines(capsys, ["infer", "--ckpt", str(ckpt), "--image", scene[1], "--lenient", "-q"])
        assert lines[1].endswith("(fallback)")

    def test_no_face_strict(self, ckpt, scene):
        assert main(["infer", "--ckpt", str(ckpt), "--image", scene[1], "-q"]) == EXIT_CUE

    def test_face_outside_image(self, ckpt, scene):
        assert main(["infer", "--ckpt", str(ckpt), "--image", scene[1], "--face", "5000,5000,10,10", "-q"]) == EXIT_USAGE


class TestGradcam:
    def test_writes_heatmap(self, ckpt, scene, tmp_path):
        rec, image, mask = scene
        out = tmp_path / "cam.pgm"
        argv = ["gradcam", "--ckpt", str(ckpt), "--image", image, "--mask", mask,
                "--face", ",".join(map(str, rec["face"])), "--class", "happy", "--out", str(out), "-q"]
        assert main(argv) == EXIT_OK
        assert out.read_bytes()[:2] == b"P5"
        cam = read_image(out)
        assert cam.shape == (133, 237)
        assert cam.min() >= 0 and cam.max() <= 1

    def test_bad_class_lists_choices(self, ckpt, scene, tmp_path, capsys):
        argv = ["gradcam", "--ckpt", str(ckpt), "--image", scene[1], "--class", "bored", "--out", str(tmp_path / "c")]
        assert main(argv) == EXIT_USAGE
        err = capsys.readouterr().err
        assert all(name in err for name in CLASS_NAMES)


class TestSelftest:
    def test_injected_fault_fails(self, capsys):
        assert main(["selftest", "--seeds", "1", "--inject-grad-fault", "-q"]) == EXIT_SELFTEST
        assert "selftest FAILED" in capsys.readouterr().out
