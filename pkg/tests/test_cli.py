import json
import shutil

import numpy as np
import pytest

from pamdenoise import io as pio
from pamdenoise import trainer
from pamdenoise.cli import denoise_image, main
from pamdenoise.model import Generator
from pamdenoise.tensor import ops
from pamdenoise.tensor.core import make_output


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("phantom", "--count", 3, "--seed", 4, "--out", root / "ph") == 0
    assert run("synth", "--clean-dir", root / "ph", "--pairs-per-image", 2, "--seed", 5, "--out", root / "ds") == 0
    assert run("train", "--data", root / "ds" / "dataset.json", "--steps", 2, "--out", root / "run") == 0
    return root


def test_phantom_names_and_determinism(tmp_path):
    assert run("phantom", "--count", 10, "--out", tmp_path / "a") == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.pgm"))
    assert names == [f"phantom_{i:04d}.pgm" for i in range(10)]
    assert run("phantom", "--count", 10, "--out", tmp_path / "b") == 0
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert len(list((tmp_path / "a").glob("*.json"))) == 1


def test_phantom_rejects_small_size(tmp_path, capsys):
    assert run("phantom", "--size", 20, 20, "--out", tmp_path) != 0
    assert "32" in capsys.readouterr().err


def test_synth_counts_and_levels(workdir):
    rows = json.loads((workdir / "ds" / "dataset.json").read_text())
    assert len(rows) == 18
    assert {r["level"] for r in rows} == {"low", "mid", "high"}
    manifest = json.loads((workdir / "ds" / "run_manifest.json").read_text())
    assert manifest["renormalization_divisor"] >= 1.0
    assert "noisy/" + pio.read_dataset_manifest(workdir / "ds" / "dataset.json")[0]["noisy_path"].split("/")[-1] in manifest["artifacts"]


def test_synth_zero_noise(workdir, tmp_path):
    assert run("synth", "--clean-dir", workdir / "ph", "--zero-noise", "--out", tmp_path / "z") == 0
    for r in pio.read_dataset_manifest(tmp_path / "z" / "dataset.json"):
        diff = np.abs(pio.read_pgm(r["noisy_path"]) - pio.read_pgm(r["clean_path"]))
        assert diff.max() <= 1 / 65535 + 1e-12


def test_synth_missing_inputs(tmp_path):
    assert run("synth", "--clean-dir", tmp_path / "nothing", "--out", tmp_path / "o") == 2


def test_synth_reproducible_and_parallel(workdir, tmp_path):
    args = ["synth", "--clean-dir", workdir / "ph", "--pairs-per-image", 2, "--seed", 5]
    assert run(*args, "--out", tmp_path / "one", "--workers", 1) == 0
    assert run(*args, "--out", tmp_path / "many", "--workers", 4) == 0
    for p in sorted((workdir / "ds" / "noisy").iterdir()):
        assert (tmp_path / "one" / "noisy" / p.name).read_bytes() == p.read_bytes()
        assert (tmp_path / "many" / "noisy" / p.name).read_bytes() == p.read_bytes()


def test_train_manifest_echoes_defaults(workdir):
    m = json.loads((workdir / "run" / "run_manifest.json").read_text())
    assert m["config"]["lr"] == 1e-4 and m["config"]["batch"] == 8
    assert m["perceptual"]["source"] == "seeded"
    assert trainer.load_checkpoint(workdir / "run" / "checkpoint").step == 2


def test_train_zero_steps(workdir, tmp_path):
    assert run("train", "--data", workdir / "ds" / "dataset.json", "--steps", 0, "--out", tmp_path / "r") == 2
    assert not (tmp_path / "r").exists()


def test_train_resume_matches_uninterrupted(workdir, tmp_path):
    data = workdir / "ds" / "dataset.json"
    common = ["--data", data, "--steps", 4, "--batch", 4, "--checkpoint-interval", 2]
    assert run("train", *common, "--out", tmp_path / "full") == 0
    assert run("train", *common, "--out", tmp_path / "part") == 0
    shutil.copytree(tmp_path / "part" / "checkpoints" / "step_0000002", tmp_path / "mid")
    assert run("train", *common, "--resume", tmp_path / "mid", "--out", tmp_path / "res") == 0
    a = trainer.read_log(tmp_path / "full" / "train_log.jsonl")
    b = trainer.read_log(tmp_path / "res" / "train_log.jsonl")
    assert a[2:] == b
    for sub in ("generator", "discriminator"):
        for f in sorted((tmp_path / "full" / "checkpoint" / sub).glob("*.tns")):
            assert f.read_bytes() == (tmp_path / "res" / "checkpoint" / sub / f.name).read_bytes()


def test_config_file_with_override(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 2, "seed": 9, "out": str(tmp_path / "from_file")}))
    assert run("phantom", "--config", cfg, "--count", 3) == 0
    assert len(list((tmp_path / "from_file").glob("*.pgm"))) == 3
    m = json.loads((tmp_path / "from_file" / "run_manifest.json").read_text())
    assert m["config"]["seed"] == 9 and m["config"]["count"] == 3
    # a run manifest replays itself
    shutil.move(tmp_path / "from_file", tmp_path / "first")
    assert run("phantom", "--config", tmp_path / "first" / "run_manifest.json") == 0
    for p in (tmp_path / "first").glob("*.pgm"):
        assert (tmp_path / "from_file" / p.name).read_bytes() == p.read_bytes()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("phantom", "--config", cfg) == 2


def test_denoise_shapes_and_provenance(workdir, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    pio.write_pgm(src / "a.pgm", np.random.default_rng(0).uniform(0, 1, (64, 64)))
    pio.write_pgm(src / "b.pgm", np.random.default_rng(1).uniform(0, 1, (50, 70)))
    before = {p.name: p.read_bytes() for p in src.iterdir()}
    assert run("denoise", "--checkpoint", workdir / "run" / "checkpoint", "--in", src, "--out", tmp_path / "o") == 0
    assert pio.read_pgm(tmp_path / "o" / "a.pgm").shape == (64, 64)
    assert pio.read_pgm(tmp_path / "o" / "b.pgm").shape == (50, 70)
    assert {p.name: p.read_bytes() for p in src.iterdir()} == before
    m = json.loads((tmp_path / "o" / "run_manifest.json").read_text())
    assert m["checkpoint_sha256"] == pio.sha256_file(workdir / "run" / "checkpoint" / "manifest.json")


def test_denoise_missing_checkpoint(tmp_path):
    pio.write_pgm(tmp_path / "a.pgm", np.zeros((32, 32)))
    assert run("denoise", "--checkpoint", tmp_path / "none", "--in", tmp_path / "a.pgm", "--out", tmp_path / "o") == 2


def test_tiling_single_tile_identical_and_blend_close():
    g = Generator(0, "1/8")
    img = np.random.default_rng(2).uniform(0, 1, (96, 96))
    untiled = denoise_image(g, img, tile=0)
    assert np.array_equal(denoise_image(g, img, tile=96), untiled)
    tiled = denoise_image(g, img, tile=64)
    assert tiled.shape == img.shape and np.all(np.isfinite(tiled))


def test_eval_noisy_baseline_and_grouping(workdir, tmp_path, capsys):
    assert run("eval", "--data", workdir / "ds" / "dataset.json", "--group-by-level", "--rois", "auto", "--out", tmp_path / "e") == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert [line.split()[0] for line in table[1:]] == ["low", "mid", "high"]
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    rows = pio.read_dataset_manifest(workdir / "ds" / "dataset.json")
    from pamdenoise.metrics import psnr

    assert rep["rows"][0]["psnr"] == psnr(pio.read_pgm(rows[0]["noisy_path"]), pio.read_pgm(rows[0]["clean_path"]))


def test_eval_with_checkpoint_and_pred_dir(workdir, tmp_path):
    ck = workdir / "run" / "checkpoint"
    assert run("eval", "--data", workdir / "ds" / "dataset.json", "--checkpoint", ck, "--out", tmp_path / "e1") == 0
    assert run("denoise", "--checkpoint", ck, "--in", workdir / "ds" / "noisy", "--out", tmp_path / "pred",
               "--normalize", "none") == 0
    assert run("eval", "--data", workdir / "ds" / "dataset.json", "--pred-dir", tmp_path / "pred", "--out", tmp_path / "e2") == 0
    a = json.loads((tmp_path / "e1" / "report.json").read_text())["aggregates"]["all"]["psnr"]["mean"]
    b = json.loads((tmp_path / "e2" / "report.json").read_text())["aggregates"]["all"]["psnr"]["mean"]
    assert abs(a - b) < 0.01  # only PGM quantization separates the two paths


def test_eval_without_refs_or_rois(tmp_path):
    pio.write_pgm(tmp_path / "n.pgm", np.zeros((32, 32)))
    (tmp_path / "m.json").write_text(json.dumps([{"noisy_path": "n.pgm", "level": "low"}]))
    assert run("eval", "--data", tmp_path / "m.json", "--out", tmp_path / "e") == 2


def test_gradcheck_passes_and_lists_each_op_once(capsys):
    assert run("gradcheck") == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.endswith(("ok", "FAIL"))]
    names = [ln.split()[0] for ln in lines]
    assert len(names) == len(set(names))
    for required in ("conv2d", "conv2d_transpose", "maxpool2d", "instance_norm", "batch_norm", "layer_norm",
                     "leaky_relu", "sigmoid", "softmax", "linear", "gc_block", "standard_unit_block",
                     "generator", "discriminator"):
        assert required in names


def test_gradcheck_catches_corrupted_backward(monkeypatch):
    def bad_sigmoid(x):
        y = 1.0 / (1.0 + np.exp(-x.data))
        return make_output(y, (x,), lambda g: (g * y,))  # drops the (1 - y) factor

    monkeypatch.setattr(ops, "sigmoid", bad_sigmoid)
    assert run("gradcheck") != 0


def test_bench_rows_and_order_statistics(capsys):
    assert run("bench", "--size", 32, "--repeat", 1) == 0
    out = capsys.readouterr().out
    assert out.count("run ") == 1
    assert run("bench", "--size", 32, "--repeat", 5) == 0
    out = capsys.readouterr().out.splitlines()[-1].split()
    med, lo, hi = float(out[1]), float(out[4]), float(out[7])
    assert lo <= med <= hi


def test_bench_smaller_model_is_faster():
    from pamdenoise.cli import bench_timings
    import statistics

    small = statistics.median(bench_timings(Generator(0, "1/8"), 64, 3))
    big = statistics.median(bench_timings(Generator(0, 1), 64, 3))
    assert small < big
