import subprocess
import sys

import numpy as np
import pytest

from dpa_reid import gradsuite, pooling
from dpa_reid.autodiff import Tensor
from dpa_reid.autodiff import functional as F
from dpa_reid.cli import main
from dpa_reid.data import load_manifest

SMALL = ["--ids", "6", "--per-id", "4", "--held-out", "2", "--image-size", "16"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_tiny_config(path, manifest):
    path.write_text(
        "model.stage_channels = 4, 4, 8, 8\nmodel.input_size = 16, 16\n"
        "train.epochs = 2\ntrain.P = 4\ntrain.K = 2\nschedule.warmup_epochs = 1\n"
        f"data.manifest = {manifest}\n")
    return path


def test_synth_counts_and_headers(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--ids", "20", "--per-id", "10", "--image-size", "32"]) == 0
    manifest, _ = load_manifest(tmp_path / "manifest.json")
    assert len(manifest.entries) == 200
    images = sorted((tmp_path / "images").iterdir())
    assert len(images) == 200
    assert images[0].read_bytes().startswith(b"P6\n32 32\n255\n")
    assert "200 images" in capsys.readouterr().out


def test_synth_seed_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "7", "--out", str(tmp_path / name)] + SMALL) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train"], ["synth", "--out", "x", "--ids", "many"]])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("train.nonsense = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.conf"), "--out", str(tmp_path)]) == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "dpa_reid.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "dpa_reid.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_train_then_eval(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data)] + SMALL) == 0
    conf = write_tiny_config(tmp_path / "tiny.conf", data / "manifest.json")
    run = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--out", str(run)]) in (0, 1)
    assert (run / "checkpoint.dpac").is_file()
    assert len((run / "train_log.csv").read_text().splitlines()) == 3
    assert main(["eval", "--config", str(conf), "--out", str(run)]) == 0
    assert (run / "metrics.csv").read_text().startswith("mAP,rank1,rank5,rank10,rank20,mINP\n")
    assert (run / "ranks.csv").is_file()
    assert main(["eval", "--config", str(conf), "--out", str(tmp_path / "rw"), "--random-weights"]) == 0
    assert main(["eval", "--config", str(conf), "--out", str(tmp_path / "none")]) == 2


def test_ablate_writes_comparison_csv(tmp_path):
    data = tmp_path / "data"
    main(["synth", "--out", str(data)] + SMALL)
    conf = write_tiny_config(tmp_path / "tiny.conf", data / "manifest.json")
    assert main(["ablate", "--config", str(conf), "--out", str(tmp_path / "ab"), "--epochs", "1",
                 "--arms", "baseline", "cpa"]) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "method,mAP,rank1,rank5,mINP,params"
    assert [l.split(",")[0] for l in lines[1:]] == ["baseline", "cpa"]


def test_suite_names_are_unique_and_cover_the_contract():
    names = [item.name for item in gradsuite.suite()]
    assert len(names) == len(set(names))
    for required in ("conv2d", "batchnorm2d[train]", "obr[4x4]", "cpa", "spa", "dpa", "lsce", "hmt", "full_model"):
        assert required in names
    for kind in ("avg_pool", "min_pool", "gem_pool", "soft_pool"):
        assert sum(n.startswith(kind) for n in names) >= 2


def _fast_suite(names):
    full = gradsuite.suite
    return lambda: [item for item in full() if item.name in names]


def test_gradcheck_reports_each_item_once(monkeypatch, capsys):
    names = {"add", "relu", "avg_pool[spatial]", "gem_pool[channel]", "lsce"}
    monkeypatch.setattr(gradsuite, "suite", _fast_suite(names))
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for n in names:
        assert sum(line.split()[0] == n for line in out.splitlines() if line.strip()) == 1
    assert "5/5 items passed" in out


def test_gradcheck_catches_corrupted_gem_backward(monkeypatch, capsys):
    real = pooling.gem_pool

    def corrupted(x, axis=pooling.PoolAxis.SPATIAL, params=None):
        out = real(x, axis, params)
        # same forward value, gradient skewed by half of avg_pool's
        skew = F.mul(pooling.avg_pool(x, axis), Tensor(np.array(0.5)))
        return F.add(out, F.sub(skew, Tensor(skew.data)))

    monkeypatch.setattr(pooling, "gem_pool", corrupted)
    monkeypatch.setattr(gradsuite, "suite", _fast_suite({"avg_pool[spatial]", "gem_pool[spatial]",
                                                         "gem_pool[channel]"}))
    assert main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "FAILED: gem_pool[spatial], gem_pool[channel]" in out
