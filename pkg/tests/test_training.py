import math

import numpy as np
import pytest

from dpa_reid.cli import preset_path
from dpa_reid.config import RunConfig, load_config, parse_config
from dpa_reid.data import SynthSpec, load_manifest, synth_generate
from dpa_reid.exceptions import ConfigInvalid
from dpa_reid.losses import LossWeights, LsceParams, smoothed_targets
from dpa_reid.model import BackboneConfig
from dpa_reid.optim import Schedule, lr_at
from dpa_reid.training import ablation_config, chance_map, fit_arrays, run_eval, run_train

TINY = BackboneConfig(stage_channels=(4, 4, 8, 8), input_size=(16, 16))


def toy_set():
    rng = np.random.default_rng(0)
    colors = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 1, 1]], float)
    labels = np.repeat(np.arange(5), 8)
    return colors[labels][:, :, None, None] * 0.8 + rng.uniform(0, 0.2, (40, 3, 16, 16)), labels


def toy_config(eps):
    return RunConfig(backbone=TINY, weights=LossWeights(1, 0), lsce=LsceParams(eps), epochs=20,
                     warmup_epochs=2, P=5, K=4, base_lr=0.05, seed=0)


def test_multistep_decay_values():
    s = Schedule(1e-4, 60, decay="multistep", milestones=(30, 50), gamma=0.1)
    assert lr_at(s, 40) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(s, 55) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(s, 29) == 1e-4


def test_cosine_endpoint_and_warmup_start():
    for T, w in [(30, 0), (30, 5), (7, 2)]:
        s = Schedule(0.01, T, warmup_epochs=w)
        span = T - w
        assert lr_at(s, T - 1) <= 0.01 * math.sin(math.pi / (2 * span)) ** 2 * (1 + 1e-12)
    assert lr_at(Schedule(0.01, 30, warmup_epochs=5, warmup_start_factor=0.1), 0) == pytest.approx(1e-3, rel=1e-15)


def test_cosine_junction_is_continuous():
    s = Schedule(0.02, 30, warmup_epochs=5, warmup_start_factor=0.1)
    # the ramp, extended one step, lands on base_lr where the cosine starts
    ramp_next = lr_at(s, 4) + (lr_at(s, 4) - lr_at(s, 3))
    assert ramp_next == pytest.approx(0.02, rel=1e-12)
    assert lr_at(s, 5) == 0.02
    lrs = [lr_at(s, e) for e in range(30)]
    assert all(b > a for a, b in zip(lrs[:5], lrs[1:6]))
    assert all(b < a for a, b in zip(lrs[5:], lrs[6:]))


def test_unknown_and_bad_keys():
    with pytest.raises(ConfigInvalid):
        parse_config("model.colour = red\n")
    with pytest.raises(ConfigInvalid):
        parse_config("train.epochs = many\n")
    with pytest.raises(ConfigInvalid):
        parse_config("no equals sign here\n")
    with pytest.raises(ConfigInvalid):
        parse_config("train.epochs = 5\nschedule.warmup_epochs = 5\n")
    with pytest.raises(ConfigInvalid):
        parse_config("train.P = 1\n")
    with pytest.raises(ConfigInvalid):
        parse_config("model.attention = both\n")


@pytest.mark.parametrize("name", ["preset_sgd_cosine.conf", "preset_adam_multistep.conf"])
def test_presets_parse(name):
    cfg = load_config(preset_path(name))
    assert cfg.backbone.dpa_after_stage == (2,)
    assert cfg.weights.lambda1 == cfg.weights.lambda2 == 1


def test_preset_profiles():
    sgd = load_config(preset_path("preset_sgd_cosine.conf"))
    adam = load_config(preset_path("preset_adam_multistep.conf"))
    assert (sgd.optimizer, sgd.decay, sgd.epochs, sgd.P, sgd.K) == ("sgd", "cosine", 30, 8, 4)
    assert (adam.optimizer, adam.decay, adam.milestones, adam.epochs) == ("adam", "multistep", (30, 50), 60)


def test_comments_and_overrides():
    cfg = parse_config("# header\ntrain.epochs = 4  # trailing\nschedule.warmup_epochs = 1\n",
                       overrides={"train.seed": 11})
    assert cfg.epochs == 4 and cfg.seed == 11


def test_toy_lsce_drops_tenfold_without_smoothing():
    images, labels = toy_set()
    _, log = fit_arrays(toy_config(0.0), images, labels)
    assert log.records[-1].lsce < 0.1 * log.records[0].lsce


def test_toy_lsce_excess_over_entropy_floor_drops_tenfold():
    # with eps=0.1 the loss cannot fall below the smoothed-target entropy
    images, labels = toy_set()
    _, log = fit_arrays(toy_config(0.1), images, labels)
    q = smoothed_targets([0], 5, 0.1)[0]
    floor = -(q * np.log(q)).sum()
    assert log.records[-1].lsce - floor < 0.1 * (log.records[0].lsce - floor)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(SynthSpec(num_identities=8, images_per_identity=6, held_out_identities=3, image_size=16), root)
    return load_manifest(root / "manifest.json")


def small_config(**kw):
    return RunConfig(backbone=TINY, epochs=2, warmup_epochs=1, P=4, K=2, **kw)


def test_two_epoch_run_is_deterministic(small_dataset, tmp_path):
    manifest, loader = small_dataset
    for name in ("a", "b"):
        run_train(small_config(), manifest, loader, tmp_path / name)
    for f in ("train_log.csv", "checkpoint.dpac"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "train_log.csv").read_text().splitlines()[0] == "epoch,lr,lsce,hmt,total"


def test_eval_twice_is_identical(small_dataset, tmp_path):
    manifest, loader = small_dataset
    run_train(small_config(), manifest, loader, tmp_path)
    run_eval(small_config(), manifest, loader, tmp_path / "e1", tmp_path / "checkpoint.dpac")
    run_eval(small_config(), manifest, loader, tmp_path / "e2", tmp_path / "checkpoint.dpac")
    for f in ("metrics.csv", "ranks.csv"):
        assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes()


def test_chance_map_is_a_fraction(small_dataset):
    manifest, _ = small_dataset
    value = chance_map(manifest, small_config())
    assert 0 < value < 1


def test_ablation_arms():
    cfg = RunConfig()
    assert ablation_config(cfg, "baseline").backbone.dpa_after_stage == ()
    assert ablation_config(cfg, "spa").backbone.attention == "spa"
    with pytest.raises(ValueError):
        ablation_config(cfg, "cbam")
