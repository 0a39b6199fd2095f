"""Run configuration: validation, profiles, overrides, file loading."""

import json

import pytest

from gazeadapt.config import (PROFILES, RunConfig, config_dict, config_hash,
                              describe_defaults, load_config, parse_override)
from gazeadapt.synth import SynthConfig


def test_defaults_match_reference_protocol():
    cfg = RunConfig()
    # paper-scale protocol: RMSProp 1e-5, batch 32, 200 epochs, unit lambdas
    assert cfg.lr == 1e-5
    assert cfg.rms_smoothing == 0.99
    assert cfg.epochs == 200
    assert cfg.batch == 32
    assert cfg.lambda_gaa == cfg.lambda_gb == cfg.lambda_dice == cfg.lambda_ce == 1.0
    assert cfg.threshold == 0.5
    assert cfg.strict is True


def test_validation_errors():
    with pytest.raises(ValueError, match="learning rate must be > 0"):
        RunConfig(lr=0.0)
    with pytest.raises(ValueError, match="learning rate must be > 0"):
        RunConfig(lr=-1e-5)
    with pytest.raises(ValueError, match="epochs"):
        RunConfig(epochs=0)
    with pytest.raises(ValueError, match="batch"):
        RunConfig(batch=0)
    with pytest.raises(ValueError, match="threshold"):
        RunConfig(threshold=1.0)
    with pytest.raises(ValueError, match="bad kernel width"):
        RunConfig(gaze_sigma=0.0)
    with pytest.raises(ValueError, match="bad weight floor"):
        RunConfig(w_floor=0.0)
    with pytest.raises(ValueError, match="depth too small"):
        RunConfig(depth=1)
    with pytest.raises(ValueError, match="adapt_lr"):
        RunConfig(adapt_lr=-1.0)
    with pytest.raises(ValueError, match="aug_noise"):
        RunConfig(aug_noise=-0.1)


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError, match="no active objective"):
        RunConfig(lambda_gaa=0, lambda_gb=0, lambda_dice=0, lambda_ce=0)


def test_loss_weights_projection():
    lw = RunConfig(lambda_gaa=0.5, lambda_gb=2.0).loss_weights()
    assert lw.lambda_gaa == 0.5 and lw.lambda_gb == 2.0
    assert lw.lambda_dice == 1.0 and lw.lambda_ce == 1.0


def test_desk_profile_overrides():
    run, syn = load_config(None, profile="desk", overrides=())
    assert run.epochs < RunConfig().epochs
    assert isinstance(syn, SynthConfig)
    assert "desk" in PROFILES and "paper" in PROFILES


def test_parse_override_forms():
    assert parse_override("run.lr=0.001") == ("run", "lr", 0.001)
    assert parse_override("synth.image_size=32") == ("synth", "image_size", 32)
    sect, key, val = parse_override("run.out_dir=runs/x")
    assert val == "runs/x"
    with pytest.raises(ValueError, match="override"):
        parse_override("lr=0.001")   # missing section
    with pytest.raises(ValueError, match="override"):
        parse_override("run.lr')")


def test_overrides_applied_and_unknown_keys_rejected():
    run, _ = load_config(None, profile="desk", overrides=("run.lr=0.01", "run.batch=4"))
    assert run.lr == 0.01 and run.batch == 4
    with pytest.raises(ValueError, match="unknown"):
        load_config(None, profile="desk", overrides=("run.bogus_key=1",))
    with pytest.raises(ValueError, match="unknown"):
        load_config(None, profile="nope", overrides=())


def test_config_file_json(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"run": {"epochs": 7, "lr": 2e-4},
                             "synth": {"image_size": 32, "axes_range": [7, 11],
                                       "wall": 3.0, "area_range": [0.02, 0.6]}}))
    run, syn = load_config(p, profile="desk", overrides=("run.epochs=9",))
    # file overrides profile; --set overrides file
    assert run.epochs == 9
    assert run.lr == 2e-4
    assert syn.image_size == 32
    assert syn.axes_range == (7.0, 11.0)


def test_config_file_toml(tmp_path):
    p = tmp_path / "cfg.toml"
    p.write_text("[run]\nepochs = 5\n\n[synth]\nn_source = 6\n")
    run, syn = load_config(p, profile="desk", overrides=())
    assert run.epochs == 5
    assert syn.n_source == 6


def test_config_hash_tracks_content():
    a, sa = load_config(None, profile="desk", overrides=())
    b, sb = load_config(None, profile="desk", overrides=("run.lr=0.123",))
    assert config_hash(a, sa) != config_hash(b, sb)
    a2, sa2 = load_config(None, profile="desk", overrides=())
    assert config_hash(a, sa) == config_hash(a2, sa2)
    assert config_dict(a)["lr"] == a.lr


def test_describe_defaults_lists_every_key():
    text = describe_defaults()
    for key in ("run.lr", "run.epochs", "run.lambda_gaa", "synth.speckle",
                "synth.image_size", "run.w_floor"):
        assert key in text
