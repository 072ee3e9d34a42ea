import pytest
import torch

from residual_lcm.backbone import UNet
from residual_lcm.checkpoint import (CheckpointError, load_checkpoint, restore, save_checkpoint,
                                     spec_from_manifest)
from residual_lcm.config import (DEFAULTS, Config, ConfigError, parse_text, resolve_config,
                                 tiny_config, validate)

from support import TOY, TOY_SCHEDULE


def test_defaults_encode_reference_settings():
    cfg = resolve_config()
    assert cfg["schedule.T"] == 1000
    assert (cfg["schedule.beta_start"], cfg["schedule.beta_end"]) == (0.0015, 0.0155)
    assert cfg["model.unet_width"] == 64
    assert (cfg["rae.lr"], cfg["rae.batch_size"]) == (3.6e-5, 8)
    assert (cfg["lcd.lr"], cfg["lcd.batch_size"]) == (8e-5, 16)
    assert cfg["rae.warmup_epochs"] == 50
    assert (cfg["rae.w_l1"], cfg["rae.w_adv"], cfg["rae.w_reg"]) == (1.0, 0.5, 1e-6)
    assert (cfg["model.num_fru"], cfg["model.imdb_per_fru"]) == (4, 12)
    assert (cfg["rae.epochs"], cfg["lcd.epochs"]) == (200, 200)
    validate(cfg)


def test_tiny_profile():
    cfg = tiny_config()
    assert cfg["data.patch_size"] == 32 and cfg["model.downsample_factor"] == 4
    assert cfg["model.sr_width"] == 32 and cfg["model.ae_width"] == 16
    validate(cfg)


def test_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("run.profile = tiny\nrae.lr = 0.5  # comment\n\nlcd.k = 7\n")
    cfg = resolve_config(path, overrides={"lcd.k": 9})
    assert cfg["rae.lr"] == 0.5            # file beats profile
    assert cfg["lcd.k"] == 9               # override beats file
    assert cfg["data.patch_size"] == 32    # profile beats default
    assert cfg["lcd.mu"] == DEFAULTS["lcd.mu"]
    assert resolve_config(path, profile="full")["data.patch_size"] == 256


def test_echo_round_trip():
    cfg = tiny_config(lcd__ablation="no_kd", data__split=(0.5, 0.25, 0.25))
    again = Config(parse_text(cfg.to_text()))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("text", ["nope.key = 1", "rae.lr = fast", "just words", "model.unet_mults = a,b"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_text(text)


@pytest.mark.parametrize("override", [dict(lcd__k=0), dict(lcd__mu=2.0), dict(rae__lr=0.0),
                                      dict(data__patch_size=30), dict(data__split=(0.5, 0.5, 0.5)),
                                      dict(bench__repeats=2), dict(lcd__ablation="none"),
                                      dict(model__downsample_factor=3), dict(schedule__beta_end=0.001)])
def test_validation_errors(override):
    with pytest.raises(ConfigError):
        validate(tiny_config(**override))


def test_unknown_profile():
    with pytest.raises(ConfigError):
        resolve_config(profile="huge")


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    unet = UNet(TOY, TOY_SCHEDULE)
    path = save_checkpoint(tmp_path / "x.ckpt", "lcd", {"unet": unet}, TOY, 5, "a = 1",
                           {"epoch": 3, "rng": torch.Generator().get_state()})
    payload = load_checkpoint(path, kind="lcd")
    assert payload["manifest"]["seed"] == 5
    assert spec_from_manifest(payload) == TOY
    assert payload["manifest"]["parameters"]["unet"]["conv_in.weight"] == list(unet.conv_in.weight.shape)
    other = restore(UNet(TOY, TOY_SCHEDULE), payload, "unet")
    for a, b in zip(unet.parameters(), other.parameters()):
        assert torch.equal(a, b)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, kind="rae")
    with pytest.raises(CheckpointError):
        restore(UNet(TOY, TOY_SCHEDULE), payload, "condnet")


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    other = tmp_path / "other.ckpt"
    torch.save({"format": "something"}, other)
    with pytest.raises(CheckpointError):
        load_checkpoint(other)
    torch.save({"format": "residual_lcm.ckpt", "format_version": 99}, other)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(other)
