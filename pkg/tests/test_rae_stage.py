import csv
import math

import pytest
import torch
import torch.nn.functional as F

import residual_lcm.rae_stage as rae_stage
from residual_lcm.backbone import PatchDiscriminator, ResidualAutoencoder
from residual_lcm.checkpoint import load_checkpoint
from residual_lcm.datapipe import stack_pairs, synth_corpus
from residual_lcm.imaging import bicubic_resize
from residual_lcm.rae_stage import (RAE_CSV_COLUMNS, RaeLossWeights, TrainingDiverged,
                                    discriminator_loss, kl_standard_normal, load_autoencoder,
                                    rae_loss, train_rae)

from support import TOY, perturb, toy_config

torch.set_num_threads(1)


@pytest.fixture
def batch():
    return stack_pairs(synth_corpus(2, 16, seed=0))


@pytest.fixture
def nets():
    torch.manual_seed(0)
    return perturb(ResidualAutoencoder(TOY), 0.02), PatchDiscriminator(TOY)


class CountingDisc(torch.nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner, self.calls = inner, 0

    def forward(self, x):
        self.calls += 1
        return self.inner(x)


def test_default_weights():
    w = RaeLossWeights()
    assert (w.w_l1, w.w_adv, w.w_reg, w.warmup_epochs) == (1.0, 0.5, 1e-6, 50)
    with pytest.raises(ValueError):
        RaeLossWeights(w_adv=-1)


def test_perfect_reconstruction_in_warmup():
    torch.manual_seed(0)
    ae = ResidualAutoencoder(TOY)        # fresh decoder returns bicubic(lr) exactly
    lr = torch.rand(2, 3, 4, 4) * 2 - 1
    hr = bicubic_resize(lr, 4)
    losses = rae_loss(hr, lr, hr, ae, PatchDiscriminator(TOY), RaeLossWeights(), epoch=0)
    assert float(losses["l1"].detach()) == 0.0 and float(losses["total"].detach()) == 0.0


def test_component_set_switches_at_warmup(batch, nets):
    hr, lr, up = batch
    ae, disc = nets
    w = RaeLossWeights()
    assert set(rae_loss(hr, lr, up, ae, disc, w, epoch=49)) == {"l1", "total"}
    assert set(rae_loss(hr, lr, up, ae, disc, w, epoch=50)) == {"l1", "adv", "reg", "total"}


def test_kl_zero_for_standard_normal():
    z = torch.zeros(2, 4, 3, 3)
    assert float(kl_standard_normal(z, z)) == 0.0
    m, lv = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
    assert float(kl_standard_normal(m, lv)) > 0
    # closed form for a single element
    assert float(kl_standard_normal(torch.full((1, 1), 1.0), torch.full((1, 1), math.log(2.0)))) == \
        pytest.approx(0.5 * (1 + 2 - 1 - math.log(2.0)))


def test_warmup_gating_is_exact(batch, nets):
    hr, lr, up = batch
    ae, inner = nets
    disc = CountingDisc(inner)
    losses = rae_loss(hr, lr, up, ae, disc, RaeLossWeights(), epoch=3)
    losses["total"].backward()
    got = [p.grad.clone() for p in ae.parameters()]
    assert disc.calls == 0
    ae.zero_grad()
    mean, _ = ae.encoder(hr, up)
    F.l1_loss(ae.decoder(lr, mean), hr).backward()
    for a, b in zip(got, ae.parameters()):
        assert torch.equal(a, b.grad)


def test_loss_decomposition(batch, nets):
    hr, lr, up = batch
    ae, disc = nets
    w = RaeLossWeights(w_l1=1.3, w_adv=0.7, w_reg=0.01, warmup_epochs=0)
    noise = torch.randn(2, 4, 4, 4)
    losses = rae_loss(hr, lr, up, ae, disc, w, epoch=0, noise=noise)
    total = w.w_l1 * losses["l1"] + w.w_adv * losses["adv"] + w.w_reg * losses["reg"]
    assert float(losses["total"].detach()) == pytest.approx(float(total.detach()), rel=1e-6)


def test_misaligned_batch(batch, nets):
    hr, lr, up = batch
    ae, disc = nets
    with pytest.raises(ValueError):
        rae_loss(hr, lr[..., :3, :3], up, ae, disc, RaeLossWeights(), 0)
    with pytest.raises(ValueError):
        rae_loss(hr, lr, up, ae, disc, RaeLossWeights(), -1)


def test_generator_and_discriminator_gradients_are_separate(batch, nets):
    hr, lr, up = batch
    ae, disc = nets
    w = RaeLossWeights(warmup_epochs=0)
    rae_stage._set_trainable(disc, False)
    losses, sr = rae_loss(hr, lr, up, ae, disc, w, epoch=0, return_sr=True)
    losses["total"].backward()
    assert all(p.grad is None for p in disc.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in ae.parameters())
    rae_stage._set_trainable(disc, True)
    ae.zero_grad(set_to_none=True)
    discriminator_loss(hr, sr, disc).backward()
    assert all(p.grad is None for p in ae.parameters())
    assert any(p.grad is not None for p in disc.parameters())


def test_hinge_discriminator_loss():
    class Const(torch.nn.Module):
        def forward(self, x):
            return x.mean(dim=(1, 2, 3), keepdim=True)
    hr = torch.full((1, 3, 4, 4), 2.0)
    sr = torch.full((1, 3, 4, 4), -2.0)
    assert float(discriminator_loss(hr, sr, Const())) == 0.0
    assert float(discriminator_loss(sr, hr, Const())) == pytest.approx(6.0)


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ValueError):
        train_rae([], toy_config(), tmp_path)


def test_training_writes_checkpoints_and_csv(tmp_path):
    pairs = synth_corpus(4, 16, seed=0)
    res = train_rae(pairs, toy_config(rae__warmup_epochs=1), tmp_path)
    assert [p.name for p in res.checkpoints] == ["rae_epoch1.ckpt", "rae_epoch2.ckpt"]
    with open(tmp_path / "rae_losses.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == RAE_CSV_COLUMNS
    assert len(rows) == 4
    assert rows[0]["adv"] == "" and rows[-1]["adv"] != ""
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    payload = load_checkpoint(res.checkpoints[-1], kind="rae")
    assert payload["state"]["epoch"] == 2 and payload["manifest"]["seed"] == 0
    assert set(payload["networks"]) == {"autoencoder", "discriminator"}
    assert "rae.lr" in payload["config"]
    ae = load_autoencoder(res.checkpoints[-1])
    for a, b in zip(ae.parameters(), res.networks["autoencoder"].parameters()):
        assert torch.equal(a, b)


def test_resume_is_bit_identical(tmp_path):
    pairs = synth_corpus(4, 16, seed=0)
    cfg = toy_config(rae__epochs=3, rae__warmup_epochs=1)
    full = train_rae(pairs, cfg, tmp_path / "full")
    train_rae(pairs, cfg, tmp_path / "part", stop_after_epoch=1)
    resumed = train_rae(pairs, cfg, tmp_path / "part", resume=tmp_path / "part" / "rae_epoch1.ckpt")
    assert resumed.history == full.history
    for a, b in zip(full.networks["autoencoder"].parameters(), resumed.networks["autoencoder"].parameters()):
        assert torch.equal(a, b)
    for a, b in zip(full.networks["discriminator"].parameters(), resumed.networks["discriminator"].parameters()):
        assert torch.equal(a, b)


def test_same_seed_same_run(tmp_path):
    pairs = synth_corpus(4, 16, seed=0)
    a = train_rae(pairs, toy_config(rae__epochs=1), tmp_path / "a")
    b = train_rae(pairs, toy_config(rae__epochs=1), tmp_path / "b")
    assert a.history == b.history


def test_non_finite_loss_aborts_with_dump(tmp_path, monkeypatch):
    real = rae_stage.rae_loss

    def poisoned(*args, **kw):
        losses, sr = real(*args, **kw)
        losses["total"] = losses["total"] * float("nan")
        return losses, sr

    monkeypatch.setattr(rae_stage, "rae_loss", poisoned)
    with pytest.raises(TrainingDiverged):
        train_rae(synth_corpus(2, 16, seed=0), toy_config(), tmp_path)
    assert (tmp_path / "diverged.json").exists()


def test_channel_mismatch(tmp_path):
    with pytest.raises(ValueError):
        train_rae(synth_corpus(2, 16, seed=0, channels=1), toy_config(), tmp_path)
