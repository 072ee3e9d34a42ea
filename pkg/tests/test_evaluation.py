import json
import math

import numpy as np
import pytest
import torch

from residual_lcm.backbone import CondNet, SRDecoder, UNet
from residual_lcm.datapipe import synth_corpus
from residual_lcm.evaluation import (UnknownMetricError, available_metrics, benchmark_runtime,
                                     image_psnr, metric_report, perceptual_metric, psnr,
                                     register_metric, unregister_metric, write_json)
from residual_lcm.sampler import SRPipeline

from support import TOY, TOY_SCHEDULE, perturb

torch.set_num_threads(1)


def test_identical_is_capped():
    a = np.random.default_rng(0).uniform(0, 255, (3, 8, 8))
    assert psnr(a, a) == 100.0
    assert psnr(a, a, cap=60.0) == 60.0


def test_unit_error_closed_form():
    a = np.zeros((3, 8, 8))
    assert psnr(a, a + 1, peak=255) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert psnr(a, a + 1, peak=255) == pytest.approx(48.1308, abs=1e-3)


def test_peak_error_is_zero_db():
    a = np.zeros((4, 4))
    assert psnr(a, a + 255, peak=255) == pytest.approx(0.0, abs=1e-12)


def test_symmetry_and_scale_covariance():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 255, (2, 3, 8, 8))
    assert psnr(a, b) == psnr(b, a)
    for c in (0.01, 3.0, 1000.0):
        assert psnr(c * a, c * b, peak=255 * c) == pytest.approx(psnr(a, b), abs=1e-9)


def test_tensor_inputs_and_errors():
    assert psnr(torch.zeros(2, 2), torch.ones(2, 2), peak=1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.ones(3), peak=0)


def test_image_psnr_uses_quantised_values():
    hr = torch.zeros(3, 4, 4)
    sr = hr + 0.3 / 127.5           # below half a level: quantises to the same byte
    assert image_psnr(sr, hr) == 100.0
    sr = hr + 1 / 127.5
    assert image_psnr(sr, hr) == pytest.approx(20 * math.log10(255), abs=1e-9)


@pytest.fixture
def clean_registry():
    names = available_metrics()
    yield
    for n in available_metrics():
        if n not in names:
            unregister_metric(n)


def test_unknown_metric(clean_registry):
    with pytest.raises(UnknownMetricError, match="fid"):
        perceptual_metric("fid", torch.zeros(1), torch.zeros(1))


def test_plugin_contract(clean_registry):
    register_metric("const", lambda a, b: 0.0)
    assert "const" in available_metrics()
    assert perceptual_metric("const", torch.ones(2), torch.ones(2)) == 0.0
    with pytest.raises(UnknownMetricError, match="const"):
        perceptual_metric("lpips", torch.ones(2), torch.ones(2))
    with pytest.raises(TypeError):
        register_metric("bad", 3)


def test_metric_report(tmp_path, clean_registry):
    pairs = synth_corpus(3, 16, seed=0)
    register_metric("mae", lambda a, b: float((a - b).abs().mean()))
    report = metric_report(pairs, [p.hr for p in pairs], metrics=["mae"])
    assert report["num_images"] == 3
    assert report["aggregate"]["psnr_sr"] == 100.0
    assert report["aggregate"]["mae"] == 0.0
    bic = np.mean([image_psnr(p.lr_up, p.hr) for p in pairs])
    assert report["aggregate"]["psnr_bicubic"] == pytest.approx(bic)
    assert report["aggregate"]["psnr_gain"] == pytest.approx(100.0 - bic)
    path = write_json(report, tmp_path / "m.json")
    assert json.loads(path.read_text())["per_image"][0]["id"] == pairs[0].source_id
    with pytest.raises(ValueError):
        metric_report(pairs, [])


@pytest.fixture(scope="module")
def pipe():
    torch.manual_seed(0)
    return SRPipeline(SRDecoder(TOY), perturb(UNet(TOY, TOY_SCHEDULE), 0.05), CondNet(TOY), TOY_SCHEDULE)


def test_benchmark_report(pipe):
    lr = torch.rand(3, 8, 8)
    single = benchmark_runtime("single", lr, pipe, repeats=3, warmup=1)
    assert single["denoiser_calls"] == 1 and single["num_steps"] == 1
    assert len(single["times_s"]) == 3 and single["mean_s"] > 0 and single["std_s"] >= 0
    assert set(single["phases_mean_s"]) == {"cond", "denoise", "decode"}
    env = single["environment"]
    assert env["repeats"] == 3 and env["warmup"] == 1 and "machine" in env
    json.dumps(single)
    before = pipe.denoiser.calls
    anc = benchmark_runtime("ancestral", lr, pipe, repeats=3, warmup=0, num_steps=40)
    assert anc["denoiser_calls"] == 40
    assert pipe.denoiser.calls - before == 3 * 40


def test_benchmark_validation(pipe):
    with pytest.raises(ValueError):
        benchmark_runtime("single", torch.rand(3, 8, 8), pipe, repeats=2)
    with pytest.raises(ValueError):
        benchmark_runtime("ddim", torch.rand(3, 8, 8), pipe)
