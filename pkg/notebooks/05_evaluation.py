# %% [markdown]
# # PSNR reports and perceptual-metric plugins
# PSNR is computed on 8-bit RGB values, the same numbers a saved PNG holds.

# %%
import numpy as np
import torch

from residual_lcm import available_metrics, metric_report, psnr, register_metric, synth_corpus

a = np.zeros((3, 16, 16))
print(f"off by one level: {psnr(a, a + 1):.4f} dB")
print(f"off by the peak:  {psnr(a, a + 255):.4f} dB")
print(f"identical:        {psnr(a, a):.1f} dB (cap)")

# %% [markdown]
# Perceptual metrics are plugins; none ship with the package. Here a plain
# mean absolute error stands in for one.

# %%
register_metric("mae", lambda sr, hr: float((sr - hr).abs().mean()))
print(available_metrics())

# %% [markdown]
# A report with bicubic standing in for the SR output scores a gain of zero.

# %%
pairs = synth_corpus(6, 32, seed=1)
report = metric_report(pairs, [p.lr_up for p in pairs], metrics=["mae"])
print(report["num_images"], {k: round(v, 3) for k, v in report["aggregate"].items()})
