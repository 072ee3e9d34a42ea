# %% [markdown]
# # Two-stage training on a tiny corpus
# Stage 1 learns a residual autoencoder whose latent stores what bicubic
# misses. Stage 2 freezes it and trains the latent consistency model plus the
# conditioning network. The tiny profile runs in under a minute on a CPU.

# %%
from pathlib import Path
import tempfile

import torch

from residual_lcm import SRPipeline, synth_corpus, tiny_config, train_lcd, train_rae

torch.set_num_threads(1)
out = Path(tempfile.mkdtemp())
pairs = synth_corpus(16, 32, seed=7)
cfg = tiny_config()
print(cfg.to_text())

# %%
rae = train_rae(pairs, cfg, out / "rae")
l1 = rae.epoch_means("l1")
print(f"stage 1 L1: {l1[0]:.4f} -> {l1[-1]:.4f}  (ratio {l1[-1] / l1[0]:.3f})")

# %%
lcd = train_lcd(pairs, rae.checkpoints[-1], cfg, out / "lcd")
ct, kd = lcd.epoch_means("ct"), lcd.epoch_means("kd")
print(f"stage 2 CT: {ct[0]:.4f} -> {ct[-1]:.4f}   KD: {kd[0]:.4f} -> {kd[-1]:.4f}")

# %% [markdown]
# Loss CSVs and checkpoints land in the output folders; the pipeline loads
# from the final pair of checkpoints.

# %%
print(sorted(p.name for p in (out / "lcd").iterdir()))
pipe = SRPipeline.from_checkpoints(rae.checkpoints[-1], lcd.checkpoints[-1])
print("latent channels:", pipe.latent_channels, "factor:", pipe.factor)
