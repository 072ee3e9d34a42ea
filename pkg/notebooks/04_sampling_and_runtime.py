# %% [markdown]
# # One-step sampling against the 40-step ancestral baseline
# Trains the tiny models, then counts denoiser calls and times both samplers.

# %%
from pathlib import Path
import tempfile

import torch

from residual_lcm import SRPipeline, sample_ancestral, sample_single_step, synth_corpus, tiny_config, train_lcd, train_rae
from residual_lcm.evaluation import compare_runtime

torch.set_num_threads(1)
out = Path(tempfile.mkdtemp())
pairs = synth_corpus(16, 32, seed=7)
cfg = tiny_config()
rae = train_rae(pairs, cfg, out / "rae")
lcd = train_lcd(pairs, rae.checkpoints[-1], cfg, out / "lcd")
pipe = SRPipeline.from_checkpoints(rae.checkpoints[-1], lcd.checkpoints[-1])

# %%
lr = pairs[0].lr
for name, fn in (("single", lambda: sample_single_step(lr, pipe, 0)),
                 ("ancestral", lambda: sample_ancestral(lr, pipe, 40, 0))):
    before = pipe.denoiser.calls
    sr = fn()
    print(f"{name:9s} calls={pipe.denoiser.calls - before:2d}  output {tuple(sr.shape)}")

# %% [markdown]
# The same seed gives the same image.

# %%
print(torch.equal(sample_single_step(lr, pipe, 5), sample_single_step(lr, pipe, 5)))

# %%
timing = compare_runtime(lr, pipe, repeats=5, warmup=2, num_steps=40)
for k in ("single", "ancestral"):
    r = timing[k]
    print(f"{k:9s} {r['mean_s'] * 1e3:7.2f} ms +- {r['std_s'] * 1e3:.2f}  phases {r['phases_mean_s']}")
print(f"ratio {timing['ratio_mean']:.1f}x")
