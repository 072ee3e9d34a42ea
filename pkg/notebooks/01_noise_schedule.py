# %% [markdown]
# # Noise schedule and boundary coefficients
# Linear beta schedule over T = 1000 steps, the cumulative products it
# implies, and the skip/output coefficients that pin the consistency
# function to the identity at t = 0.

# %%
import torch

from residual_lcm import boundary_coeffs, forward_noise, make_schedule

s = make_schedule(1000, 0.0015, 0.0155)
print("beta[0], beta[T-1]:", s.beta[0], s.beta[-1])
print("alpha_bar at t = 0, 250, 500, 750, 999:", [f"{s.alpha_bar[t]:.3e}" for t in (0, 250, 500, 750, 999)])

# %% [markdown]
# The signal-to-noise ratio at the last step is small but not zero, so the
# noisy latent still carries a trace of the clean one.

# %%
snr = s.alpha_bar / (1 - s.alpha_bar)
print(f"SNR at T-1: {snr[-1]:.2e}")

# %%
for t in (0, 1, 10, 100, 999):
    cs, co = boundary_coeffs(t, s.sigma_data, s)
    print(f"t={t:4d}  c_skip={float(cs):.6f}  c_out={float(co):.6f}")

# %% [markdown]
# Forward noising keeps unit variance for unit-variance inputs.

# %%
z0 = torch.randn(200_000, dtype=torch.float64)
eps = torch.randn_like(z0)
for t in (0, 500, 999):
    zt = forward_noise(z0, t, eps, s)
    print(f"t={t:3d}  mean={zt.mean():+.4f}  var={zt.var():.4f}")
