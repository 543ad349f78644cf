# %% [markdown]
# # Posterior sampling with a score prior
#
# With a Gaussian prior the exact score is known, so the predictor-corrector
# sampler with hard data consistency can be checked against the posterior
# mean from a dense linear solve.

# %%
import numpy as np

from mri_instability.diffusion import AnalyticGMMScore, NoiseSchedule, SamplerConfig, pc_sample
from mri_instability.mri_forward import forward, make_cartesian_mask
from mri_instability.phantom_data import shepp_logan
from mri_instability.tensor_core import RngStream

n, tau = 16, 0.1
mu = shepp_logan(n).image
x_true = mu + tau * RngStream(3).normal((n, n))
mask = make_cartesian_mask(n, 4, 0.125, RngStream(5))
meas = forward(x_true, mask)

# %% Dense posterior mean for y = M F x with a tiny measurement variance
j = np.arange(n)
F1 = np.exp(-2j * np.pi * np.outer(j, j) / n) / np.sqrt(n)
A = mask.matrix.reshape(-1)[:, None] * np.kron(F1, F1)
v = 1e-6
H = (A.conj().T @ A).real / v + np.eye(n * n) / tau**2
post = np.linalg.solve(H, (A.conj().T @ meas.ksp.reshape(-1)).real / v + mu.reshape(-1) / tau**2)
post = post.reshape(n, n)

# %% 32 seeded chains, 200 noise levels each
samples = pc_sample(AnalyticGMMScore(mu, variance=tau**2), np.broadcast_to(meas.ksp, (32, n, n)),
                    mask.matrix, NoiseSchedule(n_scales=200), SamplerConfig(), seeds=list(range(32)))
dr = x_true.max() - x_true.min()
print("sample-mean deviation from posterior mean:", np.abs(samples.mean(0) - post).mean() / dr)
print("prior-mean deviation from posterior mean: ", np.abs(mu - post).mean() / dr)
print("per-pixel posterior spread:", samples.std(0).mean())
