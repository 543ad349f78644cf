# %% [markdown]
# # Worst-case k-space perturbations and their transfer
#
# A small perturbation, crafted with gradients of the supervised denoiser,
# is compared with random noise of the same norm.  The same perturbation is
# then fed to the diffusion sampler, which is never differentiated.

# %%
import sys
from pathlib import Path

import numpy as np

from mri_instability.attack import AttackConfig, transfer_evaluate
from mri_instability.diffusion import (DiffusionRecon, LearnedScore, NoiseSchedule, SamplerConfig,
                                       ScoreTrainConfig, train_score)
from mri_instability.harness import svg
from mri_instability.metrics import lag1_autocorrelation
from mri_instability.mri_forward import MaskSpec, forward
from mri_instability.phantom_data import DatasetConfig, build_dataset
from mri_instability.recon import DenoiserNet, TrainConfig, train_supervised
from mri_instability.tensor_core import RngStream

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out_dir.mkdir(exist_ok=True)

train, test = build_dataset(DatasetConfig(seed=0))
denoiser = train_supervised(DenoiserNet(seed=3), train, MaskSpec(8, 0.04), TrainConfig(epochs=10, seed=2))
denoiser.name = "denoiser"
score = train_score(LearnedScore(DenoiserNet(in_channels=2, residual=False, seed=7)), train,
                    NoiseSchedule(), ScoreTrainConfig(epochs=10, seed=6))
sampler = DiffusionRecon(score, NoiseSchedule(n_scales=100), SamplerConfig(seed=8))

rng = RngStream(1)
items = [(ph.image, forward(ph.image, MaskSpec(8, 0.04).sample(64, rng.spawn(i))))
         for i, ph in enumerate(test.items[:6])]

# %% White-box sweep on the denoiser
eps_grid = (0.005, 0.01, 0.02, 0.05)
adv, rnd = [], []
for eps in eps_grid:
    rep = transfer_evaluate(denoiser, [denoiser], items, AttackConfig(eps, iters=60, seed=10))
    adv.append(float(np.median(rep.delta_ssim("denoiser"))))
    rnd.append(float(np.median(rep.delta_ssim("denoiser", "rand"))))
    print(f"eps={eps:<6} median dSSIM adversarial {adv[-1]:.4f}  random {rnd[-1]:.5f}")
(out_dir / "whitebox.svg").write_text(svg.line_plot(
    {"adversarial": (list(eps_grid), adv), "random": (list(eps_grid), rnd)},
    "denoiser under k-space perturbations", "epsilon", "median dSSIM"))

# %% Transfer to the sampler at eps = 0.05 and look at the residual texture
rep = transfer_evaluate(denoiser, [sampler, denoiser], items, AttackConfig(0.05, iters=60, seed=10),
                        keep_recons=True)
print("sampler median dSSIM adversarial", np.median(rep.delta_ssim("diffusion")),
      "random", np.median(rep.delta_ssim("diffusion", "rand")))
for b in range(len(items)):
    c_d, a_d, _ = rep.recons[("diffusion", b, 8)]
    c_s, a_s, _ = rep.recons[("denoiser", b, None)]
    print(f"item {b}: residual lag-1 autocorrelation sampler {lag1_autocorrelation(a_d - c_d):.2f}, "
          f"denoiser {lag1_autocorrelation(a_s - c_s):.2f}")
print("plot written to", out_dir / "whitebox.svg")
