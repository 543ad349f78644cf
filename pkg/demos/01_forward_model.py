# %% [markdown]
# # Undersampled MRI in a few lines of numpy
#
# We build a phantom, acquire 8x undersampled Cartesian k-space and compare
# the zero-filled image with a regularized least-squares fit.

# %%
import numpy as np

from mri_instability.metrics import psnr, ssim
from mri_instability.mri_forward import MaskSpec, adjoint, forward
from mri_instability.phantom_data import random_ellipses, shepp_logan
from mri_instability.recon import cg_least_squares
from mri_instability.tensor_core import RngStream, fft2, l2_norm

# %% The unitary FFT keeps norms, so budgets in k-space and image space agree
x = shepp_logan(64).image
print("image norm", l2_norm(x), "k-space norm", l2_norm(fft2(x)))

# %% A random 8x line mask keeps the centre band around DC
rng = RngStream(0)
mask = MaskSpec(acceleration=8, center_fraction=0.04).sample(64, rng)
print("lines kept:", np.flatnonzero(mask.selected))

meas = forward(x, mask)
zf = adjoint(meas)
cg = cg_least_squares(meas, l2_reg=0.01, iters=20)

for name, img in [("zero-filled", zf), ("CG l2=0.01", cg)]:
    print(f"{name:12s} SSIM={ssim(x, img):.3f}  pSNR={psnr(x, img):.2f} dB")

# %% Random head phantoms are what the learned models are trained on
for seed in range(3):
    ph = random_ellipses(64, seed=seed).image
    print(f"phantom {seed}: mean {ph.mean():.3f}, range [{ph.min():.2f}, {ph.max():.2f}]")
