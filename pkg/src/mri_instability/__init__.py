"""Desk-scale study of how MRI reconstructors react to small k-space perturbations.

The package is plain numpy: a radix-2 FFT and undersampled Fourier operator,
synthetic phantoms, a small reverse-mode autodiff engine, supervised
reconstructors (denoiser, unrolled), a score-based diffusion sampler with data
consistency, norm-bounded worst-case attacks and image quality metrics.
"""
from .attack import AttackConfig, random_perturb, transfer_evaluate, worst_case_perturb
from .diffusion import DiffusionRecon, LearnedScore, NoiseSchedule, SamplerConfig, pc_sample
from .errors import MriInstabilityError
from .metrics import psnr, ssim
from .mri_forward import Measurement, NoiseModel, SamplingMask, adjoint, forward, make_cartesian_mask
from .phantom_data import DatasetConfig, build_dataset, random_ellipses, shepp_logan
from .recon import DenoiserNet, DenoiserRecon, TrainConfig, UnrolledConfig, UnrolledRecon, train_supervised
from .tensor_core import RngStream, fft2, ifft2

__version__ = "0.1.0"
