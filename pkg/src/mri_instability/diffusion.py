"""Variance-exploding score prior and conditional predictor-corrector sampling.

Each reverse step at noise level ``sigma_i`` runs

1. data consistency against the noise-matched measurement
   ``y_i = y + sigma_i * M * F(w)`` with fresh white image noise ``w``,
2. a reverse-diffusion predictor
   ``x += (s_i^2 - s_{i-1}^2) score(x, s_i) + sqrt(s_i^2 - s_{i-1}^2) z``
   (with ``s_{-1} = 0``),
3. ``corrector_steps`` Langevin steps with step ``2 (snr * |z| / |score|)^2``.

Both predictor and corrector evaluate the score at ``sigma_i``.  After the
last step a final data-consistency pass against the clean ``y`` is applied
(``final_dc``).  The sampler state is a real image; the complex output of the
consistency step is projected onto its real part.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, SamplerDivergenceError, TrainingDivergenceError, DependencyError
from .recon import DenoiserNet, TrainLog, load_params, save_params, _net_from_header
from .tensor_core import RngStream, fft2, ifft2


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    n_scales: int = 1000

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.n_scales < 2:
            raise ConfigError("n_scales must be >= 2")

    @property
    def sigmas(self) -> np.ndarray:
        i = np.arange(self.n_scales)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** (i / (self.n_scales - 1))

    def sigma(self, i: int) -> float:
        return float(self.sigmas[i])


@dataclass(frozen=True)
class SamplerConfig:
    snr_eta: float = 0.517
    dc_lambda: float = 1.0
    corrector_steps: int = 1
    seed: int = 0
    noisy_measurement: bool = True
    dc_first: bool = True
    final_dc: bool = True

    def __post_init__(self):
        if self.snr_eta <= 0:
            raise ConfigError("snr_eta must be > 0")
        if not 0.0 <= self.dc_lambda <= 1.0:
            raise ConfigError("dc_lambda must be in [0, 1]")
        if self.corrector_steps < 0:
            raise ConfigError("corrector_steps must be >= 0")


# ------------------------------------------------------------------ scores

class AnalyticGMMScore:
    """Exact score of an isotropic Gaussian mixture smoothed by ``N(0, sigma^2 I)``.

    ``means``: ``(K, H, W)``; ``weights``: ``(K,)`` summing to one;
    ``variance``: per-component isotropic variance ``tau^2`` (scalar or ``(K,)``).
    """

    kind = "analytic_gmm"

    def __init__(self, means, weights=None, variance=0.01):
        self.means = np.asarray(means, dtype=np.float64)
        if self.means.ndim == 2:
            self.means = self.means[None]
        k = self.means.shape[0]
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (k,) or abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ConfigError("mixture weights must be non-negative and sum to 1")
        self.variance = np.broadcast_to(np.asarray(variance, dtype=np.float64), (k,)).copy()

    def _log_terms(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        v = self.variance + sigma**2
        d = self.means[0].size
        diff = self.means[None] - x[:, None]  # (B, K, H, W)
        sq = np.sum(diff**2, axis=(-1, -2))
        logp = np.log(self.weights) - 0.5 * sq / v - 0.5 * d * np.log(2 * np.pi * v)
        return logp, diff, v

    def log_density(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        logp, _, _ = self._log_terms(x[None] if single else x, sigma)
        mx = logp.max(axis=1, keepdims=True)
        out = (mx + np.log(np.exp(logp - mx).sum(axis=1, keepdims=True)))[:, 0]
        return float(out[0]) if single else out

    def __call__(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        xb = x[None] if single else x
        logp, diff, v = self._log_terms(xb, sigma)
        r = np.exp(logp - logp.max(axis=1, keepdims=True))
        r /= r.sum(axis=1, keepdims=True)
        out = np.einsum("bk,bkhw->bhw", r / v, diff)
        return out[0] if single else out


class LearnedScore:
    """Noise-conditional score ``net([c_in x, log(sigma)/4]) / sigma``.

    ``c_in = 1/sqrt(sigma^2 + sigma_data^2)``.  The net is a non-residual
    :class:`DenoiserNet` with two input channels; a zero-output net gives a
    zero score everywhere.
    """

    kind = "learned"

    def __init__(self, net: DenoiserNet | None = None, sigma_data: float = 0.5):
        self.net = net if net is not None else DenoiserNet(in_channels=2, residual=False)
        if self.net.in_channels != 2 or self.net.residual:
            raise ConfigError("score net needs 2 input channels and no residual head")
        self.sigma_data = sigma_data

    def _inputs(self, x, sigma):
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))[:, None, None]
        c_in = 1.0 / np.sqrt(sig**2 + self.sigma_data**2)
        cond = np.broadcast_to(np.log(sig) / 4.0, x.shape)
        return np.stack([x * c_in, cond], axis=-1), sig

    def graph(self, tape, x, sigma, params=None):
        inp, sig = self._inputs(x, sigma)
        out = self.net.graph(tape, tape.leaf(inp), params)
        return ad.elementwise_mul(out, 1.0 / sig), out

    def __call__(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        xb = x[None] if single else x
        score, _ = self.graph(ad.Tape(), xb, sigma)
        return score.value[0] if single else score.value


class CountingScore:
    """Wraps a score function and counts evaluations (one per image per call)."""

    def __init__(self, score):
        self.score = score
        self.calls = 0
        self.kind = getattr(score, "kind", "wrapped")

    def __call__(self, x, sigma):
        self.calls += 1
        return self.score(x, sigma)


def analytic_gmm_score(x, sigma, mixture: AnalyticGMMScore):
    return mixture(x, sigma)


# ----------------------------------------------------------- score training

@dataclass(frozen=True)
class ScoreTrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0


def train_score(score: LearnedScore | DenoiserNet, dataset, schedule: NoiseSchedule,
                tcfg: ScoreTrainConfig = ScoreTrainConfig()) -> LearnedScore:
    """Denoising score matching with ``sigma^2`` weighting.

    Each item gets a noise index drawn uniformly from the schedule; the loss is
    ``mean |sigma * score(x + sigma z) + z|^2``.  Returns a new
    :class:`LearnedScore` carrying ``train_log``.
    """
    import copy

    images = dataset.images() if hasattr(dataset, "images") else np.asarray(dataset)
    if len(images) == 0:
        raise DependencyError("score training dataset is empty")
    model = copy.deepcopy(score if isinstance(score, LearnedScore) else LearnedScore(score))
    rng = RngStream(tcfg.seed)
    sigmas = schedule.sigmas
    params = [p.copy() for p in model.net.params]
    opt = ad.Adam(lr=tcfg.lr)
    log = TrainLog()
    n = len(images)
    step = 0
    for _ in range(tcfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tcfg.batch_size):
            batch = images[order[start:start + tcfg.batch_size]]
            sig = sigmas[rng.integers(0, len(sigmas), size=len(batch))]
            z = rng.normal(batch.shape)
            noisy = batch + sig[:, None, None] * z
            tape = ad.Tape()
            p_nodes = [tape.leaf(p, requires_grad=True) for p in params]
            _, out = model.graph(tape, noisy, sig, p_nodes)
            loss = ad.mse(out, tape.leaf(-z))
            if not np.isfinite(loss.value):
                raise TrainingDivergenceError(f"score loss became non-finite at step {step}", step)
            ad.backward(tape, loss)
            params = opt.step(params, [p.grad for p in p_nodes])
            total += float(loss.value) * len(batch) / n
            step += 1
        log.loss.append(total)
    model.net.params = params
    model.train_log = log
    return model


def save_score(score: LearnedScore, directory, extra=None):
    header = {"type": "LearnedScore", "sigma_data": score.sigma_data, "net": score.net.header()}
    if getattr(score, "train_log", None) is not None:
        header["train_log"] = asdict(score.train_log)
    if extra:
        header["extra"] = extra
    save_params(directory, header, score.net.params)


def load_score(directory) -> LearnedScore:
    header, params = load_params(directory)
    if header.get("type") != "LearnedScore":
        raise DependencyError(f"{directory}: not a score checkpoint")
    score = LearnedScore(_net_from_header(header["net"], params), header["sigma_data"])
    if "train_log" in header:
        score.train_log = TrainLog(**header["train_log"])
    return score


# ------------------------------------------------------- data consistency

def data_consistency_kspace(k, y_t, mask, dc_lambda):
    """K-space form of the consistency step.

    Measured entries become ``dc_lambda * y_t + (1 - dc_lambda) * k``;
    unmeasured entries are returned unchanged (bit for bit).
    """
    if not 0.0 <= dc_lambda <= 1.0:
        raise ConfigError("dc_lambda must be in [0, 1]")
    measured = np.asarray(mask) != 0
    if dc_lambda == 1.0:
        blend = np.asarray(y_t, dtype=np.complex128)
    else:
        blend = dc_lambda * y_t + (1.0 - dc_lambda) * k
    return np.where(measured, blend, k)


def data_consistency(x_hat, y_t, mask, dc_lambda=1.0):
    """Image-domain consistency step; returns the complex image ``F^H k'``.

    For a real ``x_hat`` and a ``y_t`` that is itself the masked transform of
    a real image, the imaginary part vanishes to rounding.
    """
    return ifft2(data_consistency_kspace(fft2(x_hat), y_t, mask, dc_lambda))


# ------------------------------------------------------------------ sampler

def _item_norms(a):
    return np.sqrt(np.sum(a * a, axis=(-1, -2)))


def pc_sample(score, meas_ksp, mask, schedule: NoiseSchedule = NoiseSchedule(),
              scfg: SamplerConfig = SamplerConfig(), seeds=None, trace=None):
    """Conditional PC sampling; returns the real image (or batch of images).

    ``meas_ksp``: zero-filled k-space ``(H, W)`` or ``(B, H, W)``; ``mask``: 0/1
    map broadcastable to it.  ``seeds`` gives one seed per batch item
    (default ``scfg.seed`` for all), so every item is reproducible on its own.
    ``trace``, if a list, receives one dict per score evaluation.
    """
    y = np.asarray(meas_ksp, dtype=np.complex128)
    single = y.ndim == 2
    if single:
        y = y[None]
    mask = np.broadcast_to(np.asarray(getattr(mask, "matrix", mask), dtype=np.float64), y.shape)
    if not np.any(mask):
        raise ConfigError("pc_sample needs a non-empty mask")
    bsz, h, w = y.shape
    if seeds is None:
        seeds = [scfg.seed] * bsz
    if len(seeds) != bsz:
        raise ConfigError(f"got {len(seeds)} seeds for {bsz} items")
    rngs = [RngStream(s) for s in seeds]

    def draw():
        return np.stack([r.normal((h, w)) for r in rngs])

    sig = schedule.sigmas
    x = schedule.sigma_max * draw()
    lam = scfg.dc_lambda

    def dc(x, sigma):
        if scfg.noisy_measurement:
            y_t = y + sigma * mask * fft2(draw())
        else:
            y_t = y
        return data_consistency(x, y_t, mask, lam).real

    def check(x, i):
        if not np.all(np.isfinite(x)):
            raise SamplerDivergenceError(f"sampler state became non-finite at step {i}", i)

    for i in range(schedule.n_scales - 1, -1, -1):
        s_i = sig[i]
        s_prev = sig[i - 1] if i > 0 else 0.0
        if scfg.dc_first:
            x = dc(x, s_i)
        var = s_i**2 - s_prev**2
        s = score(x, s_i)
        z = draw()
        x = x + var * s + np.sqrt(var) * z
        if trace is not None:
            trace.append({"step": i, "kind": "predictor", "sigma": s_i,
                          "score_norm": float(_item_norms(s).mean()),
                          "x_norm": float(_item_norms(x).mean()), "step_size": var})
        for _ in range(scfg.corrector_steps):
            s = score(x, s_i)
            z = draw()
            s_norm = _item_norms(s)
            with np.errstate(divide="ignore", invalid="ignore"):
                eps = np.where(s_norm > 0, 2.0 * (scfg.snr_eta * _item_norms(z) / s_norm) ** 2, 0.0)
            eps = eps[:, None, None]
            x = x + eps * s + np.sqrt(2.0 * eps) * z
            if trace is not None:
                trace.append({"step": i, "kind": "corrector", "sigma": s_i,
                              "score_norm": float(s_norm.mean()),
                              "x_norm": float(_item_norms(x).mean()),
                              "step_size": float(eps.mean())})
        if not scfg.dc_first:
            x = dc(x, s_prev)
        check(x, i)
    if scfg.final_dc:
        x = data_consistency(x, y, mask, lam).real
    return x[0] if single else x


TRACE_FIELDS = ("step", "kind", "sigma", "score_norm", "x_norm", "step_size")


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        wr.writeheader()
        for row in trace:
            wr.writerow(row)


class DiffusionRecon:
    """Non-differentiable reconstructor running :func:`pc_sample` at a fixed seed."""

    differentiable = False

    def __init__(self, score, schedule=NoiseSchedule(), scfg=SamplerConfig(), name="diffusion"):
        self.score = score
        self.schedule = schedule
        self.scfg = scfg
        self.name = name

    def __call__(self, ksp, mask, seeds=None):
        return pc_sample(self.score, ksp, mask, self.schedule, self.scfg, seeds)
