"""Reconstructors: zero-filled, CGLS least squares, residual CNN and an unrolled cascade.

Every learned reconstructor exposes ``graph(tape, ksp, mask)`` which records
the map from (zero-filled) k-space to image on an autodiff tape, so the same
code path serves training, inference and the k-space attack.  ``ksp`` is a
node or array of shape ``(B, H, W)``; ``mask`` is a 0/1 map broadcastable to it.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DependencyError, ShapeMismatchError, TrainingDivergenceError
from .mri_forward import MaskSpec, Measurement, NoiseModel, adjoint, forward
from .tensor_core import RngStream, fft2, ifft2, l2_norm, load_tensor, save_tensor


def _as_batch(ksp):
    ksp = np.asarray(ksp)
    return (ksp[None], True) if ksp.ndim == 2 else (ksp, False)


def _mask_of(meas_or_mask):
    if isinstance(meas_or_mask, Measurement):
        return meas_or_mask.mask.matrix
    mask = getattr(meas_or_mask, "matrix", meas_or_mask)
    return np.asarray(mask, dtype=np.float64)


# ------------------------------------------------------------------- CNN

@dataclass
class DenoiserNet:
    """Plain 3x3 conv stack with leaky-ReLU activations.

    With ``residual=True`` the output is added to input channel 0.  The last
    layer starts at zero, so a fresh net is the identity (residual) or the
    zero map (non-residual).
    """

    in_channels: int = 1
    hidden: int = 16
    depth: int = 4
    slope: float = 0.1
    residual: bool = True
    seed: int = 0
    params: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.params is None:
            self.params = self.init_params(RngStream(self.seed))

    @property
    def layer_shapes(self):
        chans = [self.in_channels] + [self.hidden] * (self.depth - 1) + [1]
        return [(3, 3, cin, cout) for cin, cout in zip(chans[:-1], chans[1:])]

    def init_params(self, rng):
        params = []
        shapes = self.layer_shapes
        for li, shp in enumerate(shapes):
            if li == len(shapes) - 1:
                w = np.zeros(shp)
            else:
                w = rng.normal(shp) * np.sqrt(2.0 / (9 * shp[2]))
            params += [w, np.zeros(shp[3])]
        return params

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def graph(self, tape, x, params=None):
        """Record the net on ``tape``.  ``x``: ``(B, H, W)`` or ``(B, H, W, C)``."""
        params = self.params if params is None else params
        vx = x.value if isinstance(x, ad.Node) else np.asarray(x)
        if vx.ndim == 3:
            if self.in_channels != 1:
                raise ShapeMismatchError(f"net expects {self.in_channels} channels")
            h = ad.reshape(x, vx.shape + (1,)) if isinstance(x, ad.Node) else tape.leaf(vx[..., None])
        elif vx.ndim == 4 and vx.shape[-1] == self.in_channels:
            h = x if isinstance(x, ad.Node) else tape.leaf(vx)
        else:
            raise ShapeMismatchError(f"net input shape {vx.shape} incompatible with {self.in_channels} channels")
        skip = h
        n_layers = len(params) // 2
        for li in range(n_layers):
            h = ad.conv2d(h, params[2 * li], params[2 * li + 1])
            if li < n_layers - 1:
                h = ad.leaky_relu(h, self.slope)
        out = ad.reshape(h, h.shape[:3])
        if self.residual:
            out = ad.add(out, _channel0(skip))
        return out

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2 or (x.ndim == 3 and self.in_channels > 1)
        xb = x[None] if squeeze else x
        out = self.graph(ad.Tape(), xb).value
        return out[0] if squeeze else out

    def header(self):
        return {"type": "DenoiserNet", "in_channels": self.in_channels, "hidden": self.hidden,
                "depth": self.depth, "slope": self.slope, "residual": self.residual,
                "seed": self.seed}


def _channel0(node):
    """Slice channel 0 of an NHWC node as a differentiable op."""
    v = node.value

    def vjp(g):
        full = np.zeros_like(v)
        full[..., 0] = g
        return (full,)

    return node.tape.record(v[..., 0].copy(), "channel0", (node,), vjp)


# --------------------------------------------------------- k-space helpers

def zero_filled_graph(tape, ksp, mask):
    """``Re(F^H (M * ksp))`` recorded on ``tape``."""
    k = ksp if isinstance(ksp, ad.Node) else tape.leaf(np.asarray(ksp, dtype=np.complex128))
    return ad.real_part(ad.ifft2_lin(ad.mask_mul(k, mask)))


def data_grad_step(x, y_node, mask, step_size):
    """``x - step * Re(F^H (M F x - y))``: one Landweber step on ``||Ax - y||^2``."""
    resid = ad.sub(ad.mask_mul(ad.fft2_lin(x), mask), y_node)
    return ad.sub(x, ad.scalar_mul(step_size, ad.real_part(ad.ifft2_lin(resid))))


# --------------------------------------------------------------- recon API

def zero_filled(meas: Measurement) -> np.ndarray:
    """Zero-filled reconstruction (raw values, no clamping)."""
    return adjoint(meas)


def cg_least_squares(meas: Measurement, l2_reg: float = 0.0, iters: int = 20,
                     return_history: bool = False):
    """CGLS for ``min ||A x - y||^2 + l2_reg ||x||^2`` over real images.

    The tracked residual ``sqrt(||y - A x||^2 + l2_reg ||x||^2)`` is
    non-increasing.  Stops early once the normal-equation residual vanishes.
    """
    if l2_reg < 0:
        raise ConfigError("l2_reg must be >= 0")
    mask = meas.mask.matrix
    y = meas.ksp

    def A(v):
        return mask * fft2(v)

    def AH(r):
        return ifft2(mask * r).real

    x = np.zeros(mask.shape)
    r = y.copy()
    s = AH(r) - l2_reg * x
    p = s.copy()
    gamma = np.sum(s * s)
    history = [float(l2_norm(r))]
    gamma0 = gamma
    for _ in range(iters):
        if gamma <= 1e-30 * max(gamma0, 1e-300):
            break
        q = A(p)
        denom = np.sum(np.abs(q) ** 2) + l2_reg * np.sum(p * p)
        if denom <= 0:
            break
        alpha = gamma / denom
        x = x + alpha * p
        r = r - alpha * q
        s = AH(r) - l2_reg * x
        gamma_new = np.sum(s * s)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        history.append(float(np.sqrt(l2_norm(r) ** 2 + l2_reg * np.sum(x * x))))
    return (x, history) if return_history else x


class ZeroFilledRecon:
    name = "zero_filled"
    differentiable = True
    params: list = []

    def graph(self, tape, ksp, mask, params=None):
        return zero_filled_graph(tape, ksp, mask)

    def __call__(self, ksp, mask):
        ksp, single = _as_batch(ksp)
        out = ifft2(_mask_of(mask) * ksp).real
        return out[0] if single else out


class CGRecon:
    name = "cg"
    differentiable = False

    def __init__(self, l2_reg=0.01, iters=20):
        self.l2_reg, self.iters = l2_reg, iters

    def __call__(self, ksp, mask):
        from .mri_forward import SamplingMask
        ksp, single = _as_batch(ksp)
        mm = _mask_of(mask)
        outs = []
        for b in range(ksp.shape[0]):
            mb = mm if mm.ndim == 2 else mm[b]
            sm = SamplingMask(mb.shape[0], mb.shape[1], mb[:, 0] != 0)
            outs.append(cg_least_squares(Measurement(sm.apply(ksp[b]), sm), self.l2_reg, self.iters))
        out = np.stack(outs)
        return out[0] if single else out


class DenoiserRecon:
    """``f(A^H y)`` with a residual CNN ``f``."""

    differentiable = True

    def __init__(self, net: DenoiserNet, name="denoiser"):
        self.net = net
        self.name = name

    @property
    def params(self):
        return self.net.params

    def graph(self, tape, ksp, mask, params=None):
        return self.net.graph(tape, zero_filled_graph(tape, ksp, mask), params)

    def __call__(self, ksp, mask):
        ksp, single = _as_batch(ksp)
        out = self.graph(ad.Tape(), ksp, _mask_of(mask)).value
        return out[0] if single else out


@dataclass(frozen=True)
class UnrolledConfig:
    n_iters: int = 8
    step_size: float = 1.0
    shared_weights: bool = True

    def __post_init__(self):
        if self.n_iters < 0:
            raise ConfigError("n_iters must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")


class UnrolledRecon:
    """Cascade of data-gradient steps, each followed by a CNN denoiser."""

    differentiable = True

    def __init__(self, nets, ucfg: UnrolledConfig = UnrolledConfig(), name="unrolled"):
        if isinstance(nets, DenoiserNet):
            nets = [nets]
        nets = list(nets)
        if ucfg.shared_weights and len(nets) != 1:
            raise ConfigError("shared_weights needs exactly one net")
        if not ucfg.shared_weights and len(nets) != ucfg.n_iters:
            raise ConfigError(f"expected {ucfg.n_iters} nets, got {len(nets)}")
        self.nets = nets
        self.ucfg = ucfg
        self.name = name

    @classmethod
    def create(cls, ucfg: UnrolledConfig, seed=0, **net_kwargs):
        n = 1 if ucfg.shared_weights else ucfg.n_iters
        return cls([DenoiserNet(seed=seed + i, **net_kwargs) for i in range(n)], ucfg)

    @property
    def params(self):
        return [p for net in self.nets for p in net.params]

    def _split(self, params):
        per = len(self.nets[0].params)
        return [params[i * per:(i + 1) * per] for i in range(len(self.nets))]

    def graph(self, tape, ksp, mask, params=None, trace=None):
        groups = self._split(self.params if params is None else params)
        k = ksp if isinstance(ksp, ad.Node) else tape.leaf(np.asarray(ksp, dtype=np.complex128))
        y = ad.mask_mul(k, mask)
        x = ad.real_part(ad.ifft2_lin(y))
        for it in range(self.ucfg.n_iters):
            x = data_grad_step(x, y, mask, self.ucfg.step_size)
            gi = 0 if self.ucfg.shared_weights else it
            x = self.nets[gi].graph(tape, x, groups[gi])
            if trace is not None:
                trace.append(x.value)
        return x

    def __call__(self, ksp, mask):
        ksp, single = _as_batch(ksp)
        out = self.graph(ad.Tape(), ksp, _mask_of(mask)).value
        return out[0] if single else out


def denoiser_recon(net: DenoiserNet, meas: Measurement) -> np.ndarray:
    return DenoiserRecon(net)(meas.ksp, meas.mask.matrix)


def unrolled_recon(net, meas: Measurement, ucfg: UnrolledConfig = UnrolledConfig()) -> np.ndarray:
    model = net if isinstance(net, UnrolledRecon) else UnrolledRecon(net, ucfg)
    return model(meas.ksp, meas.mask.matrix)


# --------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lambda_fid: float = 1.0
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.lambda_fid < 0:
            raise ConfigError("lambda_fid must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TrainLog:
    """Per-epoch means of the composite loss and its two terms."""

    loss: list = field(default_factory=list)
    image_term: list = field(default_factory=list)
    data_term: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.loss[-1] if self.loss else float("nan")


def _as_model(net):
    if isinstance(net, DenoiserNet):
        return DenoiserRecon(net)
    return net


def simulate_batch(images, mask_spec: MaskSpec, rng: RngStream, noise_sigma=0.0):
    """Fresh mask per image; returns zero-filled k-space ``(B,H,W)`` and masks ``(B,H,W)``."""
    ksps, masks = [], []
    noise = NoiseModel(noise_sigma)
    for img in images:
        mask = mask_spec.sample(img.shape[0], rng, img.shape[1])
        meas = forward(img, mask, noise, rng)
        ksps.append(meas.ksp)
        masks.append(mask.matrix)
    return np.stack(ksps), np.stack(masks)


def composite_loss(tape, model, params, ksp, masks, target, lambda_fid):
    """``lambda_fid * MSE(x, f) + ||M F f - y||^2 / (#measured entries)``; returns (loss, terms)."""
    p_nodes = [tape.leaf(p, requires_grad=True) for p in params]
    ksp_node = tape.leaf(ksp)
    f = model.graph(tape, ksp_node, masks, p_nodes)
    image_term = ad.mse(f, tape.leaf(target))
    y = ad.mask_mul(ksp_node, masks)
    resid = ad.sub(ad.mask_mul(ad.fft2_lin(f), masks), y)
    m = float(np.broadcast_to(masks, ksp.shape).sum())
    data_term = ad.scalar_mul(1.0 / m, ad.l2_squared(resid))
    terms = [data_term]
    if lambda_fid > 0:
        terms.insert(0, ad.scalar_mul(lambda_fid, image_term))
    loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return loss, p_nodes, float(image_term.value), float(data_term.value)


def train_supervised(net, dataset, mask_distribution: MaskSpec, tcfg: TrainConfig):
    """Fit a denoiser (or unrolled cascade) on simulated measurements with Adam.

    Returns a trained copy; the input model is left untouched.  The copy
    carries ``train_log`` (a :class:`TrainLog`).
    """
    images = dataset.images() if hasattr(dataset, "images") else np.asarray(dataset)
    if len(images) == 0:
        raise DependencyError("training dataset is empty")
    model = copy.deepcopy(_as_model(net))
    rng = RngStream(tcfg.seed)
    params = [p.copy() for p in model.params]
    opt = ad.Adam(lr=tcfg.lr)
    log = TrainLog()
    step = 0
    n = len(images)
    for _epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        tot = img_t = dat_t = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            batch = images[idx]
            ksp, masks = simulate_batch(batch, mask_distribution, rng, tcfg.noise_sigma)
            tape = ad.Tape()
            loss, p_nodes, it, dt = composite_loss(tape, model, params, ksp, masks, batch,
                                                   tcfg.lambda_fid)
            if not np.isfinite(loss.value):
                raise TrainingDivergenceError(f"training loss became non-finite at step {step}", step)
            ad.backward(tape, loss)
            params = opt.step(params, [p.grad for p in p_nodes])
            w = len(idx) / n
            tot += w * float(loss.value)
            img_t += w * it
            dat_t += w * dt
            step += 1
        log.loss.append(tot)
        log.image_term.append(img_t)
        log.data_term.append(dat_t)
    _assign_params(model, params)
    model.train_log = log
    return model


def _assign_params(model, params):
    if isinstance(model, DenoiserRecon):
        model.net.params = list(params)
    else:
        per = len(model.nets[0].params)
        for i, net in enumerate(model.nets):
            net.params = list(params[i * per:(i + 1) * per])


# ------------------------------------------------------------ checkpoints

def save_params(directory, header: dict, params) -> None:
    """Write ``model.json`` plus one TNSR file per parameter (flattened to 2-D)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shapes = []
    for i, p in enumerate(params):
        p = np.asarray(p)
        shapes.append(list(p.shape))
        save_tensor(d / f"param_{i:03d}.tnsr", p.reshape(-1, p.shape[-1]) if p.ndim else p.reshape(1, 1))
    header = dict(header, param_shapes=shapes, n_params=len(shapes))
    (d / "model.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_params(directory):
    d = Path(directory)
    path = d / "model.json"
    if not path.exists():
        raise DependencyError(f"no checkpoint at {d} (run the train step first)")
    header = json.loads(path.read_text())
    params = [load_tensor(d / f"param_{i:03d}.tnsr").reshape(shape)
              for i, shape in enumerate(header["param_shapes"])]
    return header, params


def _net_from_header(h, params):
    return DenoiserNet(h["in_channels"], h["hidden"], h["depth"], h["slope"], h["residual"],
                       h["seed"], params=list(params))


def save_reconstructor(model, directory, extra=None) -> None:
    if isinstance(model, DenoiserRecon):
        header = {"type": "DenoiserRecon", "name": model.name, "net": model.net.header()}
    elif isinstance(model, UnrolledRecon):
        header = {"type": "UnrolledRecon", "name": model.name, "net": model.nets[0].header(),
                  "n_nets": len(model.nets), "ucfg": asdict(model.ucfg)}
    else:
        raise ConfigError(f"cannot checkpoint {type(model).__name__}")
    log = getattr(model, "train_log", None)
    if log is not None:
        header["train_log"] = asdict(log)
    if extra:
        header["extra"] = extra
    save_params(directory, header, model.params)


def load_reconstructor(directory):
    header, params = load_params(directory)
    if header["type"] == "DenoiserRecon":
        model = DenoiserRecon(_net_from_header(header["net"], params), header["name"])
    elif header["type"] == "UnrolledRecon":
        per = len(params) // header["n_nets"]
        nets = [_net_from_header(dict(header["net"], seed=header["net"]["seed"] + i),
                                 params[i * per:(i + 1) * per]) for i in range(header["n_nets"])]
        model = UnrolledRecon(nets, UnrolledConfig(**header["ucfg"]), header["name"])
    else:
        raise DependencyError(f"{directory}: unknown checkpoint type {header['type']!r}")
    if "train_log" in header:
        model.train_log = TrainLog(**header["train_log"])
    return model
