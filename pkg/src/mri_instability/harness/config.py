"""Experiment configuration: JSON schema, validation, overrides and hashing.

A config file is a JSON object whose sections mirror the dataclasses below.
Unknown keys anywhere are rejected with the full list of offending paths.
Seeds inside sections are offsets added to the top-level ``seed``, so
``--seed N`` shifts every random stream of a run at once.

Environment overrides use the ``MRIINST_`` prefix and ``__`` as the path
separator, e.g. ``MRIINST_ATTACK__ITERS=50`` or
``MRIINST_MODELS__DIFFUSION__N_SCALES=200``.  Values are parsed as JSON when
possible, otherwise taken as strings.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ConfigError

ENV_PREFIX = "MRIINST_"


@dataclass(frozen=True)
class DatasetSection:
    n_items: int = 100
    size: int = 64
    kind: str = "random_ellipses"
    seed: int = 0
    train_fraction: float = 0.8
    count_range: tuple = (3, 8)


@dataclass(frozen=True)
class MaskSection:
    acceleration: float = 8.0
    center_fraction: float = 0.04
    noise_sigma: float = 0.0
    seed: int = 1


@dataclass(frozen=True)
class TrainSection:
    lambda_fid: float = 1.0
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 2


@dataclass(frozen=True)
class DenoiserSection:
    enabled: bool = True
    hidden: int = 16
    depth: int = 4
    init_seed: int = 3
    train: TrainSection = field(default_factory=TrainSection)


@dataclass(frozen=True)
class UnrolledSection:
    enabled: bool = True
    hidden: int = 16
    depth: int = 4
    n_iters: int = 8
    step_size: float = 1.0
    shared_weights: bool = True
    init_seed: int = 4
    train: TrainSection = field(default_factory=lambda: TrainSection(batch_size=4, epochs=10, seed=5))


@dataclass(frozen=True)
class ScoreTrainSection:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 6


@dataclass(frozen=True)
class DiffusionSection:
    enabled: bool = True
    hidden: int = 16
    depth: int = 4
    init_seed: int = 7
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    n_scales: int = 1000
    snr_eta: float = 0.517
    dc_lambda: float = 1.0
    corrector_steps: int = 1
    sampler_seed: int = 8
    noisy_measurement: bool = True
    train: ScoreTrainSection = field(default_factory=ScoreTrainSection)


@dataclass(frozen=True)
class ModelsSection:
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    unrolled: UnrolledSection = field(default_factory=UnrolledSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)


@dataclass(frozen=True)
class ReconstructSection:
    accelerations: tuple = (4.0, 8.0, 12.0)
    models: tuple = ("zero_filled", "cg", "denoiser", "unrolled", "diffusion")
    cg_l2_reg: float = 0.01
    cg_iters: int = 20
    seed: int = 9


@dataclass(frozen=True)
class AttackSection:
    epsilons: tuple = (0.005, 0.01, 0.02, 0.05, 0.1)
    iters: int = 200
    lr: float | None = None
    init_scale_c: float = 1e4
    sources: tuple = ("denoiser", "unrolled")
    seed: int = 10


@dataclass(frozen=True)
class TransferSection:
    epsilons: tuple = (0.01, 0.05)
    sources: tuple = ("denoiser",)
    targets: tuple = ("denoiser", "unrolled", "diffusion")
    sampler_seeds: tuple | None = None
    max_items: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/desk"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    mask: MaskSection = field(default_factory=MaskSection)
    models: ModelsSection = field(default_factory=ModelsSection)
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    attack: AttackSection = field(default_factory=AttackSection)
    transfer: TransferSection = field(default_factory=TransferSection)

    def to_dict(self):
        return _plain(asdict(self))

    def canonical_json(self) -> str:
        """Sorted, compact JSON of everything that affects results (``output_dir`` excluded)."""
        data = self.to_dict()
        data.pop("output_dir")
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def seed_for(self, local: int) -> int:
        return int(self.seed) + int(local)

    def validate(self):
        known = {"zero_filled", "cg", "denoiser", "unrolled", "diffusion"}
        problems = []
        for name in self.reconstruct.models:
            if name not in known:
                problems.append(f"reconstruct.models: unknown model {name!r}")
        for name in self.attack.sources + self.transfer.sources:
            if name not in ("denoiser", "unrolled", "zero_filled"):
                problems.append(f"attack/transfer source {name!r} is not a differentiable model")
        for name in self.transfer.targets:
            if name not in known:
                problems.append(f"transfer.targets: unknown model {name!r}")
        if any(e < 0 for e in self.attack.epsilons + self.transfer.epsilons):
            problems.append("epsilons must be >= 0")
        if self.models.diffusion.n_scales < 2:
            problems.append("models.diffusion.n_scales must be >= 2")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path, unknown):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            unknown.append(f"{path}{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, f"{path}{f.name}.", unknown)
        elif isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = []
    cfg = _build(ExperimentConfig, data, "", unknown)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    return cfg.validate()


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Set ``a.b.c``-style paths on a nested dict (copied)."""
    data = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: {p} is not a section")
        node[parts[-1]] = value
    return data


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = ".".join(p.lower() for p in key[len(ENV_PREFIX):].split("__"))
        try:
            out[path] = json.loads(raw)
        except json.JSONDecodeError:
            out[path] = raw
    return out


def load_config(path=None, overrides=None, environ=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    merged = apply_overrides(data, env_overrides(environ))
    if overrides:
        merged = apply_overrides(merged, overrides)
    return config_from_dict(merged)


def dataset_config(cfg: ExperimentConfig):
    from ..phantom_data import DatasetConfig

    d = cfg.dataset
    return DatasetConfig(d.n_items, d.size, d.kind, cfg.seed_for(d.seed), d.train_fraction,
                         tuple(d.count_range))
