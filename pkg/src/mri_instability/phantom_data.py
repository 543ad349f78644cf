"""Synthetic ground-truth images and dataset persistence.

Two phantom families are available: the modified Shepp-Logan head and a
randomized "head" made of a bright skull ring, a tissue disc and a handful of
random ellipses.  Datasets are directories of TNSR files plus ``manifest.json``.

Manifest schema (``format_version`` 1)::

    {
      "format_version": 1,
      "config": {...DatasetConfig fields...},
      "items": [
        {"index": 0, "file": "0.tnsr", "kind": "random_ellipses",
         "seed": 1234, "size": 64, "split": "train"},
        ...
      ]
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError
from .tensor_core import RngStream, _is_pow2, load_tensor, save_tensor

# (intensity, semi-axis a, semi-axis b, center x, center y, rotation in degrees);
# modified Shepp-Logan intensities so the summed map stays inside [0, 1].
SHEPP_LOGAN_ELLIPSES = (
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)

PHANTOM_KINDS = ("shepp_logan", "random_ellipses")


def pixel_grid(size: int):
    """Pixel-center coordinates in ``[-1, 1)``; pixel ``(size//2, size//2)`` is the origin.

    Rows run top to bottom, so ``y`` decreases with the row index.
    """
    t = (np.arange(size) - size // 2) / (size / 2)
    xx, yy = np.meshgrid(t, -t)
    return xx, yy


def _rasterize(ellipses, size: int) -> np.ndarray:
    xx, yy = pixel_grid(size)
    img = np.zeros((size, size))
    for value, a, b, x0, y0, deg in ellipses:
        th = np.deg2rad(deg)
        dx, dy = xx - x0, yy - y0
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return img


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    kind: str
    seed: int
    size: int


def _check_size(size):
    if not _is_pow2(int(size)):
        raise ConfigError(f"phantom size must be a power of two, got {size}")


def shepp_logan(size: int) -> Phantom:
    _check_size(size)
    img = np.clip(_rasterize(SHEPP_LOGAN_ELLIPSES, size), 0.0, 1.0)
    return Phantom(img, "shepp_logan", 0, size)


# skull ring and tissue disc shared by every random phantom
_SKULL = (0.95, 0.72, 0.90, 0.0, 0.0, 0.0)
_BRAIN = (-0.75, 0.64, 0.82, 0.0, 0.0, 0.0)


def random_ellipses(size: int, count_range=(3, 8), rng: RngStream | None = None,
                    seed: int | None = None) -> Phantom:
    """Random head-like phantom.

    A skull ring (0.95) encloses a tissue disc (0.2); ``count_range`` gives the
    inclusive range for the number of extra ellipses placed inside the disc,
    each with a random intensity offset in ``[-0.15, 0.5]``.
    """
    _check_size(size)
    if rng is None:
        rng = RngStream(0 if seed is None else seed)
    lo, hi = count_range
    if lo < 0 or hi < lo:
        raise ConfigError(f"bad count_range {count_range}")
    count = int(rng.integers(lo, hi + 1))
    ellipses = [_SKULL, _BRAIN]
    for _ in range(count):
        r = 0.55 * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        ellipses.append((
            float(rng.uniform(-0.15, 0.5)),
            float(rng.uniform(0.05, 0.3)),
            float(rng.uniform(0.05, 0.3)),
            float(r * np.cos(phi) * 0.8),
            float(r * np.sin(phi)),
            float(rng.uniform(0, 180)),
        ))
    img = np.clip(_rasterize(ellipses, size), 0.0, 1.0)
    return Phantom(img, "random_ellipses", rng.seed, size)


def make_phantom(kind: str, size: int, seed: int, count_range=(3, 8)) -> Phantom:
    if kind == "shepp_logan":
        ph = shepp_logan(size)
        return Phantom(ph.image, kind, seed, size)
    if kind == "random_ellipses":
        return random_ellipses(size, count_range, RngStream(seed))
    raise ConfigError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")


@dataclass
class Dataset:
    items: list
    split: str

    def __len__(self):
        return len(self.items)

    def images(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, 0, 0))
        return np.stack([p.image for p in self.items])

    @property
    def seeds(self):
        return [p.seed for p in self.items]


@dataclass(frozen=True)
class DatasetConfig:
    n_items: int = 100
    size: int = 64
    kind: str = "random_ellipses"
    seed: int = 0
    train_fraction: float = 0.8
    count_range: tuple = field(default=(3, 8))

    def __post_init__(self):
        object.__setattr__(self, "count_range", tuple(self.count_range))
        if self.n_items < 0:
            raise ConfigError("n_items must be >= 0")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must be in [0, 1]")
        _check_size(self.size)


def item_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def build_dataset(config: DatasetConfig):
    """Return ``(train, test)`` datasets; the first ``floor(0.8 n)`` items train."""
    n_train = int(np.floor(config.train_fraction * config.n_items + 1e-9))
    train, test = Dataset([], "train"), Dataset([], "test")
    for i in range(config.n_items):
        ph = make_phantom(config.kind, config.size, item_seed(config.seed, i), config.count_range)
        (train if i < n_train else test).items.append(ph)
    return train, test


MANIFEST = "manifest.json"


def save_dataset(directory, train: Dataset, test: Dataset, config: DatasetConfig | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, (split, ph) in enumerate(
            [("train", p) for p in train.items] + [("test", p) for p in test.items]):
        name = f"{index}.tnsr"
        save_tensor(directory / name, ph.image)
        entries.append({"index": index, "file": name, "kind": ph.kind, "seed": int(ph.seed),
                        "size": int(ph.size), "split": split})
    manifest = {"format_version": 1,
                "config": asdict(config) if config is not None else None,
                "items": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory / MANIFEST


def load_dataset(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["items"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    train, test = Dataset([], "train"), Dataset([], "test")
    for e in entries:
        f = directory / e["file"]
        if not f.exists():
            raise DatasetError(f"manifest lists missing file {e['file']}")
        img = load_tensor(f)
        if img.shape != (e["size"], e["size"]):
            raise DatasetError(f"{e['file']}: shape {img.shape} disagrees with manifest size {e['size']}")
        if e["split"] not in ("train", "test"):
            raise DatasetError(f"{e['file']}: unknown split {e['split']!r}")
        (train if e["split"] == "train" else test).items.append(
            Phantom(img, e["kind"], int(e["seed"]), int(e["size"])))
    return train, test
