"""Ground truth construction, synthetic scenes, dataset ingestion and splits."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ConfigError, check_rank
from .gate import check_subset

__all__ = [
    "Sample",
    "SynthConfig",
    "extract_edges",
    "generate_synthetic",
    "load_nuclei_dataset",
    "split_dataset",
    "make_sample",
    "write_volume",
    "read_volume",
    "save_samples",
    "load_samples",
]

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    image: np.ndarray  # float32 [1, *spatial] in [0, 1]
    instance_labels: np.ndarray  # int32 [*spatial]
    object_mask: np.ndarray  # uint8
    edge_mask: np.ndarray  # uint8
    id: str

    @property
    def spatial_shape(self):
        return self.instance_labels.shape

    def validate(self) -> None:
        if not np.array_equal(self.object_mask.astype(bool), self.instance_labels > 0):
            raise ValueError(f"{self.id}: object mask disagrees with instance labels")
        if not check_subset(self.edge_mask, self.object_mask):
            raise ValueError(f"{self.id}: edge mask is not a subset of the object mask")
        if self.object_mask.any() and not self.edge_mask.any():
            raise ValueError(f"{self.id}: nonempty object with empty edge mask")


def extract_edges(instance_labels) -> np.ndarray:
    """1-pixel interior boundaries of every labelled instance.

    A foreground pixel is an edge when any face neighbour (4-connected in 2D,
    6-connected in 3D) carries a different label; outside the array counts as
    background. Interfaces between touching instances are marked on both sides.
    """
    lab = np.asarray(instance_labels)
    if lab.size and lab.min() < 0:
        raise ValueError("instance labels must be non-negative")
    padded = np.pad(lab, 1, mode="constant", constant_values=0)
    core = tuple(slice(1, -1) for _ in range(lab.ndim))
    edge = np.zeros(lab.shape, dtype=bool)
    for axis in range(lab.ndim):
        for shift in (-1, 1):
            idx = list(core)
            idx[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
            edge |= padded[tuple(idx)] != lab
    return (edge & (lab > 0)).astype(np.uint8)


def make_sample(image, instance_labels, sample_id: str) -> Sample:
    labels = np.asarray(instance_labels, dtype=np.int32)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == labels.ndim:
        image = image[None]
    return Sample(
        image=image,
        instance_labels=labels,
        object_mask=(labels > 0).astype(np.uint8),
        edge_mask=extract_edges(labels),
        id=sample_id,
    )


@dataclass
class SynthConfig:
    rank: int = 2
    size: list | None = None
    n_samples: int = 200
    n_objects: list = field(default_factory=lambda: [3, 12])
    radius: list | None = None
    overlap_allowed: bool = True
    noise_sigma: float = 0.05
    seed: int = 0

    def resolved(self) -> "SynthConfig":
        check_rank(self.rank)
        size = list(self.size) if self.size else [64, 64] if self.rank == 2 else [32, 32, 32]
        radius = list(self.radius) if self.radius else [4.0, 12.0] if self.rank == 2 else [3.0, 8.0]
        if len(size) != self.rank:
            raise ConfigError(f"size {size} does not match rank {self.rank}")
        if any(s % 16 for s in size):
            raise ConfigError(f"synthetic extents {size} must be divisible by 16")
        lo, hi = radius
        if not 0 < lo <= hi:
            raise ConfigError(f"degenerate radius range {radius}")
        nlo, nhi = self.n_objects
        if not 0 <= nlo <= nhi:
            raise ConfigError(f"invalid object count range {self.n_objects}")
        if self.n_samples < 0 or self.noise_sigma < 0:
            raise ConfigError("n_samples and noise_sigma must be non-negative")
        return SynthConfig(self.rank, size, self.n_samples, [int(nlo), int(nhi)], [float(lo), float(hi)],
                           self.overlap_allowed, float(self.noise_sigma), int(self.seed))


def _random_rotation(rng, rank):
    if rank == 2:
        t = rng.uniform(0, np.pi)
        return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _synth_one(rng, cfg: SynthConfig, sample_id: str) -> Sample:
    shape = tuple(cfg.size)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"), axis=-1)
    labels = np.zeros(shape, dtype=np.int32)
    background = rng.uniform(0.05, 0.25)
    image = np.full(shape, background)
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    placed = 0
    for _ in range(n if cfg.overlap_allowed else 20 * n):
        if placed == n:
            break
        center = rng.uniform(0, np.array(shape, dtype=float))
        radii = rng.uniform(cfg.radius[0], cfg.radius[1], size=cfg.rank)
        rot = _random_rotation(rng, cfg.rank)
        local = (grid - center) @ rot
        inside = np.sum((local / radii) ** 2, axis=-1) <= 1.0
        if not inside.any():
            continue
        if not cfg.overlap_allowed and (labels[inside] > 0).any():
            continue
        placed += 1
        labels[inside] = placed
        # shaded interior so touching objects differ in texture as well as level
        shade = 1.0 - 0.3 * np.sum((local / radii) ** 2, axis=-1)
        image[inside] = rng.uniform(0.45, 0.95) * shade[inside]
    if cfg.noise_sigma:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=shape)
    image = np.clip(image, 0.0, 1.0)
    return make_sample(image.astype(np.float32), labels, sample_id)


def generate_synthetic(cfg: SynthConfig) -> list:
    """Random ellipses (2D) or ellipsoids (3D); fully determined by the seed."""
    cfg = cfg.resolved()
    rng = np.random.default_rng(cfg.seed)
    prefix = "synth2d" if cfg.rank == 2 else "synth3d"
    return [_synth_one(rng, cfg, f"{prefix}_{i:04d}") for i in range(cfg.n_samples)]


def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / max(arr.max(), 1.0)
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_nuclei_dataset(root_dir, target_size: int = 256) -> list:
    """Read the Data Science Bowl 2018 training layout.

    ``root_dir/<id>/images/<id>.png`` plus ``root_dir/<id>/masks/*.png`` with one
    binary mask per instance. Masks merge in filename order, later files
    overwriting earlier ones. Images are resized linearly, labels by nearest
    neighbour, and edges are re-extracted at the target size.
    """
    from PIL import Image

    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    samples = []
    for sdir in sorted(p for p in root.iterdir() if p.is_dir()):
        img_files = sorted((sdir / "images").glob("*")) if (sdir / "images").is_dir() else []
        if not img_files:
            warnings.warn(f"{sdir.name}: no image under images/, skipped")
            continue
        if not (sdir / "masks").is_dir():
            warnings.warn(f"{sdir.name}: missing masks directory, skipped")
            continue
        image = _read_gray(img_files[0])
        labels = np.zeros(image.shape, dtype=np.int32)
        for k, mpath in enumerate(sorted((sdir / "masks").glob("*")), start=1):
            m = _read_gray(mpath) > 0
            if m.shape != labels.shape:
                warnings.warn(f"{sdir.name}: mask {mpath.name} has shape {m.shape}, expected {labels.shape}")
                continue
            labels[m] = k
        if not labels.any():
            warnings.warn(f"{sdir.name}: no foreground in masks, skipped")
            continue
        size = (target_size, target_size)
        img_r = Image.fromarray(image.astype(np.float32), mode="F").resize(size, Image.BILINEAR)
        lab_r = Image.fromarray(labels, mode="I").resize(size, Image.NEAREST)
        samples.append(make_sample(np.clip(np.asarray(img_r), 0, 1), np.asarray(lab_r), sdir.name))
    if not samples:
        raise ValueError(f"no usable samples found under {root}")
    return samples


def split_dataset(samples, test_frac: float = 0.2, seed: int = 0):
    """Seeded shuffle into (train, test) with ``round(test_frac * N)`` test samples."""
    if not 0 < test_frac < 1:
        raise ValueError(f"test_frac must lie in (0, 1), got {test_frac}")
    samples = list(samples)
    n = len(samples)
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_test = min(max(int(round(test_frac * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test = [samples[i] for i in sorted(order[:n_test])]
    train = [samples[i] for i in sorted(order[n_test:])]
    return train, test


_DTYPES = {"u8": "<u1", "u16": "<u2", "f32": "<f4"}


def write_volume(path, array, dtype: str | None = None) -> None:
    """Raw little-endian data preceded by a one-line JSON header."""
    arr = np.asarray(array)
    if dtype is None:
        dtype = "f32" if arr.dtype.kind == "f" else "u16" if arr.max(initial=0) > 255 else "u8"
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype tag {dtype!r}")
    header = json.dumps({"shape": list(arr.shape), "dtype": dtype}, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes())


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        data = fh.read()
    arr = np.frombuffer(data, dtype=_DTYPES[header["dtype"]])
    return arr.reshape(header["shape"]).copy()


def save_samples(samples, out_dir, seed: int | None = None, rank: int | None = None) -> Path:
    """Write every sample as raw volumes plus a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_volume(out / f"{s.id}_image.raw", s.image[0], "f32")
        write_volume(out / f"{s.id}_labels.raw", s.instance_labels, "u16")
        write_volume(out / f"{s.id}_object.raw", s.object_mask, "u8")
        write_volume(out / f"{s.id}_edge.raw", s.edge_mask, "u8")
    manifest = {"seed": seed, "rank": rank, "samples": [s.id for s in samples]}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_samples(data_dir) -> list:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    samples = []
    for sid in manifest["samples"]:
        image = read_volume(d / f"{sid}_image.raw")
        labels = read_volume(d / f"{sid}_labels.raw").astype(np.int32)
        samples.append(make_sample(image, labels, sid))
    return samples
