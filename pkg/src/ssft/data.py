"""Hyperspectral cubes, dataset manifests, band statistics and a synthetic generator.

Cube container (``.hsic``): a JSON header plus a sibling ``.bin`` holding
H*W*C little-endian float32 values in band-sequential order (every pixel of
band 0, then band 1, ...).
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SPLITS = ("train", "val", "test")
TASKS = ("multiclass", "multilabel")
STD_FLOOR = 1e-8


class CubeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class HsiCube:
    data: np.ndarray
    wavelengths: Optional[tuple] = None
    id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"cube must be H x W x C with positive extents, got shape {arr.shape}")
        _check_finite(arr, self.id)
        if self.wavelengths is not None:
            wl = tuple(float(w) for w in self.wavelengths)
            if len(wl) != arr.shape[2]:
                raise ValueError(f"{len(wl)} wavelengths for {arr.shape[2]} bands")
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise ValueError("wavelengths must be strictly increasing")
            object.__setattr__(self, "wavelengths", wl)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return HsiCube(np.asarray(data, dtype=self.data.dtype), self.wavelengths, self.id)


def _check_finite(arr, cube_id=""):
    bad = ~np.isfinite(arr)
    if bad.any():
        r, c, b = (int(i) for i in np.argwhere(bad)[0])
        raise CubeFormatError(f"cube {cube_id!r}: non-finite value at band {b}, pixel ({r}, {c})")


# ---------------------------------------------------------------- cube container

def _payload_path(path):
    return Path(path).with_suffix(".bin")


def save_cube(cube, path):
    path = Path(path)
    h, w, c = cube.shape
    header = {"h": h, "w": w, "c": c, "dtype": "f32", "order": "band-sequential"}
    if cube.wavelengths is not None:
        header["wavelengths"] = list(cube.wavelengths)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header))
    bsq = np.ascontiguousarray(np.transpose(cube.data, (2, 0, 1)), dtype="<f4")
    _payload_path(path).write_bytes(bsq.tobytes())
    return path


def load_cube(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no cube header at {path}")
    try:
        header = json.loads(path.read_text())
        h, w, c = int(header["h"]), int(header["w"]), int(header["c"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CubeFormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("dtype", "f32") != "f32":
        raise CubeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "band-sequential") != "band-sequential":
        raise CubeFormatError(f"{path}: unsupported order {header.get('order')!r}")
    payload = _payload_path(path)
    if not payload.exists():
        raise FileNotFoundError(f"no cube payload at {payload}")
    raw = payload.read_bytes()
    expected = h * w * c * 4
    if len(raw) != expected:
        raise CubeFormatError(f"{path}: payload holds {len(raw)} bytes, header implies {expected} (h={h}, w={w}, c={c})")
    bsq = np.frombuffer(raw, dtype="<f4").reshape(c, h, w)
    data = np.ascontiguousarray(bsq.transpose(1, 2, 0)).astype(np.float32)
    return HsiCube(data, header.get("wavelengths"), path.stem)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class Sample:
    path: str
    labels: tuple
    split: str

    @property
    def id(self):
        return Path(self.path).stem


@dataclass
class DatasetManifest:
    num_classes: int
    task: str = "multiclass"
    samples: list = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        self.samples = [s if isinstance(s, Sample) else Sample(s["path"], tuple(s["labels"]), s["split"])
                        for s in self.samples]
        for s in self.samples:
            if s.split not in SPLITS:
                raise ValueError(f"sample {s.path}: unknown split {s.split!r}")
            if any(not 0 <= int(l) < self.num_classes for l in s.labels):
                raise ValueError(f"sample {s.path}: label outside [0, {self.num_classes})")
            if self.task == "multiclass" and len(s.labels) != 1:
                raise ValueError(f"sample {s.path}: multiclass samples need exactly one label")

    def indices(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [i for i, s in enumerate(self.samples) if s.split == split]

    def check_trainable(self):
        for split in SPLITS:
            if not self.indices(split):
                raise ValueError(f"split {split!r} is empty")

    def targets(self, idx):
        """Class indices (multiclass) or a multi-hot matrix (multilabel)."""
        if self.task == "multiclass":
            return np.array([self.samples[i].labels[0] for i in idx], dtype=np.int64)
        out = np.zeros((len(idx), self.num_classes), dtype=np.float64)
        for row, i in enumerate(idx):
            out[row, list(self.samples[i].labels)] = 1.0
        return out

    def cube_path(self, sample):
        p = Path(sample.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "task": self.task,
            "samples": [{"path": s.path, "labels": list(s.labels), "split": s.split} for s in self.samples],
        }


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=1))
    return path


def load_manifest(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    unknown = set(doc) - {"num_classes", "task", "samples"}
    if unknown:
        raise ValueError(f"{path}: unknown manifest keys {sorted(unknown)}")
    return DatasetManifest(doc["num_classes"], doc.get("task", "multiclass"), doc["samples"], root=path.parent)


def load_dataset(path):
    """Manifest plus every cube it references, in manifest order."""
    manifest = load_manifest(path)
    cubes = [load_cube(manifest.cube_path(s)) for s in manifest.samples]
    return manifest, cubes


def save_dataset(out_dir, manifest, cubes):
    out_dir = Path(out_dir)
    for s, cube in zip(manifest.samples, cubes):
        save_cube(cube, out_dir / s.path)
    manifest.root = out_dir
    return save_manifest(manifest, out_dir / "manifest.json")


# ---------------------------------------------------------------- band statistics

@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("band mean and std must be 1-D arrays of equal length")
        if np.any(std <= 0):
            raise ValueError("band std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def _as_array(cube):
    return cube.data if isinstance(cube, HsiCube) else np.asarray(cube)


def fit_band_stats(cubes, eps=STD_FLOOR):
    """Per-band mean and (population) std over every pixel of every cube."""
    arrays = [_as_array(c) for c in cubes]
    if not arrays:
        raise ValueError("fit_band_stats needs at least one cube")
    C = arrays[0].shape[-1]
    if any(a.shape[-1] != C for a in arrays):
        raise ValueError("all cubes must share the band count")
    pix = np.concatenate([a.reshape(-1, C).astype(np.float64) for a in arrays])
    return BandStats(pix.mean(axis=0), np.maximum(pix.std(axis=0), eps))


def normalize(cube, stats):
    """(x - mean[c]) / std[c] per band; returns the same kind of object it was given."""
    arr = _as_array(cube)
    if arr.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"stats cover {stats.mean.shape[0]} bands, cube has {arr.shape[-1]}")
    out = ((arr - stats.mean) / stats.std).astype(arr.dtype)
    return cube.with_data(out) if isinstance(cube, HsiCube) else out


def denormalize(cube, stats):
    arr = _as_array(cube)
    out = (arr * stats.std + stats.mean).astype(arr.dtype)
    return cube.with_data(out) if isinstance(cube, HsiCube) else out


# ---------------------------------------------------------------- synthetic data

TEXTURES = ("constant", "gradient", "checkerboard")


def _signature(rng, C):
    band = np.arange(C, dtype=np.float64)
    sig = np.full(C, 0.1)
    for _ in range(rng.integers(2, 4)):
        center = rng.uniform(0.1, 0.9) * (C - 1)
        width = rng.uniform(0.05, 0.15) * C
        sig += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((band - center) / width) ** 2)
    # equal mean reflectance: classes differ in spectral shape, not brightness
    return sig * (0.5 / sig.mean())


def _texture(kind, rng, H, W):
    if kind == "constant":
        return np.full((H, W), 0.8)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        return 0.5 + 0.5 * ramp
    period = int(rng.choice([2, 4, 8]))
    oy, ox = rng.integers(0, 2 * period, size=2)
    cells = ((yy + oy) // period + (xx + ox) // period) % 2
    return np.where(cells == 0, 1.0, 0.6)


def _split_counts(n):
    n_val = max(1, round(0.15 * n))
    n_test = max(1, round(0.15 * n))
    return n - n_val - n_test, n_val, n_test


def synth_dataset(num_classes=3, per_class=20, size=(32, 32, 64), seed=0, noise=0.02):
    """Seeded synthetic dataset: (manifest, cubes).

    Class k has a spectral signature made of 2-3 Gaussian bumps and a texture
    (constant, linear gradient or checkerboard, cycling with k) whose placement
    varies per sample. Additive Gaussian noise has std ``noise`` times the
    noiseless cube's value range. Splits are 70/15/15 stratified by class.
    """
    H, W, C = size
    if num_classes < 2:
        raise ValueError("synth_dataset needs at least two classes")
    if C < 8:
        raise ValueError("synth_dataset needs at least 8 bands")
    if per_class < 3:
        raise ValueError("per_class must be >= 3 so every split gets a sample")
    rng = np.random.default_rng(seed)
    signatures = [_signature(rng, C) for _ in range(num_classes)]
    wavelengths = tuple(np.linspace(400.0, 1000.0, C).tolist())

    counts = _split_counts(per_class)
    samples, cubes = [], []
    for k in range(num_classes):
        kind = TEXTURES[k % len(TEXTURES)]
        tags = np.repeat(SPLITS, counts)
        rng.shuffle(tags)
        for j in range(per_class):
            clean = _texture(kind, rng, H, W)[:, :, None] * signatures[k][None, None, :]
            sigma = noise * np.ptp(clean) if np.ptp(clean) > 0 else noise * clean.max()
            data = clean + rng.normal(0.0, 1.0, clean.shape) * sigma
            sid = f"c{k:02d}_{j:04d}"
            samples.append(Sample(f"cubes/{sid}.hsic", (k,), str(tags[j])))
            cubes.append(HsiCube(data.astype(np.float32), wavelengths, sid))
    return DatasetManifest(num_classes, "multiclass", samples), cubes


# ---------------------------------------------------------------- batching

def split_iter(manifest, split, batch, seed=0):
    """Yield index arrays of size ``batch`` over one split; the last batch may be short.

    Train order is shuffled with ``seed``; val/test keep manifest order.
    """
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    idx = np.array(manifest.indices(split), dtype=np.int64)
    if split == "train":
        idx = np.random.default_rng(seed).permutation(idx)
    for start in range(0, len(idx), batch):
        yield idx[start:start + batch]

