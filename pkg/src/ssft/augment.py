"""Seeded spatial and spectral augmentations for H x W x C cubes.

Each kind fires with probability ``p`` and otherwise returns the input
unchanged. The Bernoulli draw always consumes one value from the generator, so
the random stream does not depend on whether the transform fired.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .data import HsiCube

# kind -> default parameters; any key not listed here is rejected
DEFAULTS = {
    "flip": {"axis": None},
    "cut": {"frac_min": 0.1, "frac_max": 0.3},
    "rotate": {"k": None},
    "crop": {"frac_min": 0.7, "frac_max": 0.9},
    "multiplicative_shading": {"amp_max": 0.3},
    "bandwise_gain_offset": {"gain": 0.1, "offset": 0.05},
    "drop_bandblock": {"max_frac": 0.2, "start": None, "length": None},
    "wavelength_shift": {"max_shift": 2, "shift": None, "max_shift_nm": None},
    "bandwise_noise": {"scale": 0.02},
}
KINDS = tuple(DEFAULTS)
_FORCED = {"axis", "k", "start", "length", "shift"}


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    p: float = 0.5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise ValueError(f"unknown augmentation {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"{self.kind}: p must lie in [0, 1], got {self.p}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        for k, v in self.params.items():
            if k not in _FORCED and v is not None and v < 0:
                raise ValueError(f"{self.kind}: parameter {k} must be >= 0")
        merged = dict(DEFAULTS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "p", "params"}
        if unknown:
            raise ValueError(f"augment: unknown keys {sorted(unknown)}")
        return cls(d["kind"], d.get("p", 0.5), dict(d.get("params", {})))

    def to_dict(self):
        return {"kind": self.kind, "p": self.p, "params": dict(self.params)}


# ---------------------------------------------------------------- transforms

def _flip(x, rng, axis=None, **_):
    if axis is None:
        axis = int(rng.integers(2))
    return np.flip(x, axis=axis)


def _cut(x, rng, frac_min, frac_max, **_):
    H, W, _ = x.shape
    side = max(1, int(round(rng.uniform(frac_min, frac_max) * min(H, W))))
    r = int(rng.integers(0, H - side + 1))
    c = int(rng.integers(0, W - side + 1))
    out = x.copy()
    out[r:r + side, c:c + side, :] = 0
    return out


def _rotate(x, rng, k=None, **_):
    if k is None:
        # quarter turns would swap H and W on non-square cubes
        k = int(rng.integers(4)) if x.shape[0] == x.shape[1] else 2 * int(rng.integers(2))
    elif k % 2 and x.shape[0] != x.shape[1]:
        raise ValueError("rotate: quarter turns need a square cube to preserve shape")
    return np.rot90(x, k=k, axes=(0, 1))


def _crop(x, rng, frac_min, frac_max, **_):
    H, W, _ = x.shape
    r = rng.uniform(frac_min, frac_max)
    h, w = int(round(r * H)), int(round(r * W))
    if h < 1 or w < 1:
        raise ValueError(f"crop: retaining {r:.3f} of a {H}x{W} cube leaves an empty window")
    h, w = min(h, H), min(w, W)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    rows = top + np.minimum((np.arange(H) * h) // H, h - 1)
    cols = left + np.minimum((np.arange(W) * w) // W, w - 1)
    return x[np.ix_(rows, cols)]


def _shading(x, rng, amp_max, **_):
    H, W, _ = x.shape
    a = rng.uniform(0.0, amp_max)
    theta = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    span = np.ptp(ramp)
    ramp = (ramp - ramp.min()) / span if span > 0 else np.zeros_like(ramp)
    return x * (1.0 + a * ramp)[:, :, None]


def _band_std(x):
    return x.reshape(-1, x.shape[-1]).std(axis=0)


def _gain_offset(x, rng, gain, offset, **_):
    C = x.shape[-1]
    alpha = rng.uniform(1.0 - gain, 1.0 + gain, size=C)
    beta = rng.normal(0.0, 1.0, size=C) * offset * _band_std(x)
    return x * alpha + beta


def _drop_bandblock(x, rng, max_frac, start=None, length=None, **_):
    C = x.shape[-1]
    if length is None:
        length = int(rng.integers(1, max(1, math.ceil(max_frac * C)) + 1))
    length = min(int(length), C)
    if start is None:
        start = int(rng.integers(0, C - length + 1))
    out = x.copy()
    out[:, :, start:start + length] = 0
    return out


def _wavelength_shift(x, rng, max_shift, shift=None, max_shift_nm=None, wavelengths=None, **_):
    C = x.shape[-1]
    if max_shift_nm is not None and wavelengths is not None and shift is None:
        wl = np.asarray(wavelengths)
        d = rng.uniform(-max_shift_nm, max_shift_nm)
        flat = x.reshape(-1, C)
        # np.interp clamps outside the grid, i.e. replicates the edge bands
        out = np.stack([np.interp(wl - d, wl, row) for row in flat])
        return out.reshape(x.shape)
    if shift is None:
        shift = int(rng.integers(-max_shift, max_shift + 1))
    src = np.clip(np.arange(C) - int(shift), 0, C - 1)
    return x[:, :, src]


def _bandwise_noise(x, rng, scale, **_):
    return x + rng.normal(0.0, 1.0, size=x.shape) * (scale * _band_std(x))


_OPS = {
    "flip": _flip,
    "cut": _cut,
    "rotate": _rotate,
    "crop": _crop,
    "multiplicative_shading": _shading,
    "bandwise_gain_offset": _gain_offset,
    "drop_bandblock": _drop_bandblock,
    "wavelength_shift": _wavelength_shift,
    "bandwise_noise": _bandwise_noise,
}


def augment(cube, spec, rng):
    """Apply ``spec`` to an HsiCube (or bare H x W x C array) with probability ``spec.p``."""
    if isinstance(spec, dict):
        spec = AugmentSpec.from_dict(spec)
    is_cube = isinstance(cube, HsiCube)
    x = cube.data if is_cube else np.asarray(cube)
    if rng.random() >= spec.p:
        return cube
    kwargs = dict(spec.params)
    if spec.kind == "wavelength_shift":
        kwargs["wavelengths"] = cube.wavelengths if is_cube else None
    out = np.ascontiguousarray(_OPS[spec.kind](x, rng, **kwargs), dtype=x.dtype)
    return cube.with_data(out) if is_cube else out


def pipeline(cube, specs, rng):
    """Left-to-right composition of ``augment`` calls sharing one generator."""
    for spec in specs:
        cube = augment(cube, spec, rng)
    return cube
