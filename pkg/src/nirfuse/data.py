"""Image I/O, scene manifests, patch sampling and low-light noise synthesis.

Noise model (all intensities in [0, 1], ``g = sigma / 255``)::

    x' = brightness_scale * x
    y  = clip(g * Poisson(x' / g) + Normal(0, g**2), 0, 1)

so before clipping the residual ``y - x'`` has mean 0 and variance
``g * x' + g**2``: signal-dependent shot noise plus read noise, both set by
one level ``sigma`` in 8-bit units. :func:`noise_moments` gives the exact
mean and variance including the clip.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy import stats

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor4

NOISE_LEVELS = ("low", "middle", "high")


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def load_image(path) -> Tensor4:
    """Read an 8- or 16-bit PNG as a (1, C, H, W) tensor in [0, 1] (C = 1 or 3)."""
    path = Path(path)
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise DataError(f"cannot read image {path}")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataError(f"{path}: unsupported pixel type {arr.dtype}")
    if arr.ndim == 2:
        chw = arr[None]
    elif arr.shape[2] == 1:
        chw = arr.transpose(2, 0, 1)
    elif arr.shape[2] in (3, 4):
        chw = arr[:, :, 2::-1].transpose(2, 0, 1)  # BGR(A) -> RGB
    else:
        raise DataError(f"{path}: unsupported channel count {arr.shape[2]}")
    return Tensor4(chw[None].astype(np.float64) / scale)


def save_image(image, path, bits: int = 8) -> None:
    """Clamp to [0, 1], quantize to ``bits`` (8 or 16) and write a PNG."""
    if bits not in (8, 16):
        raise ConfigError(f"bits must be 8 or 16, got {bits}")
    arr = np.asarray(image.data if isinstance(image, Tensor4) else image, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"save_image writes one image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] not in (1, 3):
        raise ShapeError(f"save_image needs 1 or 3 channels, got shape {arr.shape}")
    maxv = 255 if bits == 8 else 65535
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxv).astype(np.uint8 if bits == 8 else np.uint16)
    hwc = q[0] if q.shape[0] == 1 else q[::-1].transpose(1, 2, 0)  # RGB -> BGR
    path = Path(path)
    if not cv2.imwrite(str(path), np.ascontiguousarray(hwc)):
        raise DataError(f"cannot write image {path}")


# ---------------------------------------------------------------------------
# Noise synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    brightness_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.brightness_scale <= 1:
            raise ConfigError(f"brightness_scale must be in (0, 1], got {self.brightness_scale}")

    @property
    def gain(self) -> float:
        return self.sigma / 255.0

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.sigma, self.brightness_scale, seed)


@dataclass(frozen=True)
class Preset:
    """Either a synthetic noise model or a recorded noisy variant (by level tag)."""

    name: str
    noise: Optional[NoiseSpec] = None
    level: Optional[str] = None


PRESETS = {
    "dvd-sigma4": Preset("dvd-sigma4", noise=NoiseSpec(4.0)),
    "dvd-sigma8": Preset("dvd-sigma8", noise=NoiseSpec(8.0)),
    "real-low": Preset("real-low", level="low"),
    "real-middle": Preset("real-middle", level="middle"),
    "real-high": Preset("real-high", level="high"),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown noise preset {name!r}; choose from {sorted(PRESETS)}") from None


def synth_noise(clean, spec: NoiseSpec) -> Tensor4:
    """Apply the low-light shot + read noise model; deterministic for ``spec.seed``."""
    x = np.asarray(clean.data if isinstance(clean, Tensor4) else clean, dtype=np.float64)
    xs = spec.brightness_scale * x
    g = spec.gain
    if g == 0.0:
        y = xs
    else:
        rng = np.random.default_rng(spec.seed)
        shot = rng.poisson(np.maximum(xs, 0.0) / g) * g
        y = shot + rng.normal(0.0, g, size=xs.shape)
    y = np.clip(y, 0.0, 1.0)
    return Tensor4(y if y.ndim == 4 else y.reshape((1,) * (4 - y.ndim) + y.shape))


def noise_moments(level: float, spec: NoiseSpec, clip: bool = True) -> Tuple[float, float]:
    """Exact mean and variance of the synthesized value for a clean intensity ``level``."""
    xs = spec.brightness_scale * level
    g = spec.gain
    if g == 0.0:
        v = min(max(xs, 0.0), 1.0) if clip else xs
        return v, 0.0
    if not clip:
        return xs, g * xs + g * g
    lam = xs / g
    kmax = int(stats.poisson.ppf(1 - 1e-16, lam)) + 10
    k = np.arange(kmax + 1)
    pmf = stats.poisson.pmf(k, lam)
    mu, s = g * k, g
    a, b = (0.0 - mu) / s, (1.0 - mu) / s
    pa, pb = stats.norm.pdf(a), stats.norm.pdf(b)
    mass = stats.norm.cdf(b) - stats.norm.cdf(a)
    upper = stats.norm.sf(b)
    m1 = upper + mu * mass + s * (pa - pb)
    m2 = upper + (mu * mu + s * s) * mass + 2 * mu * s * (pa - pb) + s * s * (a * pa - b * pb)
    mean = float(np.dot(pmf, m1))
    second = float(np.dot(pmf, m2))
    return mean, second - mean * mean


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class SceneRecord:
    scene_id: str
    clean: Path
    nir: Optional[Path]
    noisy: Dict[str, Path] = field(default_factory=dict)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_manifest(path, check_files: bool = True) -> List[SceneRecord]:
    """Parse a tab-separated manifest.

    Each non-comment line: ``scene_id  clean  nir  [tag:noisy ...]``; ``-``
    for a missing NIR image; relative paths resolve against the manifest's
    directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records, seen = [], set()
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 tab-separated fields")
            sid = row[0]
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate scene id {sid!r}")
            seen.add(sid)
            noisy = {}
            for item in row[3:]:
                tag, sep, p = item.partition(":")
                if not sep or not tag:
                    raise DataError(f"{path}:{lineno}: noisy entry {item!r} is not tag:path")
                noisy[tag] = _resolve(base, p)
            rec = SceneRecord(sid, _resolve(base, row[1]),
                              None if row[2] == "-" else _resolve(base, row[2]), noisy)
            if check_files:
                for p in [rec.clean, rec.nir, *rec.noisy.values()]:
                    if p is not None and not p.is_file():
                        raise DataError(f"{path}:{lineno}: scene {sid!r} references missing file {p}")
            records.append(rec)
    return records


def write_manifest(records: Sequence[SceneRecord], path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(Path(p).resolve())

    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["# scene_id", "clean", "nir", "tag:noisy..."])
        for r in records:
            w.writerow([r.scene_id, rel(r.clean), "-" if r.nir is None else rel(r.nir)]
                       + [f"{t}:{rel(p)}" for t, p in r.noisy.items()])


def split_manifest(records: Sequence[SceneRecord], train_fraction: float,
                   seed: int = 0) -> Tuple[List[SceneRecord], List[SceneRecord]]:
    """Random disjoint train/test split; ``round(fraction * n)`` scenes go to train."""
    if not 0 <= train_fraction <= 1:
        raise ConfigError(f"train_fraction must be in [0, 1], got {train_fraction}")
    ids = [r.scene_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate scene ids in manifest")
    n_train = int(math.floor(train_fraction * len(records) + 0.5))
    order = np.random.default_rng(seed).permutation(len(records))
    train = sorted(order[:n_train])
    test = sorted(order[n_train:])
    return [records[i] for i in train], [records[i] for i in test]


# ---------------------------------------------------------------------------
# Scenes and patches
# ---------------------------------------------------------------------------


@dataclass
class SceneImages:
    """One scene as (C, H, W) arrays; ``noisy`` may be None until synthesized."""

    scene_id: str
    clean: np.ndarray
    nir: Optional[np.ndarray]
    noisy: Optional[np.ndarray] = None


def load_scene(record: SceneRecord, level: Optional[str] = None) -> SceneImages:
    clean = load_image(record.clean).data[0]
    if clean.shape[0] != 3:
        raise DataError(f"{record.clean}: clean image must be RGB")
    nir = None
    if record.nir is not None:
        nir = load_image(record.nir).data[0]
        if nir.shape[0] == 3:
            nir = nir.mean(axis=0, keepdims=True)
        if nir.shape[1:] != clean.shape[1:]:
            raise DataError(f"scene {record.scene_id!r}: NIR size {nir.shape[1:]} "
                            f"differs from RGB size {clean.shape[1:]}")
    noisy = None
    if level is not None:
        if level not in record.noisy:
            raise DataError(f"scene {record.scene_id!r} has no noisy variant tagged {level!r}")
        noisy = load_image(record.noisy[level]).data[0]
        if noisy.shape != clean.shape:
            raise DataError(f"scene {record.scene_id!r}: noisy {level!r} image shape "
                            f"{noisy.shape} differs from clean {clean.shape}")
    return SceneImages(record.scene_id, clean, nir, noisy)


@dataclass
class PatchBatch:
    noisy_rgb: Tensor4
    clean_rgb: Tensor4
    nir: Optional[Tensor4]
    size: int


def _augment(arr: np.ndarray, code: int) -> np.ndarray:
    # code in [0, 8): bit 0 flips left-right, bits 1-2 pick the number of 90-degree turns
    if code & 1:
        arr = arr[..., ::-1]
    return np.rot90(arr, k=code >> 1, axes=(-2, -1))


def sample_patches(scene: Union[SceneImages, Sequence[SceneImages]], n: int, size: int,
                   seed: int, augment: bool = False,
                   noise: Optional[NoiseSpec] = None) -> PatchBatch:
    """Crop ``n`` aligned size x size windows (same window for clean, noisy and NIR).

    A sequence of scenes draws each sample's scene uniformly. Scenes without
    a recorded noisy image are noised with ``noise`` after cropping.
    """
    scenes = [scene] if isinstance(scene, SceneImages) else list(scene)
    if not scenes:
        raise DataError("no scenes to sample from")
    for s in scenes:
        h, w = s.clean.shape[1:]
        if h < size or w < size:
            raise ShapeError(f"scene {s.scene_id!r} is {h}x{w}, smaller than patch size {size}")
        if s.noisy is None and noise is None:
            raise DataError(f"scene {s.scene_id!r} has no noisy image and no noise model was given")
    rng = np.random.default_rng(seed)
    clean, noisy, nir = [], [], []
    has_nir = all(s.nir is not None for s in scenes)
    for _ in range(n):
        s = scenes[int(rng.integers(len(scenes)))] if len(scenes) > 1 else scenes[0]
        h, w = s.clean.shape[1:]
        y = int(rng.integers(h - size + 1))
        x = int(rng.integers(w - size + 1))
        code = int(rng.integers(8)) if augment else 0
        win = (slice(None), slice(y, y + size), slice(x, x + size))
        c = _augment(s.clean[win], code)
        clean.append(c)
        if s.noisy is not None:
            noisy.append(_augment(s.noisy[win], code))
        else:
            noisy.append(synth_noise(c, noise.with_seed(int(rng.integers(2 ** 63)))).data[0])
        if has_nir:
            nir.append(_augment(s.nir[win], code))
    return PatchBatch(Tensor4(np.stack(noisy)), Tensor4(np.stack(clean)),
                      Tensor4(np.stack(nir)) if has_nir else None, size)
