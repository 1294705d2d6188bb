"""
Image/mask datasets on disk and a synthetic low-rank + sparse scene generator.

On-disk layout::

    <root>/<split>/images/<name>.png   8-bit grayscale
    <root>/<split>/masks/<name>.png    0 = background, 255 = target
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ShapeError

log = logging.getLogger(__name__)

BORDER = 8
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass
class DatasetSample:
    """``image`` in [0, 1] and binary ``mask``, both shaped (1, H, W)."""

    image: np.ndarray
    mask: np.ndarray
    name: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ShapeError(f"{self.name}: image {self.image.shape} vs mask {self.mask.shape}")
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ShapeError(f"{self.name}: expected (1, H, W), got {self.image.shape}")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError(f"{self.name}: mask is not binary")


@dataclass
class SynthSceneSpec:
    height: int = 64
    width: int = 64
    background_rank: int = 3
    num_targets: int = 2
    target_amplitude: tuple[float, float] = (0.3, 0.6)
    target_sigma: tuple[float, float] = (0.8, 1.8)
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.background_rank < 1 or self.background_rank > min(self.height, self.width):
            raise ValueError(f"background_rank must be in [1, min(H, W)], got {self.background_rank}")
        if self.num_targets < 0:
            raise ValueError("num_targets must be >= 0")
        lo, hi = self.target_amplitude
        if not 0 < lo <= hi:
            raise ValueError(f"target amplitudes must be positive and ordered, got {self.target_amplitude}")
        lo, hi = self.target_sigma
        if not 0 < lo <= hi:
            raise ValueError(f"target sigmas must be positive and ordered, got {self.target_sigma}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


class PlacementError(RuntimeError):
    pass


def _smooth_profile(length: int, rng: np.random.Generator) -> np.ndarray:
    x = np.arange(length) / length
    out = np.zeros(length)
    for _ in range(3):
        freq = rng.uniform(0.3, 2.5)
        out += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * freq * x + rng.uniform(0, 2 * np.pi))
    return out


def _low_rank_background(spec: SynthSceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.background_rank == 1:
        # shifted to min 0 so the min-max rescale is a pure scaling and keeps rank 1
        u = _smooth_profile(h, rng)
        v = _smooth_profile(w, rng)
        u -= u.min()
        v -= v.min()
        bg = np.outer(u, v)
    else:
        # a constant component keeps the min-max shift inside the span
        bg = np.full((h, w), rng.uniform(0.5, 1.0))
        for _ in range(spec.background_rank - 1):
            bg += np.outer(_smooth_profile(h, rng), _smooth_profile(w, rng))
    lo, hi = bg.min(), bg.max()
    if hi - lo <= 0:
        return np.zeros((h, w))
    return 0.7 * (bg - lo) / (hi - lo)


def _place_centres(spec: SynthSceneSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    min_sep = max(6.0 * spec.target_sigma[1], 3.0)
    if spec.height <= 2 * BORDER or spec.width <= 2 * BORDER:
        if spec.num_targets:
            raise PlacementError(f"{spec.height}x{spec.width} leaves no room inside the {BORDER}px border")
        return []
    centres: list[tuple[int, int]] = []
    attempts = 0
    while len(centres) < spec.num_targets:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(
                f"could not place {spec.num_targets} targets {min_sep:.1f}px apart "
                f"in {spec.height}x{spec.width} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        r = int(rng.integers(BORDER, spec.height - BORDER))
        c = int(rng.integers(BORDER, spec.width - BORDER))
        if all(np.hypot(r - r0, c - c0) >= min_sep for r0, c0 in centres):
            centres.append((r, c))
    return centres


def synth_scene(spec: SynthSceneSpec, name: str | None = None) -> DatasetSample:
    """
    Low-rank smooth background plus Gaussian point targets plus pixel noise.

    The mask marks pixels where a target's own clean contribution reaches
    half of its peak amplitude.
    """
    rng = np.random.default_rng(spec.seed)
    background = _low_rank_background(spec, rng)
    rows, cols = np.mgrid[0 : spec.height, 0 : spec.width]
    targets = np.zeros_like(background)
    mask = np.zeros(background.shape, dtype=bool)
    for r, c in _place_centres(spec, rng):
        amp = rng.uniform(*spec.target_amplitude)
        sigma = rng.uniform(*spec.target_sigma)
        blob = amp * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma**2))
        targets += blob
        mask |= blob >= 0.5 * amp
    image = background + targets
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return DatasetSample(
        image=image[None],
        mask=mask[None].astype(np.float64),
        name=name or f"synth_{spec.seed:06d}",
    )


def synth_dataset(count: int, spec: SynthSceneSpec, targets: tuple[int, int] = (1, 3)) -> list[DatasetSample]:
    """``count`` scenes with seeds ``spec.seed, spec.seed + 1, ...`` and target counts drawn from ``targets``."""
    picker = np.random.default_rng(spec.seed)
    samples = []
    for i in range(count):
        n = int(picker.integers(targets[0], targets[1] + 1))
        s = SynthSceneSpec(**{**spec.__dict__, "num_targets": n, "seed": spec.seed + i})
        samples.append(synth_scene(s, name=f"synth_{i:04d}"))
    return samples


def _read_gray(path: Path) -> Image.Image:
    img = Image.open(path)
    if img.mode != "L":
        warnings.warn(f"{path.name}: mode {img.mode} converted to 8-bit grayscale", stacklevel=3)
        img = img.convert("L")
    return img


def _resize(arr: np.ndarray, size: int | None, resample) -> np.ndarray:
    if size is None or arr.shape == (size, size):
        return arr
    img = Image.fromarray(arr.astype(np.float32))
    return np.asarray(img.resize((size, size), resample=resample), dtype=np.float64)


def load_dataset(root, split: str = "train", size: int | None = 256) -> list[DatasetSample]:
    """
    Read ``<root>/<split>/{images,masks}/*.png`` sorted by name.

    Images are scaled by 1/255 and resized bilinearly to ``size`` x ``size``;
    masks are resized nearest-neighbour and binarized at > 0. ``size=None``
    keeps the stored resolution.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) / split
    if not Path(root).is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    image_dir, mask_dir = base / "images", base / "masks"
    if not image_dir.is_dir():
        return []
    samples = []
    for image_path in sorted(image_dir.glob("*.png")):
        stem = image_path.stem
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.is_file():
            raise FileNotFoundError(f"no mask for image '{stem}' (expected {mask_path})")
        image = np.asarray(_read_gray(image_path), dtype=np.float64) / 255.0
        mask = np.asarray(_read_gray(mask_path), dtype=np.float64)
        image = np.clip(_resize(image, size, Image.BILINEAR), 0.0, 1.0)
        mask = (_resize(mask, size, Image.NEAREST) > 0).astype(np.float64)
        samples.append(DatasetSample(image[None], mask[None], stem))
    log.info("loaded %d samples from %s", len(samples), base)
    return samples


def write_dataset(samples: list[DatasetSample], root, split: str = "train") -> list[Path]:
    """Write samples as 8-bit PNGs in the layout :func:`load_dataset` reads. Returns written paths."""
    base = Path(root) / split
    image_dir, mask_dir = base / "images", base / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        pixels = np.round(np.clip(s.image[0], 0.0, 1.0) * 255.0).astype(np.uint8)
        labels = np.where(s.mask[0] > 0, 255, 0).astype(np.uint8)
        for directory, arr in ((image_dir, pixels), (mask_dir, labels)):
            path = directory / f"{s.name}.png"
            Image.fromarray(arr).save(path)
            written.append(path)
    return written


def stack_batch(samples: list[DatasetSample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, H, W) image and mask arrays."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
