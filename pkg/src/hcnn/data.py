"""Image/mask loading, paired augmentation and synthetic crack generation."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .exceptions import ConfigError, ImageFormatError, PairingError, ShapeError, SizeError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Sample:
    """An RGB image in ``[0, 1]`` of shape ``(1, 3, H, W)`` and its binary mask ``(1, 1, H, W)``."""

    image: np.ndarray
    mask: np.ndarray
    stem: str = ""

    def __post_init__(self):
        if self.image.ndim != 4 or self.mask.ndim != 4:
            raise ShapeError("image and mask must be rank 4")
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise ShapeError(f"image {self.image.shape} and mask {self.mask.shape} differ in size")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be strictly binary")


# -- IO ------------------------------------------------------------------------


def binarize(plane) -> np.ndarray:
    """``1`` where the 8-bit value exceeds 127, else ``0``."""
    return (np.asarray(plane) > 127).astype(np.uint8)


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    return img


def read_image(path: str | Path) -> np.ndarray:
    """Decode to RGB float64 in ``[0, 1]``, shape ``(1, 3, H, W)``."""
    arr = np.asarray(_open(Path(path)).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)[None]


def read_gray(path: str | Path) -> np.ndarray:
    """Decode to an 8-bit-scale grayscale plane ``(H, W)`` of float64."""
    return np.asarray(_open(Path(path)).convert("L"), dtype=np.float64)


def read_mask(path: str | Path) -> np.ndarray:
    """Decode a mask and binarize it, shape ``(1, 1, H, W)``."""
    return binarize(np.asarray(_open(Path(path)).convert("L")))[None, None]


def png_bytes(plane: np.ndarray) -> bytes:
    """Encode an ``(H, W)`` or ``(H, W, 3)`` uint8 array as PNG."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(plane, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | Path, plane: np.ndarray) -> None:
    from .checkpoint import atomic_write_bytes

    atomic_write_bytes(path, png_bytes(plane))


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """``(1, 3, H, W)`` float image in ``[0, 1]`` to ``(H, W, 3)`` uint8, rounding half up."""
    return np.floor(np.clip(image[0], 0.0, 1.0).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def write_sample(sample: Sample, image_path: str | Path, mask_path: str | Path) -> None:
    write_png(image_path, image_to_uint8(sample.image))
    write_png(mask_path, sample.mask[0, 0] * 255)


def list_images(directory: str | Path) -> dict:
    """``{stem: path}`` for every image file directly inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    out = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise PairingError(f"duplicate stem {p.stem!r} in {directory}")
            out[p.stem] = p
    return out


def pair_stems(*dirs: str | Path) -> List[Tuple[str, List[Path]]]:
    """Match files by stem across directories, sorted by stem."""
    listings = [list_images(d) for d in dirs]
    stems = set().union(*listings)
    for stem in sorted(stems):
        for d, listing in zip(dirs, listings):
            if stem not in listing:
                raise PairingError(f"{stem!r} has no counterpart in {d}")
    return [(stem, [listing[stem] for listing in listings]) for stem in sorted(stems)]


def load_pairs(image_dir: str | Path, mask_dir: str | Path) -> List[Sample]:
    samples = []
    for stem, (img_path, mask_path) in pair_stems(image_dir, mask_dir):
        image = read_image(img_path)
        mask = read_mask(mask_path)
        if image.shape[2:] != mask.shape[2:]:
            raise ShapeError(f"{stem!r}: image {image.shape[2:]} and mask {mask.shape[2:]} differ in size")
        samples.append(Sample(image, mask, stem))
    return samples


# -- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    rotation_range: Tuple[float, float] = (0.0, 90.0)
    flip_horizontal: bool = True
    flip_vertical: bool = True
    crop_size: Optional[Tuple[int, int]] = (256, 256)
    expansion_factor: int = 100

    def __post_init__(self):
        if self.crop_size is not None and any(c <= 0 or c % 32 for c in self.crop_size):
            raise ConfigError(f"crop size must be a positive multiple of 32, got {self.crop_size}")
        if self.expansion_factor < 1:
            raise ConfigError("expansion_factor must be >= 1")
        lo, hi = self.rotation_range
        if lo > hi:
            raise ConfigError(f"empty rotation range {self.rotation_range}")


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw: rotate, then flip, then crop at ``(top, left)``."""

    angle: float = 0.0
    flip_horizontal: bool = False
    flip_vertical: bool = False
    top: int = 0
    left: int = 0


def interior_size(h: int, w: int, angle: float) -> Tuple[int, int]:
    """Largest axis-aligned rectangle inside an ``h x w`` image rotated by ``angle`` degrees.

    Clipped to the original frame, since rotation keeps the canvas size.
    """
    a = math.radians(angle)
    sin_a, cos_a = abs(math.sin(a)), abs(math.cos(a))
    if sin_a < 1e-12:
        return h, w
    if cos_a < 1e-12:
        return min(w, h), min(h, w)
    long_side, short_side = (w, h) if w >= h else (h, w)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if w >= h else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    # a two-pixel margin keeps interpolation away from the zero-padded border
    return max(0, min(h, int(math.floor(hr + 1e-9)) - 2)), max(0, min(w, int(math.floor(wr + 1e-9)) - 2))


def _center_crop(planes: np.ndarray, h: int, w: int) -> np.ndarray:
    top = (planes.shape[-2] - h) // 2
    left = (planes.shape[-1] - w) // 2
    return planes[..., top:top + h, left:left + w]


def rotate_planes(planes: np.ndarray, angle: float, order: int) -> np.ndarray:
    """Rotate ``(C, H, W)`` planes about the centre and crop to the valid interior.

    ``order`` is the spline order: 1 (bilinear) for images, 0 (nearest) for masks.
    """
    h, w = planes.shape[-2:]
    quarter = round(angle / 90.0)
    if abs(angle - 90.0 * quarter) < 1e-6:
        # (near-)right angles are exact index permutations
        quarter %= 4
        if quarter == 0:
            return planes
        rotated = np.rot90(planes, k=quarter, axes=(-2, -1))
        return _center_crop(rotated, min(h, w), min(h, w)) if quarter % 2 else rotated
    rotated = ndimage.rotate(planes, angle, axes=(-1, -2), reshape=False, order=order,
                             mode="constant", cval=0.0, prefilter=False)
    ih, iw = interior_size(h, w, angle)
    return _center_crop(rotated, ih, iw)


def geometric_size(h: int, w: int, angle: float) -> Tuple[int, int]:
    """Spatial size after :func:`rotate_planes`."""
    quarter = round(angle / 90.0)
    if abs(angle - 90.0 * quarter) < 1e-6:
        return (min(h, w),) * 2 if quarter % 2 else (h, w)
    return interior_size(h, w, angle)


def apply_geometry(planes: np.ndarray, params: AugmentParams, crop_size: Optional[Tuple[int, int]],
                   order: int) -> np.ndarray:
    """Rotate, flip and crop ``(C, H, W)`` planes."""
    out = rotate_planes(planes, params.angle, order)
    if params.flip_horizontal:
        out = out[..., ::-1]
    if params.flip_vertical:
        out = out[..., ::-1, :]
    if crop_size is not None:
        ch, cw = crop_size
        if out.shape[-2] < ch or out.shape[-1] < cw:
            raise SizeError(f"{out.shape[-2]}x{out.shape[-1]} region after rotation is smaller than crop {ch}x{cw}")
        out = out[..., params.top:params.top + ch, params.left:params.left + cw]
    return np.ascontiguousarray(out)


def apply_augment(sample: Sample, params: AugmentParams, config: AugmentConfig) -> Sample:
    """Apply one draw to image and mask with identical geometry."""
    image = np.clip(apply_geometry(sample.image[0], params, config.crop_size, order=1), 0.0, 1.0)
    mask = apply_geometry(sample.mask[0].astype(np.float64), params, config.crop_size, order=0)
    return Sample(image[None], (mask > 0.5).astype(np.uint8)[None], sample.stem)


def draw_params(shape: Sequence[int], config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    """Draw angle, flips and crop offset for a source of spatial ``shape``."""
    h, w = shape[-2:]
    angle = float(rng.uniform(*config.rotation_range))
    fh = bool(config.flip_horizontal and rng.random() < 0.5)
    fv = bool(config.flip_vertical and rng.random() < 0.5)
    top = left = 0
    if config.crop_size is not None:
        rh, rw = geometric_size(h, w, angle)
        ch, cw = config.crop_size
        if rh < ch or rw < cw:
            raise SizeError(f"{h}x{w} source rotated by {angle:.2f} deg leaves {rh}x{rw}, smaller than crop {ch}x{cw}")
        top = int(rng.integers(0, rh - ch + 1))
        left = int(rng.integers(0, rw - cw + 1))
    return AugmentParams(angle, fh, fv, top, left)


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator | int | None = None) -> Sample:
    rng = np.random.default_rng(rng)
    return apply_augment(sample, draw_params(sample.image.shape, config, rng), config)


def augment_rng(seed: int, source_index: int, copy_index: int) -> np.random.Generator:
    """Independent stream for one output of the expansion."""
    return np.random.default_rng([seed, source_index, copy_index])


def expand(samples: Sequence[Sample], config: AugmentConfig, seed: int) -> Iterator[Tuple[int, int, Sample]]:
    """Yield ``(source_index, copy_index, augmented)`` for ``expansion_factor`` copies of each source."""
    for i, sample in enumerate(samples):
        for j in range(config.expansion_factor):
            yield i, j, augment(sample, config, augment_rng(seed, i, j))


# -- synthetic data ------------------------------------------------------------

SYNTH_BACKGROUND = 0.6
SYNTH_MIN_SHIFT = 0.2


def _value_noise(rng: np.random.Generator, size: int, cell: int = 8) -> np.ndarray:
    """Zero-mean, unit-std texture: bilinear-upsampled lattice noise plus fine grain."""
    n = size // cell + 2
    lattice = rng.uniform(-1.0, 1.0, (n, n))
    coords = np.arange(size) / cell
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    coarse = ndimage.map_coordinates(lattice, [yy, xx], order=1)
    noise = 0.7 * coarse + 0.3 * rng.uniform(-1.0, 1.0, (size, size))
    noise -= noise.mean()
    return noise / noise.std()


def _walk(rng: np.random.Generator, size: int) -> np.ndarray:
    """Monotone 8-connected walk from ``(0, 0)`` to ``(size-1, size-1)``."""
    r = int(rng.integers(0, int(0.4 * size) + 1))
    steps = np.array([0] * (size - 1 - r) + [1] * r + [2] * r)
    rng.shuffle(steps)
    dy = np.where(steps == 1, 0, 1)
    dx = np.where(steps == 2, 0, 1)
    ys = np.concatenate([[0], np.cumsum(dy)])
    xs = np.concatenate([[0], np.cumsum(dx)])
    return np.stack([ys, xs], axis=1)


def synth_crack(seed: int, size: int = 32, noise_level: float = 0.05) -> Sample:
    """Textured background crossed corner to corner by a dark random-walk crack.

    The walk is drawn 1 to 3 px wide (horizontal thickening) and darkened by
    ``0.2 + 3 * noise_level``; the mask is exactly the drawn footprint.
    """
    if size <= 0 or size % 32:
        raise ConfigError(f"size must be a positive multiple of 32, got {size}")
    if noise_level < 0:
        raise ConfigError("noise_level must be non-negative")
    rng = np.random.default_rng(seed)
    background = SYNTH_BACKGROUND + noise_level * _value_noise(rng, size)
    path = _walk(rng, size)
    width = int(rng.integers(1, 4))
    offsets = {1: (0,), 2: (0, 1), 3: (-1, 0, 1)}[width]
    mask = np.zeros((size, size), dtype=np.uint8)
    for off in offsets:
        xs = path[:, 1] + off
        keep = (xs >= 0) & (xs < size)
        mask[path[keep, 0], xs[keep]] = 1
    if rng.random() < 0.5:
        mask = mask[:, ::-1]
    gray = background - (SYNTH_MIN_SHIFT + 3.0 * noise_level) * mask
    gray = np.clip(gray, 0.0, 1.0)
    image = np.repeat(gray[None, None], 3, axis=1)
    tag = "_".join(str(s) for s in np.atleast_1d(seed)) if seed is not None else "none"
    return Sample(image, np.ascontiguousarray(mask)[None, None], f"synth_{tag}")
