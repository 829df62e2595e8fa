"""Image ingestion and training-pair manufacture.

The pipeline works on luminance planes in [0, 1]: decode, convert RGB to
luminance (BT.601 full-range), cut aligned low/high-resolution patch pairs
with anti-aliased bicubic downscaling, rotate for augmentation, and scale
network inputs into [-1, 1].  In residual mode the regression target is the
difference between the ground truth and the bicubic upscaling of the input,
so a zero-output network reproduces plain bicubic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601, full range


class DataError(ValueError):
    """Raised for unusable images, manifests, or patch geometry."""


@dataclass
class ImagePlane:
    """A decoded image: (H, W) luminance or (H, W, 3) RGB.

    Values live in [0, 1] until ``normalize`` maps them to [-1, 1].
    """

    data: np.ndarray
    space: str = "luminance"  # "luminance" | "rgb"
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.space == "rgb":
            if self.data.ndim != 3 or self.data.shape[2] != 3:
                raise DataError(f"rgb plane must be (H, W, 3), got {self.data.shape}")
        elif self.space == "luminance":
            if self.data.ndim != 2:
                raise DataError(f"luminance plane must be (H, W), got {self.data.shape}")
        else:
            raise DataError(f"unknown color space {self.space!r}")
        lo, hi = (-1.0, 1.0) if self.normalized else (0.0, 1.0)
        if self.data.size and (self.data.min() < lo - 1e-9 or self.data.max() > hi + 1e-9):
            raise DataError(f"values [{self.data.min():.4f}, {self.data.max():.4f}] "
                            f"outside the {self.space} range [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class TrainPair:
    """An aligned training sample.

    ``target`` is the regression target on the high-resolution grid: the
    residual hr - bicubic(lr) in residual mode, else the ground truth scaled
    to [-1, 1].  ``hr`` keeps the raw [0, 1] ground truth for evaluation.
    """

    lr: ImagePlane
    target: np.ndarray
    hr: np.ndarray
    scale: int
    residual: bool

    def __post_init__(self):
        if self.target.shape != self.hr.shape:
            raise DataError(f"target {self.target.shape} and hr {self.hr.shape} disagree")
        if self.hr.shape != (self.lr.height * self.scale, self.lr.width * self.scale):
            raise DataError(f"hr {self.hr.shape} is not {self.scale}x the lr "
                            f"({self.lr.height}, {self.lr.width})")


# -- colour ---------------------------------------------------------------------


def to_luminance(img: ImagePlane) -> ImagePlane:
    if img.space != "rgb":
        raise DataError(f"luminance conversion expects rgb input, got {img.space}")
    if img.normalized:
        raise DataError("convert to luminance before normalizing")
    wr, wg, wb = LUMA_WEIGHTS
    y = wr * img.data[:, :, 0] + wg * img.data[:, :, 1] + wb * img.data[:, :, 2]
    return ImagePlane(np.clip(y, 0.0, 1.0), "luminance")


def rgb_to_ycbcr(rgb: np.ndarray):
    """Full-range BT.601 split into luminance plus offset chroma planes."""
    wr, wg, wb = LUMA_WEIGHTS
    y = wr * rgb[:, :, 0] + wg * rgb[:, :, 1] + wb * rgb[:, :, 2]
    cb = (rgb[:, :, 2] - y) / (2.0 * (1.0 - wb)) + 0.5
    cr = (rgb[:, :, 0] - y) / (2.0 * (1.0 - wr)) + 0.5
    return y, cb, cr


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    wr, wg, wb = LUMA_WEIGHTS
    r = y + (cr - 0.5) * 2.0 * (1.0 - wr)
    b = y + (cb - 0.5) * 2.0 * (1.0 - wb)
    g = (y - wr * r - wb * b) / wg
    return np.clip(np.stack([r, g, b], axis=2), 0.0, 1.0)


# -- bicubic resampling -----------------------------------------------------------


def _keys_cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    out[near] = (1.5 * ax[near] - 2.5) * ax[near] * ax[near] + 1.0
    far = (ax > 1.0) & (ax < 2.0)
    a = ax[far]
    out[far] = ((-0.5 * a + 2.5) * a - 4.0) * a + 2.0
    return out


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D resampling matrix: Keys cubic, clamped edges.

    Downscaling stretches the kernel to the destination rate so the result
    is anti-aliased; rows are normalised so constants stay constant.
    """
    scale = n_out / n_in
    fscale = min(scale, 1.0)
    support = 2.0 / fscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centers - support).astype(int) + 1
    ntaps = int(np.ceil(2.0 * support)) + 2
    taps = first[:, None] + np.arange(ntaps)[None, :]
    weights = _keys_cubic((centers[:, None] - taps) * fscale)
    weights /= weights.sum(axis=1, keepdims=True)
    matrix = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), ntaps)
    np.add.at(matrix, (rows, np.clip(taps, 0, n_in - 1).reshape(-1)), weights.reshape(-1))
    return matrix


def bicubic_resize(img, scale: float):
    """Separable Keys-cubic resize by a positive rational factor.

    Accepts an ImagePlane (returned as the same kind) or a bare 2-D array.
    """
    if scale <= 0:
        raise DataError(f"scale must be positive, got {scale}")
    plane = isinstance(img, ImagePlane)
    data = img.data if plane else np.asarray(img, dtype=np.float64)
    h, w = data.shape[:2]
    oh, ow = int(round(h * scale)), int(round(w * scale))
    if oh < 1 or ow < 1:
        raise DataError(f"scale {scale} collapses {h}x{w} to {oh}x{ow}")
    mh = _resize_matrix(h, oh)
    mw = _resize_matrix(w, ow)
    if data.ndim == 2:
        out = mh @ data @ mw.T
    else:
        out = np.einsum("oi,ijc,pj->opc", mh, data, mw)
    if plane:
        lo, hi = (-1.0, 1.0) if img.normalized else (0.0, 1.0)
        return ImagePlane(np.clip(out, lo, hi), img.space, img.normalized)
    return out


# -- normalisation -----------------------------------------------------------------


def normalize(img: ImagePlane) -> ImagePlane:
    """[0, 1] -> [-1, 1] via x -> 2x - 1."""
    if img.normalized:
        raise DataError("plane is already normalized")
    return ImagePlane(2.0 * img.data - 1.0, img.space, normalized=True)


def denormalize(img: ImagePlane) -> ImagePlane:
    if not img.normalized:
        raise DataError("plane is not normalized")
    return ImagePlane((img.data + 1.0) / 2.0, img.space, normalized=False)


# -- patch manufacture ---------------------------------------------------------------


def patch_grid(height: int, width: int, patch: int, stride: int):
    rows = range(0, height - patch + 1, stride)
    cols = range(0, width - patch + 1, stride)
    return [(r, c) for r in rows for c in cols]


def extract_patches(hr: ImagePlane, scale: int, lr_size: int, stride: int | None = None,
                    residual: bool = True):
    """Cut aligned pairs from one ground-truth image.

    High-resolution patches of side lr_size*scale are taken on a regular
    grid (non-overlapping by default); each input patch is the anti-aliased
    bicubic downscaling of its ground-truth patch.
    """
    if hr.space != "luminance" or hr.normalized:
        raise DataError("patch extraction expects a raw luminance plane")
    stride = lr_size if stride is None else stride
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    hr_patch = lr_size * scale
    if hr_patch > min(hr.height, hr.width):
        raise DataError(f"image {hr.height}x{hr.width} smaller than one "
                        f"{hr_patch}x{hr_patch} patch")
    pairs = []
    for r, c in patch_grid(hr.height, hr.width, hr_patch, stride * scale):
        hr_data = hr.data[r:r + hr_patch, c:c + hr_patch]
        lr_data = bicubic_resize(hr_data, 1.0 / scale)
        lr_data = np.clip(lr_data, 0.0, 1.0)
        if residual:
            target = hr_data - bicubic_resize(lr_data, float(scale))
        else:
            target = 2.0 * hr_data - 1.0
        pairs.append(TrainPair(lr=ImagePlane(lr_data, "luminance"), target=target,
                               hr=hr_data.copy(), scale=scale, residual=residual))
    return pairs


def augment_rotations(pair: TrainPair):
    """The original plus its three quarter-turn rotations."""
    if pair.lr.height != pair.lr.width:
        raise DataError(f"rotation augmentation needs square patches, "
                        f"got {pair.lr.height}x{pair.lr.width}")
    out = [pair]
    for k in (1, 2, 3):
        out.append(TrainPair(lr=ImagePlane(np.rot90(pair.lr.data, k).copy(), "luminance"),
                             target=np.rot90(pair.target, k).copy(),
                             hr=np.rot90(pair.hr, k).copy(),
                             scale=pair.scale, residual=pair.residual))
    return out


def reconstruct(lr: ImagePlane, prediction: np.ndarray, scale: int,
                residual: bool) -> np.ndarray:
    """Map a network output back to a [0, 1] high-resolution plane."""
    if residual:
        return np.clip(bicubic_resize(lr.data, float(scale)) + prediction, 0.0, 1.0)
    return np.clip((prediction + 1.0) / 2.0, 0.0, 1.0)


def make_training_set(images, scale: int, lr_size: int, stride: int | None = None,
                      residual: bool = True, augment: bool = True,
                      limit: int | None = None):
    """Patch pairs from many ground-truth planes, with optional rotations.

    Pairs keep deterministic (image, patch) order; ``limit`` caps the count
    after augmentation.
    """
    pairs = []
    for img in images:
        base = extract_patches(img, scale, lr_size, stride, residual)
        if augment:
            for p in base:
                pairs.extend(augment_rotations(p))
        else:
            pairs.extend(base)
        if limit is not None and len(pairs) >= limit:
            return pairs[:limit]
    if not pairs:
        raise DataError("no training patches produced")
    return pairs


# -- files ------------------------------------------------------------------------


def load_image(path) -> ImagePlane:
    """Decode an 8-bit raster into [0, 1]; non-RGB modes collapse to luminance."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
                return ImagePlane(arr, "luminance")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            return ImagePlane(arr, "rgb")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def save_image(data: np.ndarray, path):
    """Write a [0, 1] plane or RGB array as an 8-bit raster."""
    arr = np.clip(np.rint(np.asarray(data) * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


def load_manifest(path):
    """Dataset manifest: JSON with "train" and "val" lists of image paths.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(spec, dict) or "train" not in spec:
        raise DataError(f"manifest {path} must be an object with a 'train' list")
    root = path.parent

    def resolve(entries):
        return [root / p if not Path(p).is_absolute() else Path(p) for p in entries]

    return {"train": resolve(spec.get("train", [])),
            "val": resolve(spec.get("val", []))}


def load_luminance(path) -> ImagePlane:
    img = load_image(path)
    return to_luminance(img) if img.space == "rgb" else img
