"""Geometric/photometric augmentation and FMix.

The pipeline shuffles its op list per sample and applies each op with
probability 0.5. FMix is applied separately, at batch level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import ImageSample
from .tensor import RngStream

DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "hflip": {},
    "vflip": {},
    "translate": {"dy": (-0.1, 0.1), "dx": (-0.1, 0.1)},
    "crop": {"area": (0.8, 1.0)},
    "affine": {"shear_deg": (-10.0, 10.0), "scale": (0.9, 1.1)},
    "rotate": {"deg": (-15.0, 15.0)},
    "brightness": {"delta": (-0.2, 0.2)},
    "contrast": {"factor": (0.8, 1.25)},
}
STRONG = tuple(DEFAULT_RANGES)
SIMPLE = ("hflip", "vflip")


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULT_RANGES:
            raise ValueError(f"unknown augment op {self.kind!r}")
        merged = dict(DEFAULT_RANGES[self.kind])
        merged.update({k: tuple(v) for k, v in self.ranges.items()})
        for k, (lo, hi) in merged.items():
            if k not in DEFAULT_RANGES[self.kind] or lo > hi:
                raise ValueError(f"{self.kind}: bad range {k}={lo, hi}")
        object.__setattr__(self, "ranges", merged)

    def sample(self, rng: RngStream) -> dict[str, float]:
        params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in self.ranges.items()}
        if self.kind == "crop":
            params["cy"] = float(rng.random())
            params["cx"] = float(rng.random())
        return params

    def apply(self, img: np.ndarray, params: dict[str, float]) -> np.ndarray:
        return _APPLY[self.kind](img, **params)


def build_ops(kinds=STRONG, ranges: dict | None = None) -> list[AugmentOp]:
    ranges = ranges or {}
    return [AugmentOp(k, ranges.get(k, {})) for k in kinds]


def _hflip(img):
    return img[:, ::-1]


def _vflip(img):
    return img[::-1, :]


def _translate(img, dy, dx):
    h, w = img.shape
    return ndimage.shift(img, (dy * h, dx * w), order=1, mode="nearest")


def _crop(img, area, cy, cx):
    h, w = img.shape
    side_h, side_w = int(round(np.sqrt(area) * h)), int(round(np.sqrt(area) * w))
    if side_h < 2 or side_w < 2:
        return img
    y0 = int(round(cy * (h - side_h)))
    x0 = int(round(cx * (w - side_w)))
    win = img[y0 : y0 + side_h, x0 : x0 + side_w]
    if win.shape == img.shape:
        return img
    return ndimage.zoom(win, (h / side_h, w / side_w), order=1, mode="nearest", grid_mode=True)[:h, :w]


def _about_center(img, matrix):
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="nearest")


def _affine(img, shear_deg, scale):
    if scale <= 0:
        return img
    sh = np.tan(np.deg2rad(shear_deg))
    m = np.array([[1.0, sh], [0.0, 1.0]]) / scale
    return _about_center(img, m)


def _rotate(img, deg):
    t = np.deg2rad(deg)
    m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return _about_center(img, m)


def _brightness(img, delta):
    return img + delta


def _contrast(img, factor):
    mu = img.mean()
    return (img - mu) * factor + mu


_APPLY = {
    "hflip": _hflip,
    "vflip": _vflip,
    "translate": _translate,
    "crop": _crop,
    "affine": _affine,
    "rotate": _rotate,
    "brightness": _brightness,
    "contrast": _contrast,
}


def apply_pipeline(sample: ImageSample, ops: list[AugmentOp], rng: RngStream, p: float = 0.5) -> ImageSample:
    """Shuffle ``ops`` and apply each with probability ``p``; clamp to [0,1]."""
    img = np.asarray(sample.image)
    if img.size == 0:
        raise ValueError("empty image")
    out = img.astype(np.float64)
    for idx in rng.permutation(len(ops)):
        if rng.random() >= p:
            continue
        op = ops[int(idx)]
        out = op.apply(out, op.sample(rng))
    out = np.clip(out, 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float32)
    return sample.with_image(np.ascontiguousarray(out))


# -------------------------------------------------------------------- FMix


@dataclass(frozen=True)
class FmixConfig:
    alpha: float = 1.0
    decay_power: float = 3.0
    p: float = 0.5  # per-batch application probability

    def __post_init__(self):
        if self.alpha <= 0 or self.decay_power <= 0:
            raise ValueError("FMix alpha and decay power must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("FMix probability must lie in [0,1]")


def low_freq_image(h: int, w: int, decay_power: float, rng: RngStream) -> np.ndarray:
    """Real part of the inverse DFT of power-law filtered complex noise."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    freq = np.sqrt(fx * fx + fy * fy)
    f0 = 1.0 / max(h, w)
    filt = 1.0 / np.maximum(freq, f0) ** decay_power
    spec = (rng.normal(size=(h, w)) + 1j * rng.normal(size=(h, w))) * filt
    return np.real(np.fft.ifft2(spec))


def fmix_mask(h: int, w: int, lam: float, config: FmixConfig, rng: RngStream) -> np.ndarray:
    """Binary mask with exactly ``round(lam*h*w)`` ones on the highest
    low-frequency values; ties go to the earlier row-major index."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0,1], got {lam}")
    k = int(round(lam * h * w))
    grey = low_freq_image(h, w, config.decay_power, rng).reshape(-1)
    order = np.argsort(-grey, kind="stable")
    mask = np.zeros(h * w, dtype=np.uint8)
    mask[order[:k]] = 1
    return mask.reshape(h, w)


def soft_target(live: bool | float) -> np.ndarray:
    """Two-class target [P(spoof), P(live)]."""
    q = float(live)
    return np.array([1.0 - q, q])


def fmix_mix(
    a: ImageSample, b: ImageSample, config: FmixConfig, rng: RngStream, lam: float | None = None
) -> tuple[ImageSample, float, np.ndarray]:
    """Mix ``a`` into ``b`` through an FMix mask.

    Returns the mixed sample (carrying ``a``'s metadata), lambda and the
    soft target ``lam*onehot(a) + (1-lam)*onehot(b)``.
    """
    if a.image.shape != b.image.shape:
        raise ValueError(f"fmix shape mismatch {a.image.shape} vs {b.image.shape}")
    if lam is None:
        lam = float(rng.beta(config.alpha, config.alpha))
    mask = fmix_mask(*a.image.shape, lam, config, rng).astype(a.image.dtype)
    mixed = mask * a.image + (1 - mask) * b.image
    target = lam * soft_target(a.live) + (1 - lam) * soft_target(b.live)
    return a.with_image(mixed), lam, target


def fmix_batch(
    images: np.ndarray, targets: np.ndarray, config: FmixConfig, rng: RngStream
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Batch-level FMix: with probability ``config.p`` mix the batch with a
    shuffled copy of itself using one mask. ``targets`` are soft [N,2]."""
    if rng.random() >= config.p:
        return images, targets, False
    n, h, w = images.shape[0], images.shape[-2], images.shape[-1]
    perm = rng.permutation(n)
    lam = float(rng.beta(config.alpha, config.alpha))
    mask = fmix_mask(h, w, lam, config, rng).astype(images.dtype)
    mixed = mask * images + (1 - mask) * images[perm]
    return mixed, lam * targets + (1 - lam) * targets[perm], True
