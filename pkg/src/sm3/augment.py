"""Stochastic view generation.

Vector samples get zero-masking, additive Gaussian noise and a global scale,
in that order.  Image samples (C x H x W arrays) get resized crop, horizontal
flip, brightness/contrast jitter and Gaussian blur, in that order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from sm3.diffcore import Rng, derive_seed
from sm3.errors import ConfigError


@dataclass
class AugmentationPolicy:
    noise_std: float = 0.1
    mask_prob: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    # image mode only
    crop_fraction_range: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.crop_fraction_range = tuple(float(v) for v in self.crop_fraction_range)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.validate()

    def validate(self) -> None:
        if self.noise_std < 0:
            raise ConfigError("augment.noise_std must be >= 0")
        for name in ("mask_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augment.{name} must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("augment.scale_range needs 0 < lo <= hi")
        lo, hi = self.crop_fraction_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("augment.crop_fraction_range needs 0 < lo <= hi <= 1")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi:
            raise ConfigError("augment.blur_sigma_range needs 0 <= lo <= hi")
        if self.jitter_strength < 0:
            raise ConfigError("augment.jitter_strength must be >= 0")

    @classmethod
    def identity(cls) -> AugmentationPolicy:
        return cls(noise_std=0.0, mask_prob=0.0, scale_range=(1.0, 1.0), crop_fraction_range=(1.0, 1.0),
                   flip_prob=0.0, jitter_strength=0.0, blur_sigma_range=(0.0, 0.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def augment(sample: np.ndarray, policy: AugmentationPolicy, rng: Rng | np.random.Generator) -> np.ndarray:
    """One random view of ``sample``; 1-D arrays use vector mode, 3-D arrays image mode."""
    x = np.asarray(sample)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot augment a non-finite sample")
    gen = rng.gen if isinstance(rng, Rng) else rng
    if x.ndim == 3:
        return _augment_image(x, policy, gen)
    return _augment_vector(x, policy, gen)


def _augment_vector(x: np.ndarray, policy: AugmentationPolicy, gen: np.random.Generator) -> np.ndarray:
    out = x.copy()
    if policy.mask_prob > 0:
        out[gen.random(x.shape) < policy.mask_prob] = 0
    if policy.noise_std > 0:
        out = out + gen.normal(0.0, policy.noise_std, size=x.shape).astype(x.dtype)
    lo, hi = policy.scale_range
    if lo != hi:
        out = out * x.dtype.type(gen.uniform(lo, hi))
    elif lo != 1.0:
        out = out * x.dtype.type(lo)
    return out.astype(x.dtype, copy=False)


def _augment_image(img: np.ndarray, policy: AugmentationPolicy, gen: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    out = img
    lo, hi = policy.crop_fraction_range
    if lo < 1.0:
        frac = gen.uniform(lo, hi)
        ch, cw = max(1, round(h * np.sqrt(frac))), max(1, round(w * np.sqrt(frac)))
        top = int(gen.integers(0, h - ch + 1))
        left = int(gen.integers(0, w - cw + 1))
        crop = out[:, top:top + ch, left:left + cw]
        out = ndimage.zoom(crop, (1, h / ch, w / cw), order=1)[:, :h, :w]
    if policy.flip_prob > 0 and gen.random() < policy.flip_prob:
        out = out[:, :, ::-1]
    if policy.jitter_strength > 0:
        s = policy.jitter_strength
        brightness = gen.uniform(-s, s)
        contrast = gen.uniform(1 - s, 1 + s)
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = (out - mean) * contrast + mean + brightness
    lo, hi = policy.blur_sigma_range
    if hi > 0:
        sigma = gen.uniform(lo, hi)
        out = ndimage.gaussian_filter(out, sigma=(0, sigma, sigma), mode="nearest")
    return np.ascontiguousarray(out, dtype=img.dtype)


def view_seed(global_seed: int, sample_index: int, view_index: int, epoch: int, tag: str = "") -> int:
    return derive_seed(global_seed, "augment", tag, int(sample_index), int(view_index), int(epoch))


def augment_batch(batch: np.ndarray, indices, policy: AugmentationPolicy, global_seed: int,
                  view_index: int, epoch: int, tag: str = "", n_total: int | None = None) -> np.ndarray:
    """Augment rows ``batch[r]`` (sample ``indices[r]``) so that a sample's view never depends on its batch.

    Vector mode draws the masks, noise and scales for all ``n_total`` samples
    from one stream keyed by (seed, tag, view, epoch) and picks the rows of
    this batch; image mode seeds each sample separately.
    """
    indices = np.asarray(indices)
    if batch.ndim == 2:
        n_total = int(indices.max()) + 1 if n_total is None else n_total
        gen = np.random.Generator(np.random.PCG64(derive_seed(global_seed, "augment", tag, view_index, epoch)))
        d = batch.shape[1]
        out = batch.copy()
        if policy.mask_prob > 0:
            out[gen.random((n_total, d))[indices] < policy.mask_prob] = 0
        if policy.noise_std > 0:
            out += (policy.noise_std * gen.standard_normal((n_total, d))[indices]).astype(batch.dtype)
        lo, hi = policy.scale_range
        if lo != hi or lo != 1.0:
            out *= gen.uniform(lo, hi, n_total)[indices, None].astype(batch.dtype)
        return out
    out = np.empty_like(batch)
    for row, idx in enumerate(indices):
        gen = np.random.Generator(np.random.PCG64(view_seed(global_seed, idx, view_index, epoch, tag)))
        out[row] = augment(batch[row], policy, gen)
    return out
