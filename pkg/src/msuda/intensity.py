"""Label-assisted intensity transformation and training-time augmentations.

All functions accept either bare arrays or Volume/LabelMap containers and
return the same kind they were given. Randomized ops take an explicit
numpy Generator so callers own the streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, LabelMap, VolumeError, CLASS_INTRA, CLASS_EXTRA, CLASS_COCHLEA

COCHLEA_TARGET_VALUE = 1.0  # maximum of the preprocessed intensity range
VS_SHIFT_OFFSET = 0.5


@dataclass
class AugmentConfig:
    """Ranges and probabilities for the reduced augmentation set."""

    vs_gain_range: tuple = (1.2, 2.0)
    cochlea_factor_range: tuple = (0.5, 1.0)
    contrast_prob_source: float = 0.4
    contrast_prob_target: float = 0.1
    contrast_gamma_range: tuple = (0.75, 1.33)
    flip_prob: float = 0.5

    def __post_init__(self):
        for rng_pair in (self.vs_gain_range, self.cochlea_factor_range,
                         self.contrast_gamma_range):
            if rng_pair[0] > rng_pair[1]:
                raise ValueError(f"range must be ordered, got {rng_pair}")
        for p in (self.contrast_prob_source, self.contrast_prob_target, self.flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of [0,1]: {p}")

    @classmethod
    def weak(cls):
        return cls(vs_gain_range=(1.1, 1.5), cochlea_factor_range=(0.7, 1.0))


def _unwrap(x):
    if isinstance(x, (Volume, LabelMap)):
        return x.data, x
    return np.asarray(x), None


def _rewrap(data, container):
    if container is None:
        return data
    return container.with_data(data)


def _masks(img, lbl):
    if img.shape != lbl.shape:
        raise VolumeError(f"image {img.shape} and label {lbl.shape} geometry differ")
    vs = (lbl == CLASS_INTRA) | (lbl == CLASS_EXTRA)
    cochlea = lbl == CLASS_COCHLEA
    return vs, cochlea


def label_assisted_transform(img, lbl, clamp_range=(-1.0, 1.0)):
    """Flip the tumor/cochlea intensity profile of a [-1, 1] image.

    Cochlea voxels are set to 1.0; tumor voxels are decreased by the tumor
    mean plus 0.5. Everything else is untouched; the result is clamped to
    the preprocessed range so it stays a valid generator input.
    """
    data, wrap = _unwrap(img)
    lbl_data, _ = _unwrap(lbl)
    vs, cochlea = _masks(data, lbl_data)
    out = data.astype(np.float32).copy()
    if vs.any():
        mu = float(out[vs].mean())
        out[vs] = out[vs] - (mu + VS_SHIFT_OFFSET)
    out[cochlea] = COCHLEA_TARGET_VALUE
    if clamp_range is not None:
        np.clip(out, clamp_range[0], clamp_range[1], out=out)
    return _rewrap(out, wrap)


def augment_local_intensity(img, lbl, cfg: AugmentConfig, rng,
                            clamp_range=(-1.0, 1.0)):
    """Scale tumor voxels by u~U(vs_gain_range) and cochlea voxels by
    v~U(cochlea_factor_range), one draw each per call."""
    data, wrap = _unwrap(img)
    lbl_data, _ = _unwrap(lbl)
    vs, cochlea = _masks(data, lbl_data)
    u = rng.uniform(*cfg.vs_gain_range)
    v = rng.uniform(*cfg.cochlea_factor_range)
    out = data.astype(np.float32).copy()
    out[vs] = out[vs] * u
    out[cochlea] = out[cochlea] * v
    if clamp_range is not None:
        np.clip(out, clamp_range[0], clamp_range[1], out=out)
    return _rewrap(out, wrap)


def augment_contrast(img, p, rng, gamma_range=(0.75, 1.33)):
    """With probability p apply x -> sign(x) * |x|^gamma, gamma~U(gamma_range)."""
    data, wrap = _unwrap(img)
    if rng.random() >= p:
        return _rewrap(data.astype(np.float32).copy(), wrap)
    gamma = rng.uniform(*gamma_range)
    out = np.sign(data) * np.power(np.abs(data), gamma)
    return _rewrap(out.astype(np.float32), wrap)


def flip_lr(img, lbl):
    """Mirror image and label along the LR (x) axis."""
    data, wrap_i = _unwrap(img)
    lbl_data, wrap_l = _unwrap(lbl)
    if data.shape != lbl_data.shape:
        raise VolumeError(f"image {data.shape} and label {lbl_data.shape} geometry differ")
    fi = np.ascontiguousarray(np.flip(data, axis=0))
    fl = np.ascontiguousarray(np.flip(lbl_data, axis=0))
    return _rewrap(fi, wrap_i), _rewrap(fl, wrap_l)
