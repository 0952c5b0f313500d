"""Intensity standardisation, subvolume sampling and spatial augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import DataError

# Foreground histogram landmarks: 1st and 99th percentile plus the deciles.
PERCENTILES = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)
DEFAULT_REFERENCE = np.linspace(0.0, 100.0, len(PERCENTILES))


def foreground_threshold(volume: np.ndarray, mode: str = "test", rng: np.random.Generator | None = None) -> float:
    lo, mean = float(volume.min()), float(volume.mean())
    if mode == "test":
        return mean
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode standardisation needs an rng")
        return float(rng.uniform(lo, mean)) if mean > lo else lo
    raise ValueError(f"unknown mode {mode!r}")


def landmarks(values: np.ndarray) -> np.ndarray:
    return np.percentile(values, PERCENTILES)


def learn_reference(volumes) -> np.ndarray:
    """Average landmark positions after mapping each volume's [p1, p99] onto [0, 100]."""
    rows = []
    for v in volumes:
        v = np.asarray(v, dtype=np.float64)
        fg = v[v > v.mean()]
        lm = landmarks(fg if fg.size else v.ravel())
        span = lm[-1] - lm[0]
        if span <= 0:
            continue
        rows.append((lm - lm[0]) / span * 100.0)
    if not rows:
        return DEFAULT_REFERENCE.copy()
    ref = np.mean(rows, axis=0)
    return np.maximum.accumulate(ref)


def piecewise_linear(values: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Map ``src`` landmarks onto ``dst``; the end segments extend linearly."""
    keep = np.concatenate([[True], np.diff(src) > 0])
    src, dst = src[keep], dst[keep]
    if src.size < 2:
        raise ValueError("landmarks collapse to a single intensity")
    out = np.interp(values, src, dst)
    lo_slope = (dst[1] - dst[0]) / (src[1] - src[0])
    hi_slope = (dst[-1] - dst[-2]) / (src[-1] - src[-2])
    below = values < src[0]
    above = values > src[-1]
    out[below] = dst[0] + (values[below] - src[0]) * lo_slope
    out[above] = dst[-1] + (values[above] - src[-1]) * hi_slope
    return out


def standardize_intensity(volume: np.ndarray, mode: str = "test", rng: np.random.Generator | None = None,
                          reference: np.ndarray | None = None) -> np.ndarray:
    """Landmark-based histogram standardisation, then zero mean and unit std over the foreground.

    The foreground is every voxel above a threshold: the volume mean in test
    mode, a uniform draw between the minimum and the mean in train mode.
    Works channel by channel on (C, D, H, W) input.
    """
    ref = DEFAULT_REFERENCE if reference is None else np.asarray(reference, dtype=np.float64)
    vol = np.asarray(volume, dtype=np.float64)
    if vol.size == 0:
        raise ValueError("empty volume")
    chans = vol if vol.ndim == 4 else vol[None]
    out = np.empty(chans.shape, dtype=np.float32)
    for i, v in enumerate(chans):
        if v.max() == v.min():
            raise DataError("cannot standardise a constant volume")
        thr = foreground_threshold(v, mode, rng)
        mask = v > thr
        if mask.sum() < 2:
            mask = v >= thr
        mapped = piecewise_linear(v, landmarks(v[mask]), ref)
        fg = mapped[mask]
        std = fg.std()
        if std == 0:
            raise DataError("foreground has zero spread after standardisation")
        out[i] = (mapped - fg.mean()) / std
    return out if vol.ndim == 4 else out[0]


# ----------------------------------------------------------------------


def sample_subvolume(image: np.ndarray, labels: np.ndarray, size, rng: np.random.Generator):
    """Uniformly placed crop of ``size`` voxels per side from (C, D, H, W) / (D, H, W)."""
    sizes = (size,) * 3 if np.isscalar(size) else tuple(size)
    spatial = labels.shape
    if image.shape[1:] != spatial:
        raise ValueError(f"image {image.shape} and labels {labels.shape} are not congruent")
    if any(s > d for s, d in zip(sizes, spatial)):
        raise ValueError(f"volume {spatial} smaller than subvolume {sizes}")
    origin = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(sizes, spatial))
    sl = tuple(slice(o, o + s) for o, s in zip(origin, sizes))
    return image[(slice(None),) + sl], labels[sl], origin


@dataclass
class AugmentationConfig:
    max_rotation_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    randomize_threshold: bool = True
    enabled: bool = True


def _rotation(angle_deg: float, axes: tuple[int, int]) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    m = np.eye(3)
    i, j = axes
    m[i, i] = m[j, j] = np.cos(a)
    m[i, j] = -np.sin(a)
    m[j, i] = np.sin(a)
    return m


# axial (H, W), coronal (D, W), sagittal (D, H), applied in this order
PLANES = ((1, 2), (0, 2), (0, 1))


def affine_matrix(angles_deg, scale: float = 1.0) -> np.ndarray:
    rot = np.eye(3)
    for angle, plane in zip(angles_deg, PLANES):
        rot = _rotation(angle, plane) @ rot
    return scale * rot


def warp(volume: np.ndarray, angles_deg, scale: float = 1.0, order: int = 1) -> np.ndarray:
    """Rotate/scale a (D, H, W) array about its centre; order 1 trilinear, 0 nearest."""
    fwd = affine_matrix(angles_deg, scale)
    inv = np.linalg.inv(fwd)
    centre = (np.asarray(volume.shape) - 1) / 2.0
    offset = centre - inv @ centre
    return ndimage.affine_transform(volume, inv, offset, output_shape=volume.shape,
                                    order=order, mode="nearest")


def augment_subvolume(image: np.ndarray, labels: np.ndarray, config: AugmentationConfig,
                      rng: np.random.Generator):
    """Random rotation in each orthogonal plane plus isotropic rescaling."""
    if image.shape[1:] != labels.shape:
        raise ValueError("image and labels are not congruent")
    if not config.enabled:
        return image, labels
    angles = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg, size=3)
    scale = float(rng.uniform(*config.scale_range))
    img = np.stack([warp(c, angles, scale, order=1) for c in image]).astype(image.dtype)
    lab = warp(labels, angles, scale, order=0).astype(labels.dtype)
    return img, lab
