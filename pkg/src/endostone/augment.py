"""Training-time stochastic augmentation: flips plus random affine transforms.

Transforms compose in the fixed order flip -> scale -> rotate -> translate so
a sampled parameter set is reproducible. Warps are bilinear with reflect
padding; augmentation is label-preserving and is applied to training batches
only (the evaluation pipeline never augments test images).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from .dataset import INPUT_SIZE


@dataclass(frozen=True)
class AugmentConfig:
    scaling_range: float = 0.3
    rotation_range: float = 50.0  # degrees
    translation_range: float = 0.2  # fraction of width/height
    horizontal_flip: bool = True
    vertical_flip: bool = True

    def validate(self) -> None:
        if self.scaling_range < 0 or self.rotation_range < 0 or self.translation_range < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if self.scaling_range >= 1.0:
            raise ValueError("scaling_range must stay below 1")


@dataclass(frozen=True)
class SampledTransform:
    flip_h: bool
    flip_v: bool
    scale: float
    rotation: float  # degrees
    shift_x: float  # fraction of width
    shift_y: float  # fraction of height


IDENTITY_TRANSFORM = SampledTransform(False, False, 1.0, 0.0, 0.0, 0.0)


def sample_transform(rng: np.random.Generator, config: AugmentConfig) -> SampledTransform:
    """Draw one transform; parameters uniform in their ranges, flips fair coins.

    The draw order is fixed (flip_h, flip_v, scale, rotation, shifts) so a
    given rng state always yields the same transform.
    """
    config.validate()
    flip_h = bool(config.horizontal_flip and rng.uniform() < 0.5)
    flip_v = bool(config.vertical_flip and rng.uniform() < 0.5)
    scale = float(rng.uniform(1.0 - config.scaling_range, 1.0 + config.scaling_range))
    rotation = float(rng.uniform(-config.rotation_range, config.rotation_range))
    shift_x = float(rng.uniform(-config.translation_range, config.translation_range))
    shift_y = float(rng.uniform(-config.translation_range, config.translation_range))
    return SampledTransform(flip_h, flip_v, scale, rotation, shift_x, shift_y)


def _inverse_matrix(t: SampledTransform, height: int, width: int):
    """Homogeneous (y, x) matrix mapping output pixels back to input pixels
    for flip -> scale -> rotate -> translate about the image center.

    Built by composing the exact inverses in reverse order (no numerical
    matrix inversion), so identity and pure flips map onto exact integer
    coordinates and stay lossless under bilinear interpolation.
    """
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0

    def centered(m):
        full = np.eye(3)
        full[:2, :2] = m
        full[:2, 2] = np.array([cy, cx]) - m @ np.array([cy, cx])
        return full

    flip_inv = np.diag([-1.0 if t.flip_v else 1.0, -1.0 if t.flip_h else 1.0])
    scale_inv = np.diag([1.0 / t.scale, 1.0 / t.scale])
    th = np.deg2rad(-t.rotation)
    rot_inv = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    translate_inv = np.eye(3)
    translate_inv[0, 2] = -t.shift_y * height
    translate_inv[1, 2] = -t.shift_x * width

    return centered(flip_inv) @ centered(scale_inv) @ centered(rot_inv) @ translate_inv


def apply(t: SampledTransform, img: np.ndarray) -> np.ndarray:
    """Warp a 256x256x3 [0,1] image; exposed borders are reflect-filled."""
    if img.shape != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ValueError(f"expected ({INPUT_SIZE}, {INPUT_SIZE}, 3) image, got {img.shape}")
    inverse = _inverse_matrix(t, INPUT_SIZE, INPUT_SIZE)
    matrix, offset = inverse[:2, :2], inverse[:2, 2]
    out = np.empty_like(img)
    for c in range(3):
        out[:, :, c] = affine_transform(
            img[:, :, c], matrix, offset=offset, order=1, mode="reflect"
        )
    return out
