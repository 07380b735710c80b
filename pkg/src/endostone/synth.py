"""Deterministic phantom-stone image generator with ground-truth masks.

Each phantom is a star-convex blob on a tissue-like background, textured by a
per-(morphology, view) recipe:

  Ia  surface  dark-brown mammillary bumps
  Ia  section  dark-brown concentric layers around a nucleus
  IIb surface  pale-yellow angular facets
  IIb section  pale-yellow unstructured speckle
  IIIb surface orange, pitted
  IIIb section orange, coarse pores

Mixed classes split the stone along a chord through its centroid and texture
each side with one component recipe. Texturing is multiplicative over a fixed
base color per morphology, so the mean hue of a region stays at the base hue;
the declared REGION_HUE_MARGIN separates component regions of any mixed image.

Everything is a pure function of the seeds, so a corpus can be regenerated
byte-for-byte from its spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter

from .dataset import (
    CLASS_ORDER,
    INPUT_SIZE,
    ClassCount,
    ClassLabel,
    Morphology,
    StoneObservation,
    View,
    write_manifest,
)

# Base colors (RGB in [0,1]). Multiplicative shading keeps per-region mean hue
# within a hair of these hues; adjacent-region hue gaps stay above the margin.
BASE_COLORS: dict[Morphology, tuple[float, float, float]] = {
    Morphology.IA: (0.32, 0.16, 0.10),
    Morphology.IIB: (0.78, 0.70, 0.42),
    Morphology.IIIB: (0.85, 0.50, 0.16),
}

# Guaranteed minimum hue separation between the component regions of a mixed
# phantom (hue in [0,1) as in HSV).
REGION_HUE_MARGIN = 0.02

_BACKGROUND_COLOR = np.array([0.70, 0.44, 0.42])
_TIP_COLOR = np.array([0.24, 0.25, 0.27])


@dataclass
class SyntheticObservation:
    observation: StoneObservation
    stone_mask: np.ndarray  # bool, 256 x 256
    tip_mask: np.ndarray  # bool, 256 x 256 (all-false when no tip rendered)
    region_masks: dict[Morphology, np.ndarray]  # component region -> bool mask
    seed: int


@dataclass
class GeneratorSpec:
    """Corpus recipe: per-(view, class) image/stone counts plus global knobs."""

    counts: dict[tuple[View, ClassLabel], ClassCount]
    seed: int = 0
    tip_probability: float = 0.05

    def validate(self) -> None:
        for (view, label), cell in self.counts.items():
            if cell.images < 0 or cell.stones < 0:
                raise ValueError(f"negative count for {view.value}/{label.value}")
            if cell.images < cell.stones:
                raise ValueError(
                    f"{view.value}/{label.value}: {cell.images} images < {cell.stones} stones"
                )
            if cell.images > 0 and cell.stones == 0:
                raise ValueError(f"{view.value}/{label.value}: images without stones")


def default_corpus_spec(seed: int = 0, tip_probability: float = 0.05) -> GeneratorSpec:
    """The default corpus profile: 347 surface / 236 section images with the
    strong class imbalance of real endoscopic practice."""
    counts = {
        (View.SURFACE, ClassLabel.IA): ClassCount(191, 150),
        (View.SURFACE, ClassLabel.IIB): ClassCount(53, 48),
        (View.SURFACE, ClassLabel.IIIB): ClassCount(29, 23),
        (View.SURFACE, ClassLabel.IA_IIB): ClassCount(64, 54),
        (View.SURFACE, ClassLabel.IA_IIIB): ClassCount(10, 9),
        (View.SECTION, ClassLabel.IA): ClassCount(127, 96),
        (View.SECTION, ClassLabel.IIB): ClassCount(30, 29),
        (View.SECTION, ClassLabel.IIIB): ClassCount(25, 22),
        (View.SECTION, ClassLabel.IA_IIB): ClassCount(31, 26),
        (View.SECTION, ClassLabel.IA_IIIB): ClassCount(23, 15),
    }
    return GeneratorSpec(counts=counts, seed=seed, tip_probability=tip_probability)


def mean_region_hue(image: np.ndarray, mask: np.ndarray) -> float:
    """Hue (HSV, in [0,1)) of the mean RGB over the masked pixels."""
    if image.dtype == np.uint8:
        image = image.astype(np.float64) / 255.0
    mean_rgb = image[mask].mean(axis=0)
    return float(rgb_to_hsv(mean_rgb.reshape(1, 1, 3))[0, 0, 0])


def _smooth_noise(rng: np.random.Generator, sigma: float, shape=(INPUT_SIZE, INPUT_SIZE)):
    """Zero-mean low-pass noise scaled to peak magnitude 1."""
    g = gaussian_filter(rng.standard_normal(shape), sigma)
    peak = np.abs(g).max()
    return g / peak if peak > 0 else g


def _grid():
    ys, xs = np.mgrid[0:INPUT_SIZE, 0:INPUT_SIZE].astype(np.float64)
    return ys, xs


def _stone_mask(rng_stone: np.random.Generator, rng_image: np.random.Generator):
    """Star-convex blob; shape harmonics come from the stone rng, viewpoint
    (rotation/scale/position) from the image rng."""
    n_harm = 4
    amps = rng_stone.uniform(0.02, 0.09, size=n_harm)
    phases = rng_stone.uniform(0.0, 2 * np.pi, size=n_harm)
    base_radius = rng_stone.uniform(68.0, 98.0)

    rot = rng_image.uniform(0.0, 2 * np.pi)
    scale = rng_image.uniform(0.88, 1.12)
    cy = INPUT_SIZE / 2 + rng_image.uniform(-18.0, 18.0)
    cx = INPUT_SIZE / 2 + rng_image.uniform(-18.0, 18.0)

    ys, xs = _grid()
    dy, dx = ys - cy, xs - cx
    theta = np.arctan2(dy, dx)
    radius = base_radius * scale
    boundary = radius * (
        1.0
        + sum(
            amps[k] * np.cos((k + 2) * (theta + rot) + phases[k]) for k in range(len(amps))
        )
    )
    mask = np.hypot(dy, dx) <= boundary
    return mask, (cy, cx)


def _apply_gain(image, mask, base_color, gain):
    color = np.asarray(base_color)
    # keep the brightest channel below 1 so clipping cannot skew the hue
    gain = np.clip(gain, 0.30, 0.995 / color.max())
    image[mask] = color[None, :] * gain[mask, None]


def _texture_gain(rng, morph: Morphology, view: View, mask, center):
    """Multiplicative shading field implementing the per-recipe look."""
    ys, xs = _grid()
    gain = 1.0 + 0.12 * _smooth_noise(rng, 30.0)

    if morph is Morphology.IA and view is View.SURFACE:
        idx = np.flatnonzero(mask)
        n_bumps = int(rng.integers(8, 16))
        picks = rng.choice(idx, size=min(n_bumps, idx.size), replace=False)
        for p in picks:
            by, bx = divmod(int(p), INPUT_SIZE)
            sig = rng.uniform(8.0, 18.0)
            d2 = (ys - by) ** 2 + (xs - bx) ** 2
            gain = gain + 0.38 * np.exp(-d2 / (2 * sig * sig))
    elif morph is Morphology.IA and view is View.SECTION:
        period = rng.uniform(9.0, 16.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        ny = center[0] + rng.uniform(-10.0, 10.0)
        nx = center[1] + rng.uniform(-10.0, 10.0)
        r = np.hypot(ys - ny, xs - nx)
        gain = gain * (1.0 + 0.26 * np.cos(2 * np.pi * r / period + phase))
    elif morph is Morphology.IIB and view is View.SURFACE:
        n_sites = int(rng.integers(12, 22))
        sy = rng.uniform(0, INPUT_SIZE, size=n_sites)
        sx = rng.uniform(0, INPUT_SIZE, size=n_sites)
        site_gain = rng.uniform(0.72, 1.24, size=n_sites)
        d2 = (ys[..., None] - sy) ** 2 + (xs[..., None] - sx) ** 2
        gain = gain * site_gain[np.argmin(d2, axis=-1)]
    elif morph is Morphology.IIB and view is View.SECTION:
        gain = gain * (1.0 + 0.20 * _smooth_noise(rng, 0.9))
    elif morph is Morphology.IIIB and view is View.SURFACE:
        rough = _smooth_noise(rng, 2.2)
        pits = rough < np.quantile(rough[mask], 0.22)
        gain = gain * np.where(pits, 0.55, 1.0) * (1.0 + 0.08 * _smooth_noise(rng, 0.8))
    else:  # IIIb section: coarser pores
        porous = _smooth_noise(rng, 4.5)
        pores = porous < np.quantile(porous[mask], 0.30)
        gain = gain * np.where(pores, 0.58, 1.0) * (1.0 + 0.06 * _smooth_noise(rng, 1.2))

    return gain


def _split_regions(rng, mask, center):
    """Chord through the mask centroid; returns two non-empty half masks."""
    ys, xs = _grid()
    pix_y = ys[mask].mean()
    pix_x = xs[mask].mean()
    for _ in range(8):
        psi = rng.uniform(0.0, np.pi)
        side = (ys - pix_y) * np.sin(psi) + (xs - pix_x) * np.cos(psi) >= 0
        first, second = mask & side, mask & ~side
        if first.any() and second.any():
            return first, second
    raise RuntimeError("degenerate stone mask: could not split into two regions")


def _tip_mask(rng, stone_mask):
    corner = rng.integers(0, 4)
    radius = rng.uniform(55.0, 85.0)
    cy = 0.0 if corner in (0, 1) else float(INPUT_SIZE - 1)
    cx = 0.0 if corner in (0, 2) else float(INPUT_SIZE - 1)
    ys, xs = _grid()
    disk = np.hypot(ys - cy, xs - cx) <= radius
    return disk & ~stone_mask


def generate_observation(
    label: ClassLabel,
    view: View,
    seed: int,
    *,
    stone_seed: int | None = None,
    observation_id: str | None = None,
    stone_id: str | None = None,
    tip_probability: float = 0.05,
) -> SyntheticObservation:
    """Render one phantom observation, deterministic in (label, view, seed).

    When stone_seed is given, the stone's base geometry is drawn from it so
    several images of one stone share the same blob (varied viewpoint and
    illumination come from the per-image seed).
    """
    if label not in CLASS_ORDER:
        raise ValueError(f"unsupported class: {label!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rng_stone = rng if stone_seed is None else np.random.default_rng(
        np.random.SeedSequence(stone_seed)
    )

    stone_mask, center = _stone_mask(rng_stone, rng)
    illumination = rng.uniform(0.86, 1.14)

    # tissue background
    image = np.empty((INPUT_SIZE, INPUT_SIZE, 3))
    bg_shade = illumination * (1.0 + 0.10 * _smooth_noise(rng, 24.0))
    image[:] = _BACKGROUND_COLOR[None, None, :] * np.clip(bg_shade, 0.5, 1.35)[..., None]

    # stone regions
    components = sorted(label.components, key=lambda m: m.value)
    if len(components) == 1:
        region_masks = {components[0]: stone_mask}
    else:
        first, second = _split_regions(rng, stone_mask, center)
        # Ia is always a component of the mixed classes here; give it side one
        others = [m for m in components if m is not Morphology.IA]
        region_masks = {Morphology.IA: first, others[0]: second}

    for morph in sorted(region_masks, key=lambda m: m.value):
        region = region_masks[morph]
        gain = _texture_gain(rng, morph, view, stone_mask, center) * illumination
        _apply_gain(image, region, BASE_COLORS[morph], gain)

    # endoscope tip overlay in a minority of frames
    if rng.uniform() < tip_probability:
        tip = _tip_mask(rng, stone_mask)
        if tip.any():
            tip_shade = illumination * (1.0 + 0.12 * _smooth_noise(rng, 10.0))
            image[tip] = _TIP_COLOR[None, :] * np.clip(tip_shade, 0.6, 1.2)[tip, None]
    else:
        tip = np.zeros_like(stone_mask)

    raster = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    obs = StoneObservation(
        observation_id=observation_id or f"{view.value}-{label.value}-{seed:x}",
        stone_id=stone_id or f"stone-{view.value}-{label.value}-{seed:x}",
        view=view,
        label=label,
        image=raster,
    )
    return SyntheticObservation(
        observation=obs,
        stone_mask=stone_mask,
        tip_mask=tip,
        region_masks=region_masks,
        seed=seed,
    )


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def generate_corpus(spec: GeneratorSpec) -> list[SyntheticObservation]:
    """Render the full corpus described by spec, a pure function of the spec."""
    spec.validate()
    out: list[SyntheticObservation] = []
    views = tuple(View)
    for vi, view in enumerate(views):
        for li, label in enumerate(CLASS_ORDER):
            cell = spec.counts.get((view, label))
            if cell is None or cell.images == 0:
                continue
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, vi, li)))
            extra = rng.multinomial(cell.images - cell.stones, np.full(cell.stones, 1.0 / cell.stones))
            for k in range(cell.stones):
                stone_seed = _derived_seed(spec.seed, vi, li, k)
                stone_id = f"{view.value}-{label.value}-s{k:04d}"
                for j in range(1 + int(extra[k])):
                    image_seed = _derived_seed(spec.seed, vi, li, k, j)
                    out.append(
                        generate_observation(
                            label,
                            view,
                            image_seed,
                            stone_seed=stone_seed,
                            observation_id=f"{stone_id}-i{j:02d}",
                            stone_id=stone_id,
                            tip_probability=spec.tip_probability,
                        )
                    )
    return out


def _mask_to_png(mask: np.ndarray) -> Image.Image:
    return Image.fromarray((mask.astype(np.uint8)) * 255)


def write_corpus(samples: list[SyntheticObservation], out_dir: str | Path) -> Path:
    """Write images, masks, the manifest CSV and the mask sidecar JSON.

    Returns the manifest path. The sidecar maps observation_id to mask paths
    and per-region morphology tags.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    sidecar: dict[str, dict] = {}
    for sample in samples:
        obs = sample.observation
        img_rel = f"images/{obs.observation_id}.png"
        Image.fromarray(obs.image).save(out_dir / img_rel)
        stone_rel = f"masks/{obs.observation_id}_stone.png"
        tip_rel = f"masks/{obs.observation_id}_tip.png"
        _mask_to_png(sample.stone_mask).save(out_dir / stone_rel)
        _mask_to_png(sample.tip_mask).save(out_dir / tip_rel)
        regions = {}
        for morph, mask in sorted(sample.region_masks.items(), key=lambda kv: kv[0].value):
            region_rel = f"masks/{obs.observation_id}_region_{morph.value}.png"
            _mask_to_png(mask).save(out_dir / region_rel)
            regions[morph.value] = region_rel
        rows.append(
            {
                "observation_id": obs.observation_id,
                "stone_id": obs.stone_id,
                "view": obs.view.value,
                "label": obs.label.value,
                "image_path": img_rel,
            }
        )
        sidecar[obs.observation_id] = {
            "stone_mask": stone_rel,
            "tip_mask": tip_rel,
            "regions": regions,
            "seed": sample.seed,
        }
    manifest_path = out_dir / "manifest.csv"
    write_manifest(rows, manifest_path)
    with open(out_dir / "masks.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return manifest_path


def load_mask(dataset_dir: str | Path, rel_path: str) -> np.ndarray:
    arr = np.asarray(Image.open(Path(dataset_dir) / rel_path).convert("L"))
    return arr >= 128


def load_mask_sidecar(dataset_dir: str | Path) -> dict[str, dict]:
    with open(Path(dataset_dir) / "masks.json") as fh:
        return json.load(fh)
