"""Stone taxonomy, observation records, manifest ingestion and image preprocessing.

The corpus covers three pure morphologies (Ia/COM, IIb/COD, IIIb/UA) and the
two mixed compositions seen intraoperatively (Ia+IIb, Ia+IIIb). Every image is
one observation of one physical stone, either of its surface (before
fragmentation) or of its section (after).
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

INPUT_SIZE = 256


class Morphology(Enum):
    """Pure stone morphology. Ia = COM, IIb = COD, IIIb = UA."""

    IA = "Ia"
    IIB = "IIb"
    IIIB = "IIIb"


class View(Enum):
    SURFACE = "surface"
    SECTION = "section"


class ClassLabel(Enum):
    """The five supported composition classes, in the fixed report/argmax order."""

    IA = "Ia"
    IA_IIB = "Ia+IIb"
    IA_IIIB = "Ia+IIIb"
    IIB = "IIb"
    IIIB = "IIIb"

    @property
    def components(self) -> frozenset[Morphology]:
        return _COMPONENTS[self]

    @property
    def is_mixed(self) -> bool:
        return len(_COMPONENTS[self]) == 2

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)


CLASS_ORDER: tuple[ClassLabel, ...] = tuple(ClassLabel)

_COMPONENTS: dict[ClassLabel, frozenset[Morphology]] = {
    ClassLabel.IA: frozenset({Morphology.IA}),
    ClassLabel.IA_IIB: frozenset({Morphology.IA, Morphology.IIB}),
    ClassLabel.IA_IIIB: frozenset({Morphology.IA, Morphology.IIIB}),
    ClassLabel.IIB: frozenset({Morphology.IIB}),
    ClassLabel.IIIB: frozenset({Morphology.IIIB}),
}

_BY_COMPONENTS: dict[frozenset[Morphology], ClassLabel] = {
    comps: label for label, comps in _COMPONENTS.items()
}

MIXED_CLASSES: tuple[ClassLabel, ...] = (ClassLabel.IA_IIB, ClassLabel.IA_IIIB)
PURE_CLASSES: tuple[ClassLabel, ...] = (ClassLabel.IA, ClassLabel.IIB, ClassLabel.IIIB)


def class_of(components: set[Morphology] | frozenset[Morphology]) -> ClassLabel:
    """Map a set of component morphologies onto its class.

    Raises ValueError for the combinations outside the five-class taxonomy
    (e.g. IIb+IIIb, or three components).
    """
    key = frozenset(components)
    if not key:
        raise ValueError("empty component set")
    try:
        return _BY_COMPONENTS[key]
    except KeyError:
        names = "+".join(sorted(m.value for m in key))
        raise ValueError(f"unsupported class: {names}") from None


def components_of(label: ClassLabel) -> frozenset[Morphology]:
    """Inverse of class_of; mixed-metric scoring decomposes labels through this."""
    return _COMPONENTS[label]


def parse_label(token: str) -> ClassLabel:
    try:
        return ClassLabel(token)
    except ValueError:
        raise ValueError(f"unsupported class: {token!r}") from None


@dataclass
class StoneObservation:
    """One endoscopic image of one physical stone."""

    observation_id: str
    stone_id: str
    view: View
    label: ClassLabel
    image: np.ndarray  # uint8, H x W x 3


class ManifestError(ValueError):
    """Raised when a corpus manifest cannot be ingested."""


MANIFEST_HEADER = ["observation_id", "stone_id", "view", "label", "image_path"]


def parse_manifest(path: str | Path) -> list[StoneObservation]:
    """Load a corpus manifest CSV and its referenced PNG images.

    Image paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    observations: list[StoneObservation] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(
                f"bad manifest header: {reader.fieldnames!r}, expected {MANIFEST_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            obs_id = row["observation_id"]
            if obs_id in seen:
                raise ManifestError(f"line {lineno}: duplicate observation_id {obs_id!r}")
            seen.add(obs_id)
            try:
                view = View(row["view"])
            except ValueError:
                raise ManifestError(f"line {lineno}: unknown view {row['view']!r}") from None
            try:
                label = parse_label(row["label"])
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            img_path = base / row["image_path"]
            if not img_path.is_file():
                raise ManifestError(f"line {lineno}: missing image file {img_path}")
            image = np.asarray(Image.open(img_path).convert("RGB"))
            observations.append(
                StoneObservation(
                    observation_id=obs_id,
                    stone_id=row["stone_id"],
                    view=view,
                    label=label,
                    image=image,
                )
            )
    return observations


def write_manifest(rows: list[dict[str, str]], path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER)
        writer.writeheader()
        writer.writerows(rows)


def preprocess_image(raw: np.ndarray) -> np.ndarray:
    """Center-crop to a square, resample to 256x256, scale to [0, 1] float32.

    Accepts any 8-bit RGB raster; the crop keeps the central min(H, W) square
    so the result is orientation-agnostic.
    """
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected an RGB raster (H, W, 3), got shape {raw.shape}")
    if raw.dtype != np.uint8:
        raise ValueError(f"expected 8-bit channels, got dtype {raw.dtype}")
    h, w = raw.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    cropped = raw[top : top + side, left : left + side]
    if side != INPUT_SIZE:
        cropped = np.asarray(
            Image.fromarray(cropped).resize((INPUT_SIZE, INPUT_SIZE), Image.BILINEAR)
        )
    return cropped.astype(np.float32) / 255.0


@dataclass(frozen=True)
class ClassCount:
    images: int
    stones: int


@dataclass
class CorpusSummary:
    """Image and unique-stone counts per (view, class)."""

    counts: dict[tuple[View, ClassLabel], ClassCount]

    def images(self, view: View, label: ClassLabel) -> int:
        cell = self.counts.get((view, label))
        return cell.images if cell else 0

    def stones(self, view: View, label: ClassLabel) -> int:
        cell = self.counts.get((view, label))
        return cell.stones if cell else 0

    def total_images(self, view: View) -> int:
        return sum(c.images for (v, _), c in self.counts.items() if v == view)

    def total_stones(self, view: View) -> int:
        return sum(c.stones for (v, _), c in self.counts.items() if v == view)

    def format_lines(self) -> list[str]:
        lines = []
        for view in View:
            if self.total_images(view) == 0:
                continue
            lines.append(
                f"{view.value}: {self.total_images(view)} images / {self.total_stones(view)} stones"
            )
            for label in CLASS_ORDER:
                cell = self.counts.get((view, label))
                if cell:
                    lines.append(f"  {label.value}: {cell.images} images / {cell.stones} stones")
        return lines


def corpus_summary(observations: list[StoneObservation]) -> CorpusSummary:
    images: dict[tuple[View, ClassLabel], int] = defaultdict(int)
    stones: dict[tuple[View, ClassLabel], set[str]] = defaultdict(set)
    for obs in observations:
        key = (obs.view, obs.label)
        images[key] += 1
        stones[key].add(obs.stone_id)
    return CorpusSummary(
        counts={key: ClassCount(images[key], len(stones[key])) for key in images}
    )
