"""Activation-map explanations: Grad-CAM heat maps, overlay rendering and the
hot-spot location analysis (in stone / outside stone / endoscope tip)."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import matplotlib
import numpy as np
import torch

from .dataset import ClassLabel, View
from .model import TrainedModel, feature_maps_and_grads

OVERLAY_COLORMAP = "inferno"
OVERLAY_ALPHA = 0.4


@dataclass
class HeatMap:
    """Non-negative activation map aligned pixel-for-pixel with the input;
    scaled so the maximum is 1 unless the map is identically zero."""

    values: np.ndarray  # (H, W) float64 in [0, 1]
    target_class: ClassLabel
    peak: tuple[int, int]  # (row, col) of the maximum


class HotspotCategory(Enum):
    IN_STONE = "in_stone"
    OUTSIDE_STONE = "outside_stone"
    ENDOSCOPE_TIP = "endoscope_tip"


@dataclass(frozen=True)
class HotspotThresholds:
    hot_value: float = 0.8  # heat-map value that delimits the hot region
    tip_overlap: float = 0.25  # hot-region fraction on the tip => tip
    stone_overlap: float = 0.50  # hot-region fraction on the stone => in stone


def _upsample_bilinear(coarse: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    if coarse.shape == out_shape:
        return coarse.astype(np.float64)
    t = torch.from_numpy(coarse.astype(np.float64))[None, None]
    up = torch.nn.functional.interpolate(
        t, size=out_shape, mode="bilinear", align_corners=False
    )
    return up[0, 0].numpy()


def grad_cam(model: TrainedModel, img: np.ndarray, target_class: ClassLabel) -> HeatMap:
    """Heat map of the image regions driving the target class score.

    Channel weights are the spatial means of the score gradients; the weighted
    feature-map sum is rectified, upsampled bilinearly to the image size and
    scaled by its maximum (identically-zero maps stay zero).
    """
    fmap, grads = feature_maps_and_grads(model, img, target_class)
    alpha = grads.mean(axis=(0, 1))
    coarse = np.maximum(fmap @ alpha, 0.0)
    values = _upsample_bilinear(coarse, img.shape[:2])
    values = np.maximum(values, 0.0)
    peak_value = values.max()
    if peak_value > 0:
        values = values / peak_value
    peak = np.unravel_index(int(np.argmax(values)), values.shape)
    return HeatMap(values=values, target_class=target_class, peak=(int(peak[0]), int(peak[1])))


def localize_hotspot(
    heat_map: HeatMap,
    stone_mask: np.ndarray,
    tip_mask: np.ndarray,
    thresholds: HotspotThresholds = HotspotThresholds(),
) -> HotspotCategory:
    """Categorize the hot region (values >= hot_value) by mask overlap.

    Tip wins at >= tip_overlap of the hot region, else stone at
    >= stone_overlap, else the hot spot lies outside the stone.
    """
    values = heat_map.values
    if values.shape != stone_mask.shape or values.shape != tip_mask.shape:
        raise ValueError("masks must align with the heat map")
    if values.max() <= 0:
        raise ValueError("no hotspot: heat map is identically zero")
    hot = values >= thresholds.hot_value
    hot_count = int(hot.sum())
    if int((hot & tip_mask).sum()) >= thresholds.tip_overlap * hot_count:
        return HotspotCategory.ENDOSCOPE_TIP
    if int((hot & stone_mask).sum()) >= thresholds.stone_overlap * hot_count:
        return HotspotCategory.IN_STONE
    return HotspotCategory.OUTSIDE_STONE


def overlay(img: np.ndarray, heat_map: HeatMap) -> np.ndarray:
    """Blend the color-mapped heat map over the image; returns an 8-bit RGB
    raster. Zero-heat pixels pass the image through unchanged."""
    cmap = matplotlib.colormaps[OVERLAY_COLORMAP]
    heat_rgb = cmap(heat_map.values)[..., :3]
    weight = (OVERLAY_ALPHA * heat_map.values)[..., None]
    blended = img * (1.0 - weight) + heat_rgb * weight
    return np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class HotspotCase:
    heat_map: HeatMap | None
    location: HotspotCategory
    correct: bool
    view: View


@dataclass
class HotspotRateReport:
    """Per-view hot-spot category tallies, split by classification outcome."""

    counts: dict[tuple[View, bool, HotspotCategory], int]

    def total(self, view: View, correct: bool) -> int:
        return sum(
            n for (v, c, _), n in self.counts.items() if v == view and c == correct
        )

    def rate(self, view: View, correct: bool, category: HotspotCategory) -> float | None:
        """Percentage of cases with the given category among (view, correct)
        cases; None when there are no such cases."""
        total = self.total(view, correct)
        if total == 0:
            return None
        return 100.0 * self.counts.get((view, correct, category), 0) / total

    def rows(self) -> list[dict[str, str]]:
        out = []
        for view in View:
            for correct in (True, False):
                total = self.total(view, correct)
                if total == 0:
                    continue
                for category in HotspotCategory:
                    count = self.counts.get((view, correct, category), 0)
                    out.append(
                        {
                            "view": view.value,
                            "correct": str(correct).lower(),
                            "category": category.value,
                            "count": str(count),
                            "rate": f"{100.0 * count / total:.1f}",
                        }
                    )
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["view", "correct", "category", "count", "rate"])
            writer.writeheader()
            writer.writerows(self.rows())


def hotspot_rates(cases: list[HotspotCase]) -> HotspotRateReport:
    counts = Counter((case.view, case.correct, case.location) for case in cases)
    return HotspotRateReport(counts=dict(counts))
