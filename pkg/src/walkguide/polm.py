"""Priori-object location: detection filtering and clock/step spatial priors."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .domain import ClockDirection, Detection, DetectionSet, ObjectPrior, clock_from_angle, step_bucket


@dataclass(frozen=True)
class PolmConfig:
    min_score: float = 0.4
    min_area: float = 0.01
    top_k: int = 5
    horizontal_fov_deg: float = 90.0
    reference_height: float = 0.5
    # coarse "approximate region" priors: clock hours collapse to three sectors
    approximate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.min_score <= 1.0:
            raise ValueError("min_score must be in [0, 1]")
        if not 0.0 <= self.min_area <= 1.0:
            raise ValueError("min_area must be in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.horizontal_fov_deg <= 0:
            raise ValueError("horizontal_fov_deg must be positive")
        if not 0.0 < self.reference_height <= 1.0:
            raise ValueError("reference_height must be in (0, 1]")


def filter_detections(dets: DetectionSet | list[Detection], cfg: PolmConfig) -> list[Detection]:
    detections = dets.detections if isinstance(dets, DetectionSet) else tuple(dets)
    kept = [
        (i, d) for i, d in enumerate(detections)
        if d.score >= cfg.min_score and d.area >= cfg.min_area
    ]
    # sorted() is stable, so ties keep their original order
    kept = sorted(kept, key=lambda item: -(item[1].score * item[1].area))
    return [d for _, d in kept[: cfg.top_k]]


def localize(det: Detection, cfg: PolmConfig) -> ObjectPrior:
    azimuth = (det.center_x - 0.5) * cfg.horizontal_fov_deg
    steps = 5.0 * cfg.reference_height / det.bbox[3]
    return ObjectPrior(
        label=det.label,
        direction=clock_from_angle(azimuth),
        distance=step_bucket(steps),
        score=det.score,
    )


def clock_sector(direction: ClockDirection) -> str:
    """Coarse sector for the approximate-prior variant: "10-11", "12" or "1-2"."""
    if direction.hour == 12:
        return "12"
    return "1-2" if direction.hour <= 6 else "10-11"


def _sort_key(prior: ObjectPrior):
    return (prior.distance.steps, prior.direction.hour, prior.label)


def priors_to_fragment(priors: list[ObjectPrior], approximate: bool = False) -> str:
    """Canonical JSON array text injected into the walk prompt."""
    items = []
    for p in sorted(priors, key=_sort_key):
        clock = clock_sector(p.direction) if approximate else p.direction.hour
        items.append({"label": p.label, "clock": clock, "steps": p.distance.steps})
    return json.dumps(items, separators=(",", ":"), ensure_ascii=False)


def build_priors(dets: DetectionSet | None, cfg: PolmConfig) -> list[ObjectPrior]:
    if dets is None:
        return []
    return [localize(d, cfg) for d in filter_detections(dets, cfg)]


def build_fragment(dets: DetectionSet | None, cfg: PolmConfig) -> str:
    return priors_to_fragment(build_priors(dets, cfg), approximate=cfg.approximate)
