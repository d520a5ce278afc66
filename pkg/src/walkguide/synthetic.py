"""Synthetic data: brightness-coded TAP datasets and replayable frame directories."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .annotation import TapSample
from .domain import Frame, TriggerState

# mean grey level per class, as a fraction of 255
BRIGHTNESS_RANGES = {
    TriggerState.LOW: (0.05, 0.30),
    TriggerState.MID: (0.40, 0.60),
    TriggerState.HIGH: (0.70, 0.95),
}


def brightness_frame(index: int, level: TriggerState, rng: np.random.Generator, size: int = 64, noise: float = 6.0) -> Frame:
    lo, hi = BRIGHTNESS_RANGES[level]
    base = rng.uniform(lo, hi) * 255.0
    tint = rng.uniform(-10.0, 10.0, size=3)
    pixels = base + tint + rng.normal(0.0, noise, size=(size, size, 3))
    return Frame(index=index, timestamp_ms=index * 500, pixels=np.clip(np.rint(pixels), 0, 255).astype(np.uint8))


def brightness_dataset(n_samples: int, n_history: int = 3, seed: int = 0, size: int = 64, first_index: int = 0):
    """Balanced 3-class samples whose label is the brightness of their frames.

    History states are random, so only the visual branch carries the label.
    Returns ``(samples, frames)`` with ``frames`` keyed by frame index.
    """
    rng = np.random.default_rng([seed, 7])
    labels = [TriggerState(i % 3) for i in range(n_samples)]
    order = rng.permutation(n_samples)
    frames: dict[int, Frame] = {}
    samples = []
    next_index = first_index
    for pos in order:
        level = labels[pos]
        indices = []
        for _ in range(n_history):
            frames[next_index] = brightness_frame(next_index, level, rng, size)
            indices.append(next_index)
            next_index += 1
        history = tuple(TriggerState(int(s)) for s in rng.integers(0, 3, size=n_history))
        samples.append(TapSample(tuple(indices), history, level))
    return samples, frames


def level_schedule(n_frames: int, seed: int = 0, segment: int = 8) -> list[TriggerState]:
    """Piecewise-constant danger levels, one per frame."""
    rng = np.random.default_rng([seed, 11])
    levels = []
    while len(levels) < n_frames:
        levels.extend([TriggerState(int(rng.integers(0, 3)))] * segment)
    return levels[:n_frames]


def write_frame_dir(frame_dir, frames: list[Frame]) -> None:
    """Write ``frame_%06d.png`` files plus ``manifest.jsonl``."""
    from PIL import Image

    frame_dir = Path(frame_dir)
    frame_dir.mkdir(parents=True, exist_ok=True)
    with (frame_dir / "manifest.jsonl").open("w", encoding="utf-8") as manifest:
        for f in frames:
            name = f"frame_{f.index:06d}.png"
            Image.fromarray(f.pixels, mode="RGB").save(frame_dir / name)
            manifest.write(json.dumps({"index": f.index, "timestamp_ms": f.timestamp_ms, "file": name}) + "\n")


def synthetic_stream(frame_dir, n_frames: int = 60, fps: float = 2.0, seed: int = 0, size: int = 64, detections_path=None):
    """A replayable brightness-coded stream with a few detections per frame."""
    rng = np.random.default_rng([seed, 13])
    levels = level_schedule(n_frames, seed)
    frames = []
    for i, level in enumerate(levels):
        f = brightness_frame(i, level, rng, size)
        frames.append(Frame(i, int(round(i * 1000.0 / fps)), f.pixels))
    write_frame_dir(frame_dir, frames)
    if detections_path is not None:
        labels = ["person", "car-(automobile)", "pole", "bicycle", "trash-can", "cone"]
        with Path(detections_path).open("w", encoding="utf-8") as fh:
            for i in range(n_frames):
                for _ in range(int(rng.integers(0, 4))):
                    w, h = rng.uniform(0.05, 0.4), rng.uniform(0.1, 0.6)
                    x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
                    rec = {
                        "frame_index": i,
                        "label": labels[int(rng.integers(0, len(labels)))],
                        "bbox": [round(x, 4), round(y, 4), round(w, 4), round(h, 4)],
                        "score": round(float(rng.uniform(0.2, 1.0)), 3),
                    }
                    fh.write(json.dumps(rec) + "\n")
    return frames, levels
