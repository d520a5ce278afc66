from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..annotation import TapSample
from ..domain import Frame, TriggerState
from .config import TapConfig
from .model import TapModel, forward_with_cache, init_model, preprocess_frame, stack_frames, tap_forward, tap_loss_and_grad

log = logging.getLogger(__name__)


class FrameTensorCache:
    """Preprocessed per-frame tensors keyed by frame index."""

    def __init__(self, frames: Mapping[int, Frame], cfg: TapConfig):
        self.frames = frames
        self.cfg = cfg
        self._cache: dict[int, np.ndarray] = {}

    def frame(self, index: int) -> np.ndarray:
        if index not in self._cache:
            if index not in self.frames:
                raise KeyError(f"frame {index} is missing from the frame store")
            self._cache[index] = preprocess_frame(self.frames[index], self.cfg)
        return self._cache[index]

    def window(self, sample: TapSample) -> np.ndarray:
        if len(sample.frame_indices) != self.cfg.n_history:
            raise ValueError(
                f"sample has {len(sample.frame_indices)} frames but the model expects n_history={self.cfg.n_history}"
            )
        return stack_frames([self.frame(i) for i in sample.frame_indices])


@dataclass
class TrainResult:
    model: TapModel
    loss_history: list[float] = field(default_factory=list)
    accuracy_history: list[float] = field(default_factory=list)
    train_accuracy_history: list[float] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.loss_history)


def tap_train(
    samples: list[TapSample],
    frames: Mapping[int, Frame] | FrameTensorCache,
    cfg: TapConfig,
    epochs: int,
    lr: float = 0.01,
    momentum: float = 0.9,
    clip_norm: float | None = 1.0,
    stop_at_accuracy: float | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Single-sample SGD with momentum over seeded shuffles.

    Each gradient is rescaled to global L2 norm at most ``clip_norm``
    (None disables clipping); without it a single large step can kill
    every ReLU in the conv stack.

    ``accuracy_history`` is the running accuracy of the predictions made
    during each epoch (before each update). With ``stop_at_accuracy`` set,
    the end-of-epoch model is scored on the whole training set (recorded in
    ``train_accuracy_history``) and training stops once that score reaches it.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    if clip_norm is not None and clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    if epochs < 1:
        raise ValueError("epochs must be positive")
    store = frames if isinstance(frames, FrameTensorCache) else FrameTensorCache(frames, cfg)
    model = init_model(cfg)
    velocity = model.zeros_like()
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(model)

    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        total_loss, correct = 0.0, 0
        for idx in order:
            sample = samples[idx]
            cache = forward_with_cache(store.window(sample), sample.history_states, model)
            correct += int(cache.output.level == sample.gt_state)
            loss, grads = tap_loss_and_grad(cache, sample.gt_state, model)
            total_loss += loss
            scale = 1.0
            if clip_norm is not None:
                norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
                if norm > clip_norm:
                    scale = clip_norm / norm
            for name, param in model.params.items():
                v = velocity[name]
                v *= momentum
                v -= (lr * scale) * grads[name]
                param += v
        mean_loss = total_loss / len(samples)
        running = correct / len(samples)
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch + 1}")
        result.loss_history.append(mean_loss)
        result.accuracy_history.append(running)
        log.debug("epoch %d loss %.6f acc %.4f", epoch + 1, mean_loss, running)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss, running)
        if stop_at_accuracy is not None:
            truth = [s.gt_state for s in samples]
            full = accuracy(predict(model, samples, store), truth)
            result.train_accuracy_history.append(full)
            if full >= stop_at_accuracy:
                break
    return result


def predict(model: TapModel, samples: list[TapSample], frames) -> list[TriggerState]:
    store = frames if isinstance(frames, FrameTensorCache) else FrameTensorCache(frames, model.config)
    return [tap_forward(store.window(s), s.history_states, model).level for s in samples]


def accuracy(predictions, truth) -> float:
    return sum(int(p == t) for p, t in zip(predictions, truth)) / len(truth)
