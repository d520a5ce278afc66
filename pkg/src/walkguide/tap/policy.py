from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..domain import TriggerState


@dataclass
class TriggerPolicy:
    """Maps TAP probabilities to fire / suppress / silent with per-level cooldowns.

    Holds mutable last-fire times; owned by a single engine.
    """

    threshold_high: float = 0.5
    cooldown_high_ms: int = 5000
    cooldown_mid_ms: int = 15000
    last_fire_ms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.threshold_high < 1.0:
            raise ValueError("threshold_high must be in (0, 1)")
        if self.cooldown_high_ms <= 0 or self.cooldown_mid_ms <= 0:
            raise ValueError("cooldowns must be positive")

    def cooldown_ms(self, level: TriggerState) -> int:
        return self.cooldown_high_ms if level is TriggerState.HIGH else self.cooldown_mid_ms

    def reset(self) -> None:
        self.last_fire_ms.clear()


@dataclass(frozen=True)
class Decision:
    action: str  # "fire", "suppressed" or "silent"
    level: TriggerState

    @property
    def fired(self) -> bool:
        return self.action == "fire"


def decide_trigger(probs, now_ms: int, policy: TriggerPolicy) -> Decision:
    probs = np.asarray(probs, dtype=float)
    level = TriggerState(int(np.argmax(probs)))
    if level is TriggerState.LOW:
        return Decision("silent", level)
    if level is TriggerState.HIGH and probs[TriggerState.HIGH] < policy.threshold_high:
        return Decision("suppressed", level)
    last = policy.last_fire_ms.get(level)
    if last is not None and now_ms - last < policy.cooldown_ms(level):
        return Decision("suppressed", level)
    policy.last_fire_ms[level] = now_ms
    return Decision("fire", level)
