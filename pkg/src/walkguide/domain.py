"""Shared domain types and the taxonomy rules used across the runtime.

Danger levels, scene attributes, detections, spatial priors (clock hour and
step bucket) and the reminder / QA records all live here so that every other
module speaks the same vocabulary.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class TriggerState(enum.IntEnum):
    """Danger level / trigger state. The integer value indexes probability vectors."""

    LOW = 0
    MID = 1
    HIGH = 2

    @property
    def letter(self) -> str:
        return "ABC"[self.value]

    @property
    def label(self) -> str:
        return ("Low", "Mid", "High")[self.value]

    @classmethod
    def parse(cls, text: str) -> "TriggerState":
        """Accept a letter code (A/B/C) or a level name (Low/Mid/High), any case."""
        key = str(text).strip().lower()
        table = {
            "a": cls.LOW, "low": cls.LOW,
            "b": cls.MID, "mid": cls.MID, "medium": cls.MID,
            "c": cls.HIGH, "high": cls.HIGH,
        }
        try:
            return table[key]
        except KeyError:
            raise ValueError(f"unknown trigger state {text!r}") from None


class TrafficFlow(enum.Enum):
    LOW = "Low"
    MID = "Mid"
    HIGH = "High"


class Weather(enum.Enum):
    SUNNY = "Sunny"
    NIGHT = "Night"
    OVERCAST = "Overcast"
    CLOUDY = "Cloudy"
    INDOOR = "Indoor"
    OTHER = "Other"


class Location(enum.Enum):
    BUSY_STREET = "BusyStreet"
    ROAD = "Road"
    RESTAURANT = "Restaurant"
    PEDESTRIAN_PATH = "PedestrianPath"
    CORRIDOR = "Corridor"
    BICYCLE_LANE = "BicycleLane"
    SHOPPING_MALL = "ShoppingMall"
    OTHER = "Other"


class ReminderKind(enum.Enum):
    OBSTACLE = "Obstacle"
    INTERSECTION = "Intersection"
    ROAD_WIDTH = "RoadWidth"
    ONCOMING_MOVER = "OncomingMover"
    ROAD_DEPARTURE = "RoadDeparture"
    IDENTIFIER = "Identifier"


class QAKind(enum.Enum):
    SCENE_PERCEPTION = "ScenePerception"
    ROAD_INQUIRY = "RoadInquiry"
    DETAILED_CONSULTATION = "DetailedConsultation"


def parse_enum(enum_cls, text: str):
    """Look up an enum member by value, ignoring case, spaces, dashes and underscores."""
    squash = lambda s: "".join(ch for ch in s.lower() if ch.isalnum())  # noqa: E731
    wanted = squash(str(text))
    for member in enum_cls:
        if squash(member.value) == wanted or squash(member.name) == wanted:
            return member
    raise ValueError(f"unknown {enum_cls.__name__} value {text!r}")


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB frame; ``pixels`` has shape (height, width, 3), dtype uint8."""

    index: int
    timestamp_ms: int
    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.dtype != np.uint8:
            raise ValueError("frame pixels must be a uint8 numpy array")
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"frame pixels must have shape (H, W, 3), got {px.shape}")
        if self.index < 0 or self.timestamp_ms < 0:
            raise ValueError("frame index and timestamp must be non-negative")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.index == other.index
            and self.timestamp_ms == other.timestamp_ms
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class Detection:
    label: str
    bbox: tuple[float, float, float, float]  # x, y, w, h normalized to the frame
    score: float

    def __post_init__(self):
        x, y, w, h = (float(v) for v in self.bbox)
        if not all(math.isfinite(v) for v in (x, y, w, h, self.score)):
            raise ValueError("detection values must be finite")
        if w <= 0 or h <= 0:
            raise ValueError(f"bbox width/height must be positive, got {self.bbox}")
        # small slack for detectors that write x+w = 1.0000001
        if x < 0 or y < 0 or x + w > 1 + 1e-9 or y + h > 1 + 1e-9:
            raise ValueError(f"bbox {self.bbox} leaves the unit frame")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        object.__setattr__(self, "bbox", (x, y, w, h))

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]

    @property
    def center_x(self) -> float:
        return self.bbox[0] + self.bbox[2] / 2.0


@dataclass(frozen=True)
class DetectionSet:
    frame_index: int
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


@dataclass(frozen=True)
class HazardFlags:
    narrow_road: bool = False
    bumpy_road: bool = False
    vehicle_warning: bool = False
    hazard_within_15_steps: bool = False

    def any(self) -> bool:
        return self.narrow_road or self.bumpy_road or self.vehicle_warning or self.hazard_within_15_steps


@dataclass(frozen=True)
class SceneAttributes:
    weather: Weather = Weather.OTHER
    location: Location = Location.OTHER
    traffic_flow: TrafficFlow = TrafficFlow.LOW
    danger: TriggerState = TriggerState.LOW
    scene_description: str = ""


@dataclass(frozen=True)
class ClockDirection:
    hour: int

    def __post_init__(self):
        if not 1 <= self.hour <= 12:
            raise ValueError(f"clock hour must be in [1, 12], got {self.hour}")


@dataclass(frozen=True)
class StepBucket:
    steps: int

    def __post_init__(self):
        if self.steps < 5 or self.steps % 5:
            raise ValueError(f"step bucket must be a positive multiple of 5, got {self.steps}")


@dataclass(frozen=True)
class ObjectPrior:
    label: str
    direction: ClockDirection
    distance: StepBucket
    score: float


@dataclass(frozen=True)
class Reminder:
    timestamp_ms: int
    kinds: frozenset
    text: str

    def __post_init__(self):
        object.__setattr__(self, "kinds", frozenset(self.kinds))
        if not self.kinds:
            raise ValueError("a reminder needs at least one kind")
        if not self.text.strip():
            raise ValueError("reminder text must be non-empty")


@dataclass(frozen=True)
class QARecord:
    timestamp_ms: int
    kind: QAKind
    question: str
    answer: str

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("question and answer must be non-empty")


def classify_danger(traffic: TrafficFlow, hazards: HazardFlags) -> TriggerState:
    """High on any hazard; Low only for low traffic with no hazard; Mid otherwise."""
    if hazards.any():
        return TriggerState.HIGH
    if traffic is TrafficFlow.LOW:
        return TriggerState.LOW
    return TriggerState.MID


def clock_from_angle(azimuth_deg: float) -> ClockDirection:
    """Map a bearing (degrees, positive to the right of heading) to a clock hour.

    30 degrees per hour, 12 straight ahead; exact half-hour ties go to the
    larger hour.
    """
    if not math.isfinite(azimuth_deg):
        raise ValueError(f"azimuth must be finite, got {azimuth_deg}")
    reduced = azimuth_deg % 360.0
    offset = math.floor(reduced / 30.0 + 0.5)
    return ClockDirection((11 + offset) % 12 + 1)


def step_bucket(steps_estimate: float) -> StepBucket:
    if not math.isfinite(steps_estimate) or steps_estimate <= 0:
        raise ValueError(f"step estimate must be positive and finite, got {steps_estimate}")
    nearest = 5 * math.floor(steps_estimate / 5.0 + 0.5)
    return StepBucket(max(5, nearest))


_KIND_KEYWORDS = [
    (ReminderKind.INTERSECTION, ("intersection", "crossroad", "fork", "turn", "corner", "crosswalk")),
    (ReminderKind.ROAD_WIDTH, ("narrow", "wide", "width", "clear road", "road is clear", "passable")),
    (ReminderKind.ONCOMING_MOVER, ("oncoming", "approach", "vehicle", "car", "bicycle", "bike", "pedestrian", "person", "people", "scooter")),
    (ReminderKind.ROAD_DEPARTURE, ("main route", "deviat", "off the road", "off course", "veer", "drift")),
    (ReminderKind.IDENTIFIER, ("sign", "traffic light", "landmark", "signboard", "entrance")),
    (ReminderKind.OBSTACLE, ("obstacle", "wall", "pole", "curb", "hit", "block")),
]


def infer_reminder_kinds(text: str) -> frozenset:
    """Keyword tagging of reminder text; falls back to Obstacle so the set is never empty."""
    lowered = text.lower()
    kinds = {kind for kind, words in _KIND_KEYWORDS if any(w in lowered for w in words)}
    return frozenset(kinds or {ReminderKind.OBSTACLE})


def infer_qa_kind(question: str) -> QAKind:
    lowered = question.lower()
    if any(w in lowered for w in ("how do i get", "how to get", "where is", "route", "way to", "go to", "reach")):
        return QAKind.ROAD_INQUIRY
    if any(w in lowered for w in ("describe", "scene", "around", "what is ahead", "surround")):
        return QAKind.SCENE_PERCEPTION
    return QAKind.DETAILED_CONSULTATION
