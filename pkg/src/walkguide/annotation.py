"""Timed annotation documents, detection files and TAP sample decomposition.

Annotation text layout::

    weather: Sunny
    location: BusyStreet
    traffic_flow: Low
    danger: Low
    scene_description: narrow lane between parked cars
    danger_track: 0m00s=Low, 2m40s=High

    <2m30s-A,E>
    almost hit the wall, go forward in the 11 o'clock direction.

    <3m39s-O>
    Q: describe the current scene
    A: at a crossroads with many vehicles, keep still

Reminder codes A-F follow the six reminder types in order, O marks a QA pair.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .domain import (
    Detection,
    DetectionSet,
    Location,
    ReminderKind,
    SceneAttributes,
    TrafficFlow,
    TriggerState,
    Weather,
    parse_enum,
)

EVENT_CODES = "ABCDEFO"
CODE_TO_KIND = dict(zip("ABCDEF", ReminderKind))
QA_CODE = "O"

_TIMESTAMP_RE = re.compile(r"^([0-9]+)m([0-9]+)s$")
# canonical form is <2m30s-A,E>; the angle-bracket variant with inner spaces is also read
_HEADER_RE = re.compile(r"^(?:<|⟨)\s*([0-9]+m[0-9]{2}s)\s*-\s*([A-Z](?:\s*,\s*[A-Z])*)\s*(?:>|⟩)$")
_HEADER_LOOSE_RE = re.compile(r"^(?:<|⟨).*(?:>|⟩)$")

STATIC_KEYS = ("weather", "location", "traffic_flow", "danger", "scene_description", "danger_track")


class AnnotationParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DetectionFileError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationEvent:
    time_s: float
    codes: tuple[str, ...]
    body: str

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(self.codes))
        if not self.codes:
            raise ValueError("an event needs at least one code")
        bad = [c for c in self.codes if c not in EVENT_CODES]
        if bad:
            raise ValueError(f"unknown event code(s) {bad}")
        if self.time_s < 0:
            raise ValueError("event time must be non-negative")
        if QA_CODE in self.codes:
            _split_qa(self.body)

    @property
    def is_qa(self) -> bool:
        return QA_CODE in self.codes

    @property
    def reminder_kinds(self) -> frozenset:
        return frozenset(CODE_TO_KIND[c] for c in self.codes if c in CODE_TO_KIND)

    @property
    def question(self) -> str | None:
        return _split_qa(self.body)[0] if self.is_qa else None

    @property
    def answer(self) -> str | None:
        return _split_qa(self.body)[1] if self.is_qa else None


@dataclass(frozen=True)
class AnnotationDoc:
    static: SceneAttributes = field(default_factory=SceneAttributes)
    events: tuple[AnnotationEvent, ...] = ()
    danger_track: tuple[tuple[float, TriggerState], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        track = tuple((float(t), TriggerState(s)) for t, s in self.danger_track)
        if not track:
            track = ((0.0, self.static.danger),)
        if track[0][0] != 0.0:
            raise ValueError("danger track must start at time 0")
        if any(b[0] <= a[0] for a, b in zip(track, track[1:])):
            raise ValueError("danger track times must strictly increase")
        object.__setattr__(self, "danger_track", track)
        times = [e.time_s for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("events must be strictly sorted by time")

    def danger_at(self, time_s: float) -> TriggerState:
        """Ground-truth danger level in force at ``time_s`` (step function)."""
        level = self.danger_track[0][1]
        for start, state in self.danger_track:
            if start <= time_s:
                level = state
            else:
                break
        return level

    def code_counts(self) -> dict[str, int]:
        counts = Counter(c for e in self.events for c in e.codes)
        return {c: counts[c] for c in sorted(counts)}


@dataclass(frozen=True)
class TapSample:
    frame_indices: tuple[int, ...]
    history_states: tuple[TriggerState, ...]
    gt_state: TriggerState

    def __post_init__(self):
        object.__setattr__(self, "frame_indices", tuple(int(i) for i in self.frame_indices))
        object.__setattr__(self, "history_states", tuple(TriggerState(s) for s in self.history_states))
        object.__setattr__(self, "gt_state", TriggerState(self.gt_state))
        if len(self.frame_indices) != len(self.history_states) or not self.frame_indices:
            raise ValueError("frame_indices and history_states must have the same non-zero length")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError("frame_indices must strictly increase")

    def to_json(self) -> dict:
        return {
            "frame_indices": list(self.frame_indices),
            "history_states": [s.letter for s in self.history_states],
            "gt_state": self.gt_state.letter,
        }

    @classmethod
    def from_json(cls, record: dict) -> "TapSample":
        return cls(
            frame_indices=record["frame_indices"],
            history_states=[TriggerState.parse(s) for s in record["history_states"]],
            gt_state=TriggerState.parse(record["gt_state"]),
        )


def _split_qa(body: str) -> tuple[str, str]:
    question = answer = None
    for line in body.splitlines():
        stripped = line.strip()
        if stripped.startswith("Q:") and question is None:
            question = stripped[2:].strip()
        elif stripped.startswith("A:") and answer is None:
            answer = stripped[2:].strip()
    if not question or not answer:
        raise ValueError("QA event body needs a 'Q:' line and an 'A:' line")
    return question, answer


def parse_timestamp(text: str) -> float:
    """``"2m30s"`` -> 150.0"""
    m = _TIMESTAMP_RE.match(text.strip())
    if not m:
        raise ValueError(f"malformed timestamp {text!r}, expected <minutes>m<seconds>s")
    minutes, seconds = int(m.group(1)), int(m.group(2))
    if seconds >= 60:
        raise ValueError(f"malformed timestamp {text!r}: seconds must be below 60")
    return float(60 * minutes + seconds)


def format_timestamp(time_s: float) -> str:
    if time_s < 0 or not math.isfinite(time_s) or time_s != int(time_s):
        raise ValueError(f"timestamps must be whole non-negative seconds, got {time_s}")
    minutes, seconds = divmod(int(time_s), 60)
    return f"{minutes}m{seconds:02d}s"


def _parse_track(value: str, line_no: int) -> tuple[tuple[float, TriggerState], ...]:
    track = []
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        stamp, sep, level = item.partition("=")
        if not sep:
            raise AnnotationParseError(f"danger_track entry {item!r} must look like 1m05s=High", line_no)
        try:
            track.append((parse_timestamp(stamp), TriggerState.parse(level)))
        except ValueError as exc:
            raise AnnotationParseError(str(exc), line_no) from None
    return tuple(track)


def _parse_static(lines: list[tuple[int, str]]):
    values: dict = {}
    track = ()
    for line_no, line in lines:
        key, sep, value = line.partition(":")
        key, value = key.strip().lower(), value.strip()
        if not sep or key not in STATIC_KEYS:
            raise AnnotationParseError(f"expected 'key: value' with key in {STATIC_KEYS}, got {line!r}", line_no)
        if key in values or (key == "danger_track" and track):
            raise AnnotationParseError(f"duplicate static key {key!r}", line_no)
        try:
            if key == "weather":
                values[key] = parse_enum(Weather, value)
            elif key == "location":
                values[key] = parse_enum(Location, value)
            elif key == "traffic_flow":
                values[key] = parse_enum(TrafficFlow, value)
            elif key == "danger":
                values[key] = TriggerState.parse(value)
            elif key == "scene_description":
                values[key] = value
            else:
                track = _parse_track(value, line_no)
        except ValueError as exc:
            if isinstance(exc, AnnotationParseError):
                raise
            raise AnnotationParseError(str(exc), line_no) from None
    return SceneAttributes(**values), track


def parse_annotation(text: str) -> AnnotationDoc:
    lines = text.splitlines()
    static_lines: list[tuple[int, str]] = []
    events: list[AnnotationEvent] = []
    current: tuple[int, float, tuple[str, ...]] | None = None
    body: list[str] = []

    def close_event():
        if current is None:
            return
        line_no, time_s, codes = current
        while body and not body[-1].strip():
            body.pop()
        if events and time_s <= events[-1].time_s:
            raise AnnotationParseError(
                f"event at {format_timestamp(time_s)} is not after the previous event", line_no
            )
        try:
            events.append(AnnotationEvent(time_s, codes, "\n".join(body)))
        except ValueError as exc:
            raise AnnotationParseError(str(exc), line_no) from None

    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip()
        stripped = line.strip()
        header = _HEADER_RE.match(stripped)
        if header is None and _HEADER_LOOSE_RE.match(stripped):
            raise AnnotationParseError(f"malformed event header {stripped!r}", line_no)
        if header:
            close_event()
            try:
                time_s = parse_timestamp(header.group(1))
            except ValueError as exc:
                raise AnnotationParseError(str(exc), line_no) from None
            codes = tuple(c.strip() for c in header.group(2).split(","))
            unknown = [c for c in codes if c not in EVENT_CODES]
            if unknown:
                raise AnnotationParseError(f"unknown event code {unknown[0]!r}", line_no)
            current = (line_no, time_s, codes)
            body = []
        elif current is None:
            if stripped:
                static_lines.append((line_no, stripped))
        else:
            if stripped or body:
                body.append(stripped)
    close_event()

    static, track = _parse_static(static_lines)
    try:
        return AnnotationDoc(static=static, events=tuple(events), danger_track=track)
    except ValueError as exc:
        raise AnnotationParseError(str(exc)) from None


def serialize_annotation(doc: AnnotationDoc) -> str:
    s = doc.static
    out = [
        f"weather: {s.weather.value}",
        f"location: {s.location.value}",
        f"traffic_flow: {s.traffic_flow.value}",
        f"danger: {s.danger.label}",
        f"scene_description: {s.scene_description}".rstrip(),
        "danger_track: " + ", ".join(f"{format_timestamp(t)}={lvl.label}" for t, lvl in doc.danger_track),
    ]
    for event in doc.events:
        out.append("")
        out.append(f"<{format_timestamp(event.time_s)}-{','.join(event.codes)}>")
        if event.body:
            out.append(event.body)
    return "\n".join(out) + "\n"


def load_detections(path) -> dict[int, DetectionSet]:
    """Read newline-delimited detection records grouped by frame index."""
    grouped: dict[int, list[Detection]] = {}
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                frame_index = int(record["frame_index"])
                bbox = record["bbox"]
                if len(bbox) != 4:
                    raise ValueError("bbox needs 4 numbers")
                det = Detection(str(record["label"]), tuple(float(v) for v in bbox), float(record["score"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DetectionFileError(f"{path}:{line_no}: {exc}") from None
            grouped.setdefault(frame_index, []).append(det)
    return {idx: DetectionSet(idx, tuple(dets)) for idx, dets in sorted(grouped.items())}


def build_tap_samples(doc: AnnotationDoc, frame_count: int, n: int, stride: int = 1, fps: float = 2.0) -> list[TapSample]:
    """Cut an annotated stream into (N history frames, N history states, current state) samples.

    Frame ``i`` sits at ``i / fps`` seconds; history states are read from the
    annotation's danger track (teacher forcing).
    """
    if n < 1 or stride < 1 or fps <= 0:
        raise ValueError("need n >= 1, stride >= 1 and fps > 0")
    if frame_count <= n:
        raise ValueError(f"frame_count={frame_count} leaves no sample for n={n}")
    samples = []
    for i in range(n, frame_count, stride):
        history = range(i - n, i)
        samples.append(
            TapSample(
                frame_indices=tuple(history),
                history_states=tuple(doc.danger_at(j / fps) for j in history),
                gt_state=doc.danger_at(i / fps),
            )
        )
    return samples


def load_tap_samples(path) -> list[TapSample]:
    samples = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(TapSample.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
    return samples


def save_tap_samples(samples, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
