"""The streaming loop: TAP gating, VLM reminders, deduplication, QA and the event log."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, TextIO

import numpy as np

from .annotation import DetectionFileError, load_detections
from .domain import DetectionSet, Frame, TriggerState, infer_qa_kind, infer_reminder_kinds
from .hplanner.backends import FATAL_ERRORS, BackendDescriptor, BackendError, make_backend
from .hplanner.prompts import (
    WALK_FIELDS,
    EncodedImage,
    HierarchicalResponse,
    StructuredResponseError,
    build_decision_prompt,
    build_perception_prompt,
    build_qa_prompt,
    build_walk_prompt,
    parse_fields,
    with_format_reminder,
)
from .polm import PolmConfig, build_fragment
from .tap.model import TapModel, preprocess_frame, stack_frames, tap_forward
from .tap.policy import TriggerPolicy, decide_trigger
from .tap.store import model_digest, model_load

log = logging.getLogger(__name__)

LOG_FORMAT = "walkguide-events"
LOG_VERSION = 1

TAP_DECISION = "TapDecision"
REMINDER_EMITTED = "ReminderEmitted"
REMINDER_SUPPRESSED = "ReminderSuppressed"
QA_ANSWERED = "QaAnswered"
BACKEND_ERROR = "BackendError"
EVENT_KINDS = (TAP_DECISION, REMINDER_EMITTED, REMINDER_SUPPRESSED, QA_ANSWERED, BACKEND_ERROR)


class StreamInputError(ValueError):
    pass


class FrameOrderError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    fps: float = 2.0
    n_history: int = 3
    polm: PolmConfig = field(default_factory=PolmConfig)
    policy: TriggerPolicy = field(default_factory=TriggerPolicy)
    backend: BackendDescriptor = field(default_factory=BackendDescriptor)
    cooldown_dedup_ms: int = 8000
    vlm_timeout_ms: int = 10000
    multi_turn: bool = False
    max_parse_retries: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.n_history < 1:
            raise ValueError("n_history must be at least 1")
        if self.cooldown_dedup_ms < 0 or self.vlm_timeout_ms <= 0:
            raise ValueError("cooldown_dedup_ms must be >= 0 and vlm_timeout_ms > 0")
        if self.max_parse_retries < 0:
            raise ValueError("max_parse_retries must be >= 0")

    def to_dict(self) -> dict:
        p = self.policy
        return {
            "fps": self.fps,
            "n_history": self.n_history,
            "polm": {
                "min_score": self.polm.min_score,
                "min_area": self.polm.min_area,
                "top_k": self.polm.top_k,
                "horizontal_fov_deg": self.polm.horizontal_fov_deg,
                "reference_height": self.polm.reference_height,
                "approximate": self.polm.approximate,
            },
            "policy": {
                "threshold_high": p.threshold_high,
                "cooldown_high_ms": p.cooldown_high_ms,
                "cooldown_mid_ms": p.cooldown_mid_ms,
            },
            "backend": self.backend.to_dict(),
            "cooldown_dedup_ms": self.cooldown_dedup_ms,
            "vlm_timeout_ms": self.vlm_timeout_ms,
            "multi_turn": self.multi_turn,
            "max_parse_retries": self.max_parse_retries,
            "seed": self.seed,
        }

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EngineEvent:
    timestamp_ms: int
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"t": self.timestamp_ms, "kind": self.kind, "payload": self.payload}, sort_keys=True, ensure_ascii=False)


@dataclass
class EventLog:
    header: dict
    events: list[EngineEvent] = field(default_factory=list)

    def header_line(self) -> str:
        return json.dumps(self.header, sort_keys=True)

    def lines(self) -> list[str]:
        return [self.header_line()] + [e.to_json() for e in self.events]

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def of_kind(self, kind: str) -> list[EngineEvent]:
        return [e for e in self.events if e.kind == kind]

    @classmethod
    def loads(cls, text: str) -> "EventLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty event log")
        header = json.loads(lines[0])
        events = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            events.append(EngineEvent(rec["t"], rec["kind"], rec["payload"]))
        return cls(header, events)


def _probs_payload(probs) -> list[float]:
    return [float(p) for p in np.asarray(probs, dtype=float)]


class Engine:
    """Single owner of all mutable stream state.

    Backend calls are serialized by a lock, so a question asked from
    another thread waits for an in-flight reminder call to finish.
    """

    def __init__(self, cfg: EngineConfig, tap_model: TapModel, backend=None):
        if tap_model.config.n_history != cfg.n_history:
            raise ValueError(
                f"TAP model was built for n_history={tap_model.config.n_history}, engine uses {cfg.n_history}"
            )
        self.cfg = cfg
        self.model = tap_model
        self.backend = backend if backend is not None else make_backend(cfg.backend)
        self.policy = replace(cfg.policy, last_fire_ms={})
        n = cfg.n_history
        self.frames: deque[Frame] = deque(maxlen=n)
        self.tensors: deque[np.ndarray] = deque(maxlen=n)
        self.states: deque[TriggerState] = deque([TriggerState.LOW] * n, maxlen=n)
        self.latest_dets: DetectionSet | None = None
        self.last_emitted: dict[str, int] = {}
        self._images: dict[int, EncodedImage] = {}
        self._flight = threading.Lock()

    # ---- helpers ----

    @property
    def state_history(self) -> list[TriggerState]:
        return list(self.states)

    def _window_images(self) -> list[EncodedImage]:
        keep = {f.index for f in self.frames}
        self._images = {k: v for k, v in self._images.items() if k in keep}
        out = []
        for f in self.frames:
            if f.index not in self._images:
                self._images[f.index] = EncodedImage.from_frame(f)
            out.append(self._images[f.index])
        return out

    def _call(self, req) -> str:
        with self._flight:
            return self.backend.complete(req, self.cfg.vlm_timeout_ms)

    def _error_event(self, ts: int, where: str, exc: Exception) -> EngineEvent:
        log.warning("backend error during %s: %s", where, exc)
        payload = {"during": where, "error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, StructuredResponseError):
            payload["missing"] = exc.missing
        return EngineEvent(ts, BACKEND_ERROR, payload)

    def _structured(self, req, wanted: Iterable[int]) -> dict[int, str]:
        """Ask, parse, and re-ask with a format reminder up to max_parse_retries times."""
        wanted = list(wanted)
        attempt = req
        for i in range(self.cfg.max_parse_retries + 1):
            found = parse_fields(self._call(attempt))
            missing = [WALK_FIELDS[k] for k in wanted if k not in found]
            if not missing:
                return found
            if i < self.cfg.max_parse_retries:
                attempt = with_format_reminder(req)
        raise StructuredResponseError(missing)

    def _generate(self, images, fragment: str) -> HierarchicalResponse:
        if not self.cfg.multi_turn:
            found = self._structured(build_walk_prompt(images, fragment), range(5))
        else:
            found = self._structured(build_perception_prompt(images, fragment), range(4))
            perception = {WALK_FIELDS[k]: found[k] for k in range(4)}
            decision = self._structured(build_decision_prompt(images, perception), [4])
            found = {**found, 4: decision[4]}
        return HierarchicalResponse(*(found[k] for k in range(5)))

    # ---- public operations ----

    def push_frame(self, frame: Frame, dets: DetectionSet | None = None) -> list[EngineEvent]:
        if self.frames:
            prev = self.frames[-1]
            if frame.timestamp_ms <= prev.timestamp_ms or frame.index <= prev.index:
                raise FrameOrderError(
                    f"frame {frame.index} at {frame.timestamp_ms} ms arrived after frame {prev.index} at {prev.timestamp_ms} ms"
                )
        self.frames.append(frame)
        self.tensors.append(preprocess_frame(frame, self.model.config))
        self.latest_dets = dets
        if len(self.frames) < self.cfg.n_history:
            return []

        ts = frame.timestamp_ms
        prior_states = list(self.states)
        out = tap_forward(stack_frames(list(self.tensors)), prior_states, self.model)
        decision = decide_trigger(out.probs, ts, self.policy)
        self.states.append(decision.level)
        events = [
            EngineEvent(
                ts,
                TAP_DECISION,
                {
                    "frame_index": frame.index,
                    "probs": _probs_payload(out.probs),
                    "level": decision.level.letter,
                    "action": decision.action,
                    "history": [s.letter for s in prior_states],
                },
            )
        ]
        if decision.fired:
            events.append(self._remind(ts, decision.level))
        return events

    def _remind(self, ts: int, level: TriggerState) -> EngineEvent:
        fragment = build_fragment(self.latest_dets, self.cfg.polm)
        try:
            resp = self._generate(self._window_images(), fragment)
        except FATAL_ERRORS:
            raise
        except (BackendError, StructuredResponseError) as exc:
            return self._error_event(ts, "reminder", exc)
        text = resp.instruction.strip()
        last = self.last_emitted.get(text)
        if last is not None and ts - last < self.cfg.cooldown_dedup_ms:
            return EngineEvent(ts, REMINDER_SUPPRESSED, {"level": level.letter, "text": text, "reason": "duplicate", "previous_ms": last})
        self.last_emitted[text] = ts
        kinds = sorted(k.value for k in infer_reminder_kinds(text))
        return EngineEvent(
            ts,
            REMINDER_EMITTED,
            {"level": level.letter, "text": text, "kinds": kinds, "priors": fragment, "fields": resp.as_dict()},
        )

    def ask(self, question: str) -> EngineEvent:
        if not question or not question.strip():
            raise ValueError("question must be non-empty")
        if not self.frames:
            raise RuntimeError("no frames yet")
        question = question.strip()
        ts = self.frames[-1].timestamp_ms
        req = build_qa_prompt(self._window_images(), build_fragment(self.latest_dets, self.cfg.polm), question)
        try:
            answer = self._call(req).strip()
            if not answer:
                raise BackendError("empty answer")
        except FATAL_ERRORS:
            raise
        except BackendError as exc:
            return self._error_event(ts, "qa", exc)
        return EngineEvent(ts, QA_ANSWERED, {"question": question, "answer": answer, "qa_kind": infer_qa_kind(question).value})


def new_engine(cfg: EngineConfig, tap_model: TapModel, backend=None) -> Engine:
    return Engine(cfg, tap_model, backend)


# ---- batch driver ----

def load_frame_dir(frame_dir, fps: float) -> list[Frame]:
    """Frames from ``manifest.jsonl`` if present, else ``frame_*.png`` in name order at 1000/fps ms."""
    from PIL import Image

    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise StreamInputError(f"frame directory not found: {frame_dir}")
    manifest = frame_dir / "manifest.jsonl"
    entries = []
    if manifest.exists():
        with manifest.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    entries.append((int(rec["index"]), int(rec["timestamp_ms"]), str(rec["file"])))
                except (ValueError, KeyError, TypeError) as exc:
                    raise StreamInputError(f"{manifest}:{line_no}: bad manifest record ({exc})") from None
    else:
        for i, p in enumerate(sorted(frame_dir.glob("frame_*.png"))):
            entries.append((i, int(round(i * 1000.0 / fps)), p.name))
    if not entries:
        raise StreamInputError(f"no frames in {frame_dir}")
    frames = []
    for index, ts, name in entries:
        path = frame_dir / name
        try:
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, ValueError) as exc:
            raise StreamInputError(f"cannot read frame {path}: {exc}") from None
        frames.append(Frame(index, ts, pixels))
    return frames


def run_stream(
    cfg: EngineConfig,
    frame_dir,
    detections_path=None,
    tap_model=None,
    out_path=None,
    interactive: bool = False,
    backend=None,
    stdin: TextIO | None = None,
) -> EventLog:
    """Replay a frame directory through a fresh engine and write the NDJSON event log."""
    if isinstance(tap_model, (str, Path)):
        try:
            tap_model = model_load(tap_model)
        except (OSError, ValueError) as exc:
            raise StreamInputError(f"cannot load TAP model {tap_model}: {exc}") from None
    if tap_model is None:
        raise StreamInputError("a TAP model is required")
    frames = load_frame_dir(frame_dir, cfg.fps)
    dets = {}
    if detections_path is not None:
        try:
            dets = load_detections(detections_path)
        except OSError as exc:
            raise StreamInputError(f"cannot read detections {detections_path}: {exc}") from None
        except DetectionFileError as exc:
            raise StreamInputError(str(exc)) from None

    engine = Engine(cfg, tap_model, backend)
    evlog = EventLog({
        "format": LOG_FORMAT,
        "format_version": LOG_VERSION,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "model_digest": model_digest(tap_model),
    })
    stdin = stdin if stdin is not None else sys.stdin
    out = open(out_path, "w", encoding="utf-8") if out_path is not None else None
    try:
        if out:
            out.write(evlog.header_line() + "\n")

        def emit(events):
            for e in events:
                evlog.events.append(e)
                if out:
                    out.write(e.to_json() + "\n")
                    out.flush()

        reading = interactive
        for frame in frames:
            emit(engine.push_frame(frame, dets.get(frame.index)))
            if not reading:
                continue
            line = stdin.readline()
            if not line:
                reading = False
                continue
            question = line.strip()
            if question == ":quit":
                break
            if question:
                emit([engine.ask(question)])
    finally:
        if out:
            out.close()
    return evlog
