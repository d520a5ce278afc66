"""Prompt builders and the structured five-field reply parser."""

from __future__ import annotations

import hashlib
import io
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from ..domain import Frame, TriggerState

WALK_FIELDS = (
    "1. Location",
    "2. Weather conditions",
    "3. Traffic flow rating",
    "4. Describe the overall scene in the image",
    "5. Instructions on how I should proceed",
)
FIELD_ATTRS = ("location", "weather", "traffic", "scene", "instruction")

DEFAULT_MAX_TOKENS = 512


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files(__package__).joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class EncodedImage:
    """A PNG-encoded frame plus a digest of its raw pixels (stable across PNG encoders)."""

    png: bytes
    digest: str

    @classmethod
    def from_frame(cls, frame: Frame) -> "EncodedImage":
        from PIL import Image

        pixels = np.ascontiguousarray(frame.pixels, dtype=np.uint8)
        h, w = pixels.shape[:2]
        digest = hashlib.sha256(f"{w}x{h}:".encode() + pixels.tobytes()).hexdigest()
        buf = io.BytesIO()
        Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
        return cls(buf.getvalue(), digest)


@dataclass(frozen=True)
class PromptRequest:
    system_text: str
    user_text: str
    images: tuple[EncodedImage, ...] = ()
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0

    def __post_init__(self):
        if not self.user_text.strip():
            raise ValueError("user_text must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def image_digests(self) -> tuple[str, ...]:
        return tuple(im.digest for im in self.images)


@dataclass(frozen=True)
class HierarchicalResponse:
    location: str
    weather: str
    traffic: str
    scene: str
    instruction: str

    def __post_init__(self):
        empty = [WALK_FIELDS[i] for i, a in enumerate(FIELD_ATTRS) if not getattr(self, a).strip()]
        if empty:
            raise StructuredResponseError(empty)

    def as_dict(self) -> dict[str, str]:
        return {k: getattr(self, a) for k, a in zip(WALK_FIELDS, FIELD_ATTRS)}


class StructuredResponseError(ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("reply is missing fields: " + ", ".join(repr(m) for m in self.missing))


def _encode(frames) -> tuple[EncodedImage, ...]:
    return tuple(f if isinstance(f, EncodedImage) else EncodedImage.from_frame(f) for f in frames or ())


def fill_template(template: str, **values: str) -> str:
    # plain replacement: templates contain literal JSON braces
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


def build_walk_prompt(frames, priors_fragment: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> PromptRequest:
    text = fill_template(load_template("walk"), json_str=priors_fragment)
    return PromptRequest("", text, _encode(frames), max_tokens)


QA_SUFFIX = "\nQuestion: {question}\nAnswer the question directly and concisely in one or two sentences, without the format above.\n"


def build_qa_prompt(frames, priors_fragment: str, question: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> PromptRequest:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    walk = fill_template(load_template("walk"), json_str=priors_fragment)
    text = walk + fill_template(QA_SUFFIX, question=question.strip())
    return PromptRequest("", text, _encode(frames), max_tokens)


def build_danger_prompt(history_states, frames, max_tokens: int = DEFAULT_MAX_TOKENS) -> PromptRequest:
    states = [TriggerState.parse(s) if not isinstance(s, TriggerState) else s for s in history_states]
    if len(states) != 2:
        raise ValueError(f"the danger prompt takes exactly 2 history states, got {len(states)}")
    text = fill_template(
        load_template("danger"),
        **{"history_states[0]": states[0].letter, "history_states[1]": states[1].letter},
    )
    return PromptRequest("", text, _encode(frames), max_tokens)


def build_normalization_prompt(annotated_text: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> PromptRequest:
    if not annotated_text or not annotated_text.strip():
        raise ValueError("annotated text must be non-empty")
    return PromptRequest("", fill_template(load_template("normalize"), text=annotated_text), (), max_tokens)


# Multi-turn variant: perception fields first, then a decision turn that sees them.

PERCEPTION_SUFFIX = "\nFor this turn answer only fields 1 to 4 and leave field 5 as an empty string.\n"
DECISION_TEMPLATE = (
    "Earlier you described the scene as follows:\n{perception}\n"
    "Using that description and the input images, answer field 5 only, "
    'as json {{"data": {{"5. Instructions on how I should proceed": "string"}}}} without code block.\n'
)


def build_perception_prompt(frames, priors_fragment: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> PromptRequest:
    base = build_walk_prompt(frames, priors_fragment, max_tokens)
    return PromptRequest(base.system_text, base.user_text + PERCEPTION_SUFFIX, base.images, max_tokens)


def build_decision_prompt(frames, perception: dict[str, str], max_tokens: int = DEFAULT_MAX_TOKENS) -> PromptRequest:
    desc = json.dumps({k: perception[k] for k in WALK_FIELDS[:4] if k in perception}, ensure_ascii=False)
    return PromptRequest("", DECISION_TEMPLATE.format(perception=desc), _encode(frames), max_tokens)


# ---- reply parsing ----

_FENCE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.S)


def _norm_key(key: str) -> str:
    return re.sub(r"\s+", " ", key.strip().strip('"').strip()).lower()


_KEY_INDEX = {_norm_key(k): i for i, k in enumerate(WALK_FIELDS)}


def _json_objects(text: str):
    """Yield every JSON object that can be decoded starting at some '{'."""
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            yield obj


def _fields_from_obj(obj: dict) -> dict[int, str]:
    data = obj.get("data", obj)
    if not isinstance(data, dict):
        return {}
    found = {}
    for key, value in data.items():
        idx = _KEY_INDEX.get(_norm_key(str(key)))
        if idx is not None and value is not None:
            found[idx] = str(value).strip()
    return found


_LINE = re.compile(r'^\s*"?\s*([1-5])\.\s*([^:"]*?)"?\s*:\s*(.*?)\s*,?\s*$')


def _fields_from_lines(text: str) -> dict[int, str]:
    found = {}
    for line in text.splitlines():
        m = _LINE.match(line)
        if not m:
            continue
        idx = int(m.group(1)) - 1
        value = m.group(3).strip()
        if len(value) >= 2 and value[0] == value[-1] == '"':
            value = value[1:-1]
        if value:
            found[idx] = value.strip()
    return found


def parse_fields(text: str) -> dict[int, str]:
    """Best-effort field extraction; keys are 0-based field positions."""
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    best: dict[int, str] = {}
    for chunk in candidates:
        for obj in _json_objects(chunk):
            found = {i: v for i, v in _fields_from_obj(obj).items() if v}
            if len(found) > len(best):
                best = found
        if len(best) == len(WALK_FIELDS):
            return best
    if len(best) < len(WALK_FIELDS):
        lines = _fields_from_lines(text)
        if len(lines) > len(best):
            best = lines
    return best


def parse_structured_response(text: str) -> HierarchicalResponse:
    found = parse_fields(text)
    missing = [WALK_FIELDS[i] for i in range(len(WALK_FIELDS)) if i not in found]
    if missing:
        raise StructuredResponseError(missing)
    return HierarchicalResponse(*(found[i] for i in range(len(WALK_FIELDS))))


def render_structured_response(resp: HierarchicalResponse) -> str:
    return json.dumps({"data": resp.as_dict()}, ensure_ascii=False, indent=4)


FORMAT_REMINDER = (
    "\nYour previous reply could not be parsed. Reply with only the json object in the format given above, "
    "with all five fields filled in.\n"
)


def with_format_reminder(req: PromptRequest) -> PromptRequest:
    return PromptRequest(req.system_text, req.user_text + FORMAT_REMINDER, req.images, req.max_tokens, req.temperature)
