"""Pairwise judge harness with A/B order swapping."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

from ..hplanner.backends import FATAL_ERRORS, BackendError
from ..hplanner.prompts import PromptRequest, fill_template, load_template

log = logging.getLogger(__name__)


class Verdict(enum.Enum):
    A = "A"
    B = "B"
    INVALID = "Invalid"


def judge_pair(gt: str, answer_a: str, answer_b: str, max_tokens: int = 512) -> PromptRequest:
    for name, text in (("gt", gt), ("answer_a", answer_a), ("answer_b", answer_b)):
        if not text or not text.strip():
            raise ValueError(f"{name} must be non-empty")
    text = fill_template(load_template("judge"), gt=gt, answer_a=answer_a, answer_b=answer_b)
    return PromptRequest("", text, (), max_tokens)


def parse_verdict(reply: str) -> Verdict:
    has_a, has_b = "[[A]]" in reply, "[[B]]" in reply
    if has_a and not has_b:
        return Verdict.A
    if has_b and not has_a:
        return Verdict.B
    return Verdict.INVALID


@dataclass(frozen=True)
class JudgeSample:
    gt: str
    a: str
    b: str


def _ask(backend, req, timeout_ms) -> Verdict:
    try:
        return parse_verdict(backend.complete(req, timeout_ms))
    except FATAL_ERRORS:
        raise
    except BackendError as exc:
        log.warning("judge call failed: %s", exc)
        return Verdict.INVALID


def gpt_score(samples, backend, timeout_ms: int | None = None) -> dict:
    """Judge each sample as (a, b) and again as (b, a); wins are counted per system.

    Returns win rates over the comparisons that produced a valid verdict,
    or None for both when there were none.
    """
    samples = [s if isinstance(s, JudgeSample) else JudgeSample(*s) for s in samples]
    if not samples:
        raise ValueError("gpt_score needs at least one sample")
    wins_a = wins_b = invalid = 0
    rows = []
    for s in samples:
        first = _ask(backend, judge_pair(s.gt, s.a, s.b), timeout_ms)
        second = _ask(backend, judge_pair(s.gt, s.b, s.a), timeout_ms)
        # in the swapped call system b sits in slot A
        outcomes = [
            {Verdict.A: "a", Verdict.B: "b"}.get(first),
            {Verdict.A: "b", Verdict.B: "a"}.get(second),
        ]
        for o in outcomes:
            if o == "a":
                wins_a += 1
            elif o == "b":
                wins_b += 1
            else:
                invalid += 1
        rows.append({"first": first.value, "swapped": second.value})
    counted = wins_a + wins_b
    return {
        "win_rate_a": wins_a / counted if counted else None,
        "win_rate_b": wins_b / counted if counted else None,
        "invalid_count": invalid,
        "comparisons": 2 * len(samples),
        "samples": rows,
    }
