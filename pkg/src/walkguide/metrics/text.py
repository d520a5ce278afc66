"""ROUGE-1/2/L and TF-IDF cosine similarity over a shared tokenizer."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

_NON_ALNUM = re.compile(r"[\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, turn every non letter/digit character into a space, split."""
    return _NON_ALNUM.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class PrfScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, p: float, r: float) -> "PrfScore":
        return cls(p, r, 0.0 if p + r == 0 else 2 * p * r / (p + r))

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class EvalPair:
    id: str
    reference: str
    candidate: str

    def __post_init__(self):
        if not self.reference.strip():
            raise ValueError(f"pair {self.id!r}: reference must be non-empty")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def rouge_n(reference: str, candidate: str, n: int = 1) -> PrfScore:
    if n not in (1, 2):
        raise ValueError("rouge_n supports n = 1 or 2")
    ref = _ngrams(tokenize(reference), n)
    cand = _ngrams(tokenize(candidate), n)
    overlap = sum((ref & cand).values())
    return PrfScore.from_pr(_ratio(overlap, sum(cand.values())), _ratio(overlap, sum(ref.values())))


def lcs_length(a: list, b: list) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(reference: str, candidate: str) -> PrfScore:
    ref, cand = tokenize(reference), tokenize(candidate)
    lcs = lcs_length(ref, cand)
    return PrfScore.from_pr(_ratio(lcs, len(cand)), _ratio(lcs, len(ref)))


def idf_table(docs: list[list[str]]) -> dict[str, float]:
    n = len(docs)
    df = Counter(t for d in docs for t in set(d))
    return {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}


def tfidf_vector(tokens: list[str], idf: dict[str, float]) -> dict[str, float]:
    vec = {t: c * idf[t] for t, c in Counter(tokens).items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return {t: v / norm for t, v in vec.items()} if norm > 0 else {}


def cosine(u: dict[str, float], v: dict[str, float]) -> float:
    if len(u) > len(v):
        u, v = v, u
    return sum(w * v.get(t, 0.0) for t, w in u.items())


def tfidf_similarity(pairs: list[EvalPair]) -> dict[str, float]:
    """Cosine of L2-normalized TF-IDF vectors; the corpus is every reference and candidate in the batch."""
    if not pairs:
        raise ValueError("tfidf_similarity needs at least one pair")
    refs = [tokenize(p.reference) for p in pairs]
    cands = [tokenize(p.candidate) for p in pairs]
    idf = idf_table(refs + cands)
    out = {}
    for p, r, c in zip(pairs, refs, cands):
        # clamp round-off so identical texts score exactly within [0, 1]
        out[p.id] = min(1.0, max(0.0, cosine(tfidf_vector(r, idf), tfidf_vector(c, idf))))
    return out


def evaluate_pairs(pairs: list[EvalPair]) -> dict:
    """Per-pair and mean ROUGE-1/2/L F1 and TF-IDF scores."""
    tfidf = tfidf_similarity(pairs)
    rows = []
    for p in pairs:
        rows.append({
            "id": p.id,
            "rouge1": rouge_n(p.reference, p.candidate, 1).as_dict(),
            "rouge2": rouge_n(p.reference, p.candidate, 2).as_dict(),
            "rougeL": rouge_l(p.reference, p.candidate).as_dict(),
            "tfidf": tfidf[p.id],
        })
    n = len(rows)
    aggregate = {
        "rouge1": sum(r["rouge1"]["f1"] for r in rows) / n,
        "rouge2": sum(r["rouge2"]["f1"] for r in rows) / n,
        "rougeL": sum(r["rougeL"]["f1"] for r in rows) / n,
        "tfidf": sum(r["tfidf"] for r in rows) / n,
        "pairs": n,
    }
    return {"aggregate": aggregate, "pairs": rows}
