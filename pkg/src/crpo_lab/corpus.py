"""Dialogue corpus loading, descriptive statistics and PII scrubbing."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import ConsultationQuery, Speaker, Turn, ImageRef
from .errors import EmptyCorpus, SchemaError

logger = logging.getLogger(__name__)

TURN_BINS: tuple[tuple[str, int, int | None], ...] = (
    ("1-5", 1, 5),
    ("6-10", 6, 10),
    ("11-15", 11, 15),
    ("16-20", 16, 20),
    (">20", 21, None),
)
KNOWN_MODALITIES = ("Ultrasound", "Medical Records", "CT/MRI", "Pathology", "Endoscopy")
OTHER = "Other"

# Only 6-10 (40.9%) and >20 (6%) are reference figures; the other three bins are
# filled in so the whole distribution sums to one.
REFERENCE_TURN_PROPORTIONS: Mapping[str, float] = {
    "1-5": 0.25,
    "6-10": 0.409,
    "11-15": 0.181,
    "16-20": 0.10,
    ">20": 0.06,
}


@dataclass(frozen=True)
class LineError:
    line: int
    message: str


def load_corpus(path: str | Path) -> tuple[list[ConsultationQuery], list[LineError]]:
    """Parse a JSONL dialogue file; bad lines are reported, not dropped silently."""
    queries: list[ConsultationQuery] = []
    errors: list[LineError] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                queries.append(ConsultationQuery.from_dict(json.loads(line)))
            except (json.JSONDecodeError, SchemaError, KeyError, TypeError, ValueError) as exc:
                errors.append(LineError(lineno, f"{type(exc).__name__}: {exc}"))
    if errors:
        logger.warning("%d malformed lines in %s", len(errors), path)
    return queries, errors


def save_corpus(queries: Iterable[ConsultationQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            fh.write(json.dumps(q.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class Histogram:
    counts: Mapping[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[str, float]:
        n = self.total
        return {k: (v / n if n else 0.0) for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "fractions": self.fractions, "total": self.total}


@dataclass(frozen=True)
class CorpusStats:
    n_dialogues: int
    turns: Histogram
    departments: Histogram
    modalities: Histogram

    def to_dict(self) -> dict:
        return {
            "n_dialogues": self.n_dialogues,
            "turns": self.turns.to_dict(),
            "departments": self.departments.to_dict(),
            "modalities": self.modalities.to_dict(),
        }


def turn_bin(n_turns: int) -> str:
    for label, lo, hi in TURN_BINS:
        if n_turns >= lo and (hi is None or n_turns <= hi):
            return label
    raise ValueError(f"turn count must be >= 1, got {n_turns}")


def _modality_bucket(tag: str | None) -> str:
    if not tag:
        return OTHER
    for known in KNOWN_MODALITIES:
        if tag.strip().lower() == known.lower():
            return known
    return OTHER


def corpus_stats(corpus: Sequence[ConsultationQuery]) -> CorpusStats:
    if not corpus:
        raise EmptyCorpus("corpus is empty")
    turns = Counter({label: 0 for label, _, _ in TURN_BINS})
    departments: Counter[str] = Counter()
    modalities: Counter[str] = Counter()
    for q in corpus:
        turns[turn_bin(len(q.turns))] += 1
        departments[q.metadata.get("department") or "Unknown"] += 1
        for turn in q.turns:
            for ref in turn.image_refs:
                modalities[_modality_bucket(ref.modality)] += 1
    return CorpusStats(
        n_dialogues=len(corpus),
        turns=Histogram(dict(turns)),
        departments=Histogram(dict(sorted(departments.items()))),
        modalities=Histogram(dict(sorted(modalities.items()))),
    )


def render_bars(hist: Histogram, width: int = 40) -> str:
    lines = []
    label_w = max((len(k) for k in hist.counts), default=0)
    for key, frac in hist.fractions.items():
        bar = "#" * round(frac * width)
        lines.append(f"{key.ljust(label_w)} | {bar} {100 * frac:.1f}% ({hist.counts[key]})")
    return "\n".join(lines)


def synthetic_corpus(
    n: int,
    seed: int = 0,
    proportions: Mapping[str, float] = REFERENCE_TURN_PROPORTIONS,
    departments: Sequence[str] = ("Dermatology", "Gastroenterology", "Pediatrics", "Orthopedics"),
) -> list[ConsultationQuery]:
    """Dialogues whose turn counts are drawn bin-wise from ``proportions``."""
    rng = np.random.default_rng(seed)
    labels = [label for label, _, _ in TURN_BINS]
    p = np.array([proportions[label] for label in labels], dtype=float)
    bins = rng.choice(len(labels), size=n, p=p / p.sum())
    out = []
    for i, b in enumerate(bins):
        _, lo, hi = TURN_BINS[b]
        n_turns = int(rng.integers(lo, (hi if hi is not None else 40) + 1))
        # alternate speakers so the dialogue ends on a patient turn
        turns = tuple(
            Turn(
                Speaker.PATIENT if (n_turns - 1 - t) % 2 == 0 else Speaker.PHYSICIAN,
                f"turn {t}",
                (ImageRef(f"img://{i}/{t}", KNOWN_MODALITIES[int(rng.integers(len(KNOWN_MODALITIES)))]),)
                if t == 0
                else (),
            )
            for t in range(n_turns)
        )
        dept = departments[int(rng.integers(len(departments)))]
        out.append(ConsultationQuery(f"syn-{i:06d}", turns, {"department": dept}))
    return out


# ---------------------------------------------------------------------------
# PII scrubbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiiRule:
    id: str
    placeholder: str
    pattern: re.Pattern


@dataclass(frozen=True)
class Redaction:
    start: int
    end: int
    rule_id: str
    original_length: int


@lru_cache(maxsize=None)
def load_pii_rules(path: str | None = None) -> tuple[PiiRule, ...]:
    """Rules in priority order from a JSON file (the bundled set by default)."""
    if path is None:
        text = resources.files("crpo_lab").joinpath("data/pii_rules.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    rules = []
    for raw in json.loads(text)["rules"]:
        flags = re.IGNORECASE if "i" in raw.get("flags", "") else 0
        rules.append(PiiRule(raw["id"], raw["placeholder"], re.compile(raw["pattern"], flags)))
    return tuple(rules)


def _span(m: re.Match) -> tuple[int, int]:
    if "pii" in m.re.groupindex and m.group("pii") is not None:
        return m.span("pii")
    return m.span()


def _scrub_once(text: str, rules: Sequence[PiiRule]) -> tuple[str, list[Redaction]]:
    taken: list[tuple[int, int, PiiRule]] = []
    for rule in rules:
        for m in rule.pattern.finditer(text):
            start, end = _span(m)
            if end > start and all(end <= s or start >= e for s, e, _ in taken):
                taken.append((start, end, rule))
    taken.sort(key=lambda t: t[0])
    parts, log, pos = [], [], 0
    for start, end, rule in taken:
        parts.append(text[pos:start])
        parts.append(rule.placeholder)
        log.append(Redaction(start, end, rule.id, end - start))
        pos = end
    parts.append(text[pos:])
    return "".join(parts), log


def scrub_pii(text: str, rules: Sequence[PiiRule] | None = None) -> tuple[str, list[Redaction]]:
    """Replace PII shapes with typed placeholders.

    Higher-priority rules claim spans first. Passes repeat until no rule
    matches, so the result is a fixpoint; log spans refer to the text of
    the pass that made them (the original text for the first pass).
    """
    rules = load_pii_rules() if rules is None else rules
    log: list[Redaction] = []
    for _ in range(8):
        text, found = _scrub_once(text, rules)
        if not found:
            break
        log.extend(found)
    return text, log


def scrub_query(query: ConsultationQuery) -> ConsultationQuery:
    turns = tuple(
        Turn(t.speaker, scrub_pii(t.text)[0], t.image_refs) for t in query.turns
    )
    return ConsultationQuery(query.id, turns, query.metadata)
