"""Benchmark protocol: pairwise win rates, MCQ scoring, open-ended judging,
and agreement between the automatic judge and expert reviewers."""

from __future__ import annotations

import csv
import enum
import math
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .core import (
    DIMENSIONS,
    OVERALL,
    ConsultationQuery,
    Dimension,
    EvalReport,
    Judgment,
    Mode,
    RateCell,
    Response,
    Verdict,
)
from .errors import (
    DanglingLabel,
    EmptyJudgmentSet,
    MissingBaselineResponse,
    SchemaError,
)
from .judging import Judge, PairwiseTask, dispatch_judgments, jaccard


class ItemKind(enum.Enum):
    DIALOGUE = "dialogue"
    MCQ = "mcq"
    OPEN_ENDED = "open_ended"


@dataclass(frozen=True)
class MCQ:
    options: Mapping[str, str]
    gold: str

    def __post_init__(self) -> None:
        options = {k.strip().upper(): v for k, v in self.options.items()}
        gold = self.gold.strip().upper()
        if gold not in options:
            raise SchemaError(f"gold letter {gold!r} is not an option")
        object.__setattr__(self, "options", options)
        object.__setattr__(self, "gold", gold)


@dataclass(frozen=True)
class BenchmarkItem:
    query: ConsultationQuery
    subject_response: Response
    baseline_responses: Mapping[str, Response] = field(default_factory=dict)
    kind: ItemKind = ItemKind.DIALOGUE
    mcq: MCQ | None = None
    reference_answer: str | None = None

    def __post_init__(self) -> None:
        if self.kind is ItemKind.MCQ and self.mcq is None:
            raise SchemaError(f"MCQ item {self.id!r} has no options")
        if self.kind is ItemKind.OPEN_ENDED and self.reference_answer is None:
            raise SchemaError(f"open-ended item {self.id!r} has no reference answer")

    @property
    def id(self) -> str:
        return self.query.id

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "subject_response": self.subject_response.to_dict(),
            "baseline_responses": {k: r.to_dict() for k, r in sorted(self.baseline_responses.items())},
            "kind": self.kind.value,
            "mcq": {"options": dict(self.mcq.options), "gold": self.mcq.gold} if self.mcq else None,
            "reference_answer": self.reference_answer,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BenchmarkItem":
        mcq = raw.get("mcq")
        return cls(
            query=ConsultationQuery.from_dict(raw["query"]),
            subject_response=Response.from_dict(raw["subject_response"]),
            baseline_responses={
                k: Response.from_dict(v) for k, v in (raw.get("baseline_responses") or {}).items()
            },
            kind=ItemKind(raw.get("kind", ItemKind.DIALOGUE.value)),
            mcq=MCQ(mcq["options"], mcq["gold"]) if mcq else None,
            reference_answer=raw.get("reference_answer"),
        )


# ---------------------------------------------------------------------------
# Pairwise win rates
# ---------------------------------------------------------------------------


def evaluate_pairwise(
    items: Sequence[BenchmarkItem],
    judge: Judge,
    baselines: Sequence[str],
    max_in_flight: int = 4,
) -> list[Judgment | Exception]:
    """One pairwise judgment per (item, baseline), item-major order."""
    tasks = []
    for item in items:
        for name in baselines:
            if name not in item.baseline_responses:
                raise MissingBaselineResponse(f"item {item.id!r} has no response from {name!r}")
            tasks.append(PairwiseTask(item.subject_response, item.baseline_responses[name], item.query))
    return dispatch_judgments(tasks, judge, max_in_flight)


def overall_verdict(judgment: Judgment) -> Verdict:
    """The judge's own overall verdict, else the plurality of dimension verdicts.

    A tie for the most frequent verdict resolves to Tie.
    """
    if judgment.overall is not None:
        return judgment.overall
    counts = Counter(judgment.verdicts()).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return Verdict.TIE
    return counts[0][0]


def compute_win_rate(judgments: Iterable[Judgment], errors: Sequence[str] = ()) -> EvalReport:
    judgments = list(judgments)
    if not judgments:
        raise EmptyJudgmentSet("no judgments to aggregate")
    cells: dict[str, dict[str, RateCell]] = {}
    for j in judgments:
        if j.mode is not Mode.PAIRWISE:
            raise SchemaError(f"win rates need pairwise judgments, got {j.mode.value}")
        row = cells.setdefault(j.reference, {key: RateCell() for key in _cell_keys()})
        for dim, verdict in j.per_dimension.items():
            row[dim.value] = row[dim.value].add(verdict)
        row[OVERALL] = row[OVERALL].add(overall_verdict(j))
    aggregate = math.fsum(cells[name][OVERALL].win_rate for name in sorted(cells)) / len(cells)
    return EvalReport(per_baseline=cells, aggregate_win_rate=aggregate, errors=tuple(errors))


def _cell_keys() -> list[str]:
    return [dim.value for dim in DIMENSIONS] + [OVERALL]


def combine_subset_reports(reports: Sequence[EvalReport]) -> float:
    """Equal-weight mean of per-subset aggregate win rates."""
    if not reports:
        raise EmptyJudgmentSet("no subset reports")
    return math.fsum(r.aggregate_win_rate for r in reports) / len(reports)


def render_table(report: EvalReport) -> str:
    """Baseline x dimension grid of ``win/tie/loss`` percentages."""
    keys = _cell_keys()
    header = ["baseline"] + keys
    rows = [header]
    for name in sorted(report.per_baseline):
        row = report.per_baseline[name]
        rows.append(
            [name]
            + [
                f"{100 * row[k].win_rate:.1f}/{100 * row[k].tie_rate:.1f}/{100 * row[k].loss_rate:.1f}"
                for k in keys
            ]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    lines.append(f"aggregate win rate: {100 * report.aggregate_win_rate:.1f}%  (cells: win/tie/loss %)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Multiple choice
# ---------------------------------------------------------------------------

_END = r"(?=\s*(?:$|[.,;:!?)\]]))"


def _stage1_patterns(letters: str) -> list[tuple[str, re.Pattern]]:
    cls = f"[{letters}]"
    return [
        ("answer_is", re.compile(rf"\banswer\s*(?:is|:)\s*:?\s*\(?({cls})\)?{_END}", re.I)),
        ("option", re.compile(rf"\b(?:option|choice)\s*\(?({cls})\)?{_END}", re.I)),
        ("parenthesized", re.compile(rf"\(({cls})\)", re.I)),
        ("standalone", re.compile(rf"^\W*({cls})\W*$", re.I)),
    ]


def extract_option_letter(text: str, letters: str) -> tuple[str, str] | None:
    """First rule-pattern hit as ``(letter, rule name)``, patterns in priority order."""
    for name, pattern in _stage1_patterns(letters):
        m = pattern.search(text)
        if m:
            return m.group(1).upper(), name
    return None


@dataclass(frozen=True)
class MCQTrace:
    item_id: str
    stage: int | None
    selected: str | None
    correct: bool
    reason: str


@dataclass(frozen=True)
class MCQResult:
    accuracy: float
    traces: tuple[MCQTrace, ...]


def score_mcq_item(
    item_id: str, text: str, mcq: MCQ, similarity_fn: Callable[[str, str], float] = jaccard
) -> MCQTrace:
    letters = "".join(sorted(mcq.options))
    hit = extract_option_letter(text, letters)
    if hit is not None:
        letter, rule = hit
        return MCQTrace(item_id, 1, letter, letter == mcq.gold, f"rule:{rule}")
    scores = {letter: similarity_fn(text, opt) for letter, opt in sorted(mcq.options.items())}
    best = max(scores.values())
    if best <= 0.0:
        return MCQTrace(item_id, None, None, False, "no rule match and zero similarity")
    # ties go to the earliest letter
    letter = next(k for k, v in scores.items() if v == best)
    return MCQTrace(item_id, 2, letter, letter == mcq.gold, f"similarity:{best:.4f}")


def score_mcq(
    items: Sequence[BenchmarkItem], similarity_fn: Callable[[str, str], float] = jaccard
) -> MCQResult:
    """Rule-based letter extraction, falling back to the most similar option."""
    traces = tuple(
        score_mcq_item(item.id, item.subject_response.text, item.mcq, similarity_fn)
        for item in items
    )
    accuracy = sum(t.correct for t in traces) / len(traces) if traces else 0.0
    return MCQResult(accuracy, traces)


# ---------------------------------------------------------------------------
# Open-ended
# ---------------------------------------------------------------------------


class Consistency(enum.Enum):
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"


def judge_open_ended(
    items: Sequence[BenchmarkItem], judge: Judge, max_in_flight: int = 4
) -> list[Consistency | Exception]:
    """One consistency call per item; failures stay in their own slot."""
    def run(item: BenchmarkItem) -> Consistency | Exception:
        try:
            ok = judge.consistency(item.subject_response, item.reference_answer, item.query)
        except Exception as exc:  # noqa: BLE001 - isolated per item
            return exc
        return Consistency.CONSISTENT if ok else Consistency.INCONSISTENT

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        return list(pool.map(run, items))


# ---------------------------------------------------------------------------
# Expert agreement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HumanLabel:
    item_id: str
    baseline: str
    dimension: Dimension | None  # None means the overall verdict
    agree: bool

    @property
    def key(self) -> str:
        return self.dimension.value if self.dimension is not None else OVERALL


def load_human_labels(path: str | Path) -> list[HumanLabel]:
    """Read ``item_id,baseline,dimension,verdict`` rows (verdict agree/disagree)."""
    labels = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            dim = row["dimension"].strip()
            verdict = row["verdict"].strip().lower()
            if verdict not in ("agree", "disagree"):
                raise SchemaError(f"bad expert verdict {row['verdict']!r}")
            labels.append(
                HumanLabel(
                    row["item_id"],
                    row["baseline"],
                    None if dim.lower() in (OVERALL, "overall") else Dimension.parse(dim),
                    verdict == "agree",
                )
            )
    return labels


def compute_consistency_rate(
    judgments: Iterable[Judgment], labels: Iterable[HumanLabel]
) -> dict[str, float]:
    """Agree fraction per dimension (and ``"all"``); keys without labels are absent."""
    known = {(j.query_id, j.reference) for j in judgments}
    agree: Counter[str] = Counter()
    total: Counter[str] = Counter()
    for label in labels:
        if (label.item_id, label.baseline) not in known:
            raise DanglingLabel(f"no judgment for item {label.item_id!r} vs {label.baseline!r}")
        total[label.key] += 1
        agree[label.key] += label.agree
    order = _cell_keys()
    return {key: agree[key] / total[key] for key in order if total[key]}


def sample_for_review(judgments: Sequence[Judgment], fraction: float, seed: int) -> list[str]:
    """``floor(fraction * N)`` judgment ids drawn without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if not judgments:
        raise EmptyJudgmentSet("nothing to sample")
    ids = sorted(j.id for j in judgments)
    k = math.floor(fraction * len(ids) + 1e-9)
    return random.Random(seed).sample(ids, k)
