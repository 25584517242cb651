"""Comparison-based rewards, the absolute-score baseline, and separability.

A candidate's comparison reward is the fraction of (counterpart, dimension)
cells it strictly wins; ties earn ``tie_credit`` (0 by default).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import (
    D,
    DIMENSIONS,
    CandidateSet,
    ComparisonMatrix,
    ConsultationQuery,
    Counterpart,
    CounterpartRoster,
    Judgment,
    Response,
    RewardVector,
    Verdict,
)
from .errors import MissingCounterpartResponse, UnresolvedInvalidCells
from .judging import Judge, PairwiseTask, SimJudge, SimJudgeConfig, dispatch_judgments

logger = logging.getLogger(__name__)

TIE_CREDITS = (0.0, 0.5)


class RewardMode(enum.Enum):
    CRPO = "crpo"
    ABSOLUTE = "absolute"


def _counterpart_response(
    roster: CounterpartRoster,
    c: int,
    query_id: str,
    counterpart_responses: Mapping[tuple[int, str], Response] | None,
) -> Response:
    if counterpart_responses is not None:
        resp = counterpart_responses.get((c, query_id))
    else:
        resp = roster.counterparts[c].respond(query_id)
    if resp is None:
        raise MissingCounterpartResponse(
            f"no response from counterpart {roster.counterparts[c].name!r} for {query_id!r}"
        )
    return resp


def build_comparison_matrix(
    candidates: CandidateSet,
    roster: CounterpartRoster,
    judge: Judge,
    counterpart_responses: Mapping[tuple[int, str], Response] | None = None,
    query: ConsultationQuery | None = None,
    max_in_flight: int = 1,
) -> ComparisonMatrix:
    """Judge every candidate against every counterpart.

    ``entries[g, c, d]`` is 1 only for a Win; Ties go to ``tie_mask``. A
    (g, c) pair whose judge call fails is retried once, then all of its
    dimension cells are flagged in ``invalid_mask``.
    """
    qid = candidates.query_id
    refs = [_counterpart_response(roster, c, qid, counterpart_responses) for c in range(roster.C)]
    G, C = candidates.G, roster.C
    cells = [(g, c) for g in range(G) for c in range(C)]
    tasks = [PairwiseTask(candidates.candidates[g], refs[c], query) for g, c in cells]
    results = dispatch_judgments(tasks, judge, max_in_flight)

    failed = [i for i, r in enumerate(results) if isinstance(r, Exception)]
    if failed:
        logger.warning("re-queueing %d failed comparisons for %s", len(failed), qid)
        retried = dispatch_judgments([tasks[i] for i in failed], judge, max_in_flight)
        for i, r in zip(failed, retried):
            results[i] = r

    entries = np.zeros((G, C, D), dtype=np.int8)
    ties = np.zeros_like(entries)
    invalid = np.zeros_like(entries)
    for (g, c), result in zip(cells, results):
        if isinstance(result, Exception):
            logger.error("comparison (%d, %d) on %s failed: %s", g, c, qid, result)
            invalid[g, c, :] = 1
            continue
        for d, verdict in enumerate(result.verdicts()):
            entries[g, c, d] = verdict is Verdict.WIN
            ties[g, c, d] = verdict is Verdict.TIE
    return ComparisonMatrix(qid, entries, ties, invalid)


def aggregate_reward(matrix: ComparisonMatrix, tie_credit: float = 0.0) -> RewardVector:
    """``R_g = (1 / (C * D)) * sum_c sum_d r[g, c, d]``."""
    if tie_credit not in TIE_CREDITS:
        raise ValueError(f"tie_credit must be one of {TIE_CREDITS}")
    if matrix.invalid_mask.any():
        raise UnresolvedInvalidCells(
            f"{int(matrix.invalid_mask.sum())} invalid cells in matrix for {matrix.query_id!r}"
        )
    _, C, _ = matrix.shape
    # integer numerators keep every reward an exact multiple of 1/(C*D)
    wins = matrix.entries.sum(axis=(1, 2), dtype=np.int64)
    if tie_credit == 0.0:
        rewards = [int(w) / (C * D) for w in wins]
    else:
        ties = matrix.tie_mask.sum(axis=(1, 2), dtype=np.int64)
        rewards = [int(2 * w + t) / (2 * C * D) for w, t in zip(wins, ties)]
    return RewardVector(matrix.query_id, tuple(rewards))


def absolute_score_reward(judgment: Judgment) -> float:
    """Mean over dimensions of ``(score - 1) / 4``."""
    return sum(judgment.per_dimension[dim] - 1 for dim in DIMENSIONS) / (4 * D)


def absolute_reward(
    candidates: CandidateSet, judge: Judge, query: ConsultationQuery | None = None
) -> RewardVector:
    rewards = tuple(absolute_score_reward(judge.absolute(c, query)) for c in candidates.candidates)
    return RewardVector(candidates.query_id, rewards)


@dataclass(frozen=True)
class SeparabilitySetup:
    """Two candidates a fixed quality gap apart, judged against fixed counterparts.

    All four dimensions share the same latent value for each producer.
    """

    sim: SimJudgeConfig = field(default_factory=SimJudgeConfig)
    low_quality: float = 0.55
    gap: float = 0.1
    counterpart_qualities: tuple[float, ...] = (0.45, 0.525, 0.6, 0.675, 0.75)
    tie_credit: float = 0.0


def _flat(query_id: str, producer: str, q: float) -> Response:
    return Response(query_id, f"{producer} reply", producer, (q,) * D)


def reward_separability(
    mode: RewardMode | str, setup: SeparabilitySetup, trials: int
) -> float:
    """Fraction of trials whose reward ordering matches the latent ordering.

    Each trial uses a fresh query id, so the seeded judge noise is redrawn.
    Equal rewards score 0.5.
    """
    mode = RewardMode(mode)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    judge = SimJudge(setup.sim)
    high = setup.low_quality + setup.gap
    total = 0.0
    for t in range(trials):
        qid = f"sep-{t}"
        group = CandidateSet(
            qid, (_flat(qid, "cand-high", high), _flat(qid, "cand-low", setup.low_quality))
        )
        if mode is RewardMode.CRPO:
            roster = CounterpartRoster(
                tuple(
                    Counterpart(f"cp{c}", {qid: _flat(qid, f"cp{c}", q)})
                    for c, q in enumerate(setup.counterpart_qualities)
                )
            )
            matrix = build_comparison_matrix(group, roster, judge)
            r_high, r_low = aggregate_reward(matrix, setup.tie_credit).rewards
        else:
            r_high, r_low = absolute_reward(group, judge).rewards
        total += 1.0 if r_high > r_low else 0.5 if r_high == r_low else 0.0
    return total / trials

