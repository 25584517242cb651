"""Synthetic problems with known latent quality for exercising the trainer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import D, ConsultationQuery, Counterpart, CounterpartRoster, Response
from .optimizer import ToyPolicy


@dataclass(frozen=True)
class GoldProblem:
    queries: tuple[ConsultationQuery, ...]
    templates: dict[str, tuple[Response, ...]]
    roster: CounterpartRoster
    gold_index: dict[str, int]

    def initial_policy(self, temperature: float = 1.0) -> ToyPolicy:
        return ToyPolicy.uniform(self.templates, temperature)

    def gold_probabilities(self, policy: ToyPolicy) -> dict[str, float]:
        return {qid: float(policy.probs(qid)[k]) for qid, k in self.gold_index.items()}


def make_gold_problem(
    n_queries: int = 8,
    n_templates: int = 16,
    n_counterparts: int = 5,
    seed: int = 0,
    gold_quality: float = 0.95,
    other_range: tuple[float, float] = (0.05, 0.6),
    counterpart_range: tuple[float, float] = (0.3, 0.85),
) -> GoldProblem:
    """One gold template per query whose latent quality beats every other producer.

    Non-gold templates and counterparts get independent uniform qualities per
    dimension, so non-gold candidates win a scattered subset of comparisons.
    """
    if counterpart_range[1] >= gold_quality or other_range[1] >= gold_quality:
        raise ValueError("gold quality must dominate all other producers")
    rng = np.random.default_rng(seed)
    queries, templates, gold_index = [], {}, {}
    cp_responses: list[dict[str, Response]] = [{} for _ in range(n_counterparts)]
    for i in range(n_queries):
        qid = f"q{i:03d}"
        queries.append(ConsultationQuery.single_turn(qid, f"Patient complaint #{i}: what should I do?"))
        gold = int(rng.integers(n_templates))
        gold_index[qid] = gold
        row = []
        for k in range(n_templates):
            if k == gold:
                quality = (gold_quality,) * D
            else:
                quality = tuple(rng.uniform(*other_range, size=D))
            row.append(Response(qid, f"template {k} reply to {qid}", f"template-{k}", quality))
        templates[qid] = tuple(row)
        for c in range(n_counterparts):
            cp_responses[c][qid] = Response(
                qid, f"counterpart {c} reply to {qid}", f"cp-{c}",
                tuple(rng.uniform(*counterpart_range, size=D)),
            )
    roster = CounterpartRoster(
        tuple(Counterpart(f"cp-{c}", cp_responses[c]) for c in range(n_counterparts))
    )
    return GoldProblem(tuple(queries), templates, roster, gold_index)
