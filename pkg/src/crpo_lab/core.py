"""Domain types shared by reward computation, training and evaluation.

Every type here is immutable after construction and round-trips through
``to_dict``/``from_dict`` using the JSON field names of the file schemas.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import QueryMismatch, SchemaError

SCHEMA_VERSION = "1.0"


class Dimension(enum.Enum):
    PROACTIVENESS = "proactiveness"
    ACCURACY = "accuracy"
    USEFULNESS = "usefulness"
    LANGUAGE_QUALITY = "language_quality"

    @property
    def index(self) -> int:
        return _DIM_INDEX[self]

    @classmethod
    def parse(cls, name: str) -> "Dimension":
        """Accept enum values plus the short aliases judges tend to emit."""
        key = name.strip().lower().replace(" ", "_").replace("-", "_")
        try:
            return _DIM_ALIASES[key]
        except KeyError:
            raise SchemaError(f"unknown dimension {name!r}") from None


DIMENSIONS: tuple[Dimension, ...] = tuple(Dimension)
D = len(DIMENSIONS)
_DIM_INDEX = {dim: i for i, dim in enumerate(DIMENSIONS)}
_DIM_ALIASES = {dim.value: dim for dim in DIMENSIONS} | {
    "proact": Dimension.PROACTIVENESS,
    "acc": Dimension.ACCURACY,
    "use": Dimension.USEFULNESS,
    "language": Dimension.LANGUAGE_QUALITY,
    "lang": Dimension.LANGUAGE_QUALITY,
    "languagequality": Dimension.LANGUAGE_QUALITY,
}
assert D == 4


class Speaker(enum.Enum):
    PATIENT = "patient"
    PHYSICIAN = "physician"


class Verdict(enum.Enum):
    WIN = "win"
    TIE = "tie"
    LOSS = "loss"

    def flipped(self) -> "Verdict":
        return {Verdict.WIN: Verdict.LOSS, Verdict.LOSS: Verdict.WIN}.get(self, self)


class Mode(enum.Enum):
    PAIRWISE = "pairwise"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class ImageRef:
    uri: str
    modality: str | None = None

    def to_dict(self) -> dict:
        return {"uri": self.uri, "modality": self.modality}

    @classmethod
    def from_dict(cls, raw: Any) -> "ImageRef":
        if isinstance(raw, str):
            return cls(uri=raw)
        return cls(uri=str(raw["uri"]), modality=raw.get("modality"))


@dataclass(frozen=True)
class Turn:
    speaker: Speaker
    text: str
    image_refs: tuple[ImageRef, ...] = ()

    def to_dict(self) -> dict:
        return {
            "speaker": self.speaker.value,
            "text": self.text,
            "image_refs": [ref.to_dict() for ref in self.image_refs],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Turn":
        try:
            speaker = Speaker(str(raw["speaker"]).lower())
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad turn speaker: {exc}") from exc
        return cls(
            speaker=speaker,
            text=str(raw.get("text", "")),
            image_refs=tuple(ImageRef.from_dict(r) for r in raw.get("image_refs") or ()),
        )


@dataclass(frozen=True)
class ConsultationQuery:
    id: str
    turns: tuple[Turn, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.turns:
            raise SchemaError(f"query {self.id!r} has no turns")
        if self.turns[-1].speaker is not Speaker.PATIENT:
            raise SchemaError(f"query {self.id!r} must end with a patient turn")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "turns": [t.to_dict() for t in self.turns],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ConsultationQuery":
        if "id" not in raw or "turns" not in raw:
            raise SchemaError("query record needs 'id' and 'turns'")
        return cls(
            id=str(raw["id"]),
            turns=tuple(Turn.from_dict(t) for t in raw["turns"]),
            metadata={str(k): str(v) for k, v in (raw.get("metadata") or {}).items()},
        )

    @classmethod
    def single_turn(cls, query_id: str, text: str, **metadata: str) -> "ConsultationQuery":
        return cls(query_id, (Turn(Speaker.PATIENT, text),), metadata)


@dataclass(frozen=True)
class Response:
    query_id: str
    text: str
    producer: str
    latent_quality: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise SchemaError("response text must be non-empty")
        if self.latent_quality is not None:
            q = tuple(float(x) for x in self.latent_quality)
            if len(q) != D:
                raise SchemaError(f"latent_quality must have length {D}, got {len(q)}")
            object.__setattr__(self, "latent_quality", q)

    def for_judge(self) -> "Response":
        """Copy with the simulation oracle removed, safe to show an external judge."""
        return Response(self.query_id, self.text, self.producer)

    def to_dict(self) -> dict:
        out = {"query_id": self.query_id, "text": self.text, "producer": self.producer}
        if self.latent_quality is not None:
            out["latent_quality"] = list(self.latent_quality)
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Response":
        try:
            return cls(
                query_id=str(raw["query_id"]),
                text=str(raw["text"]),
                producer=str(raw["producer"]),
                latent_quality=(
                    tuple(raw["latent_quality"]) if raw.get("latent_quality") is not None else None
                ),
            )
        except KeyError as exc:
            raise SchemaError(f"response record missing {exc}") from exc


@dataclass(frozen=True)
class CandidateSet:
    """A sampled group of responses to one query.

    ``indices`` and ``logprobs`` are the template index drawn for each
    candidate and its log-probability under the sampling policy.
    """

    query_id: str
    candidates: tuple[Response, ...]
    policy_version: str = ""
    indices: tuple[int, ...] = ()
    logprobs: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if len(self.candidates) < 2:
            raise SchemaError("a candidate group needs G >= 2")
        for cand in self.candidates:
            if cand.query_id != self.query_id:
                raise QueryMismatch(f"candidate for {cand.query_id!r} in group {self.query_id!r}")
        for name in ("indices", "logprobs"):
            val = getattr(self, name)
            if val and len(val) != len(self.candidates):
                raise SchemaError(f"{name} length does not match group size")

    @property
    def G(self) -> int:
        return len(self.candidates)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "candidates": [c.to_dict() for c in self.candidates],
            "policy_version": self.policy_version,
            "indices": list(self.indices),
            "logprobs": list(self.logprobs),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "CandidateSet":
        return cls(
            query_id=str(raw["query_id"]),
            candidates=tuple(Response.from_dict(c) for c in raw["candidates"]),
            policy_version=str(raw.get("policy_version", "")),
            indices=tuple(int(i) for i in raw.get("indices", ())),
            logprobs=tuple(float(x) for x in raw.get("logprobs", ())),
        )


@dataclass(frozen=True)
class Counterpart:
    """A fixed reference producer: cached responses, or a live callable."""

    name: str
    responses: Mapping[str, Response] | None = None
    endpoint: Callable[[str], Response] | None = None

    def __post_init__(self) -> None:
        if (self.responses is None) == (self.endpoint is None):
            raise SchemaError("counterpart needs exactly one of cached responses or endpoint")

    def respond(self, query_id: str) -> Response | None:
        if self.responses is not None:
            return self.responses.get(query_id)
        return self.endpoint(query_id)


@dataclass(frozen=True)
class CounterpartRoster:
    counterparts: tuple[Counterpart, ...]

    def __post_init__(self) -> None:
        if not self.counterparts:
            raise SchemaError("roster needs C >= 1")

    @property
    def C(self) -> int:
        return len(self.counterparts)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(cp.name for cp in self.counterparts)


def _frozen_array(values: Any, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.int8)
    if arr.shape != shape:
        raise SchemaError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.isin(arr, (0, 1)).all():
        raise SchemaError(f"{name} must be binary")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ComparisonMatrix:
    """Binary G x C x D win tensor for one query.

    ``entries[g, c, d]`` is 1 iff candidate g strictly beat counterpart c on
    dimension d. ``tie_mask`` marks tied cells and ``invalid_mask`` cells the
    judge failed to produce.
    """

    query_id: str
    entries: np.ndarray
    tie_mask: np.ndarray | None = None
    invalid_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries)
        if entries.ndim != 3 or entries.shape[2] != D:
            raise SchemaError(f"entries must be G x C x {D}, got {entries.shape}")
        shape = entries.shape
        object.__setattr__(self, "entries", _frozen_array(entries, shape, "entries"))
        for name in ("tie_mask", "invalid_mask"):
            val = getattr(self, name)
            val = np.zeros(shape, dtype=np.int8) if val is None else val
            object.__setattr__(self, name, _frozen_array(val, shape, name))
        if (self.entries & self.tie_mask).any():
            raise SchemaError("a tied cell cannot also be a win")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.entries.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ComparisonMatrix):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and np.array_equal(self.entries, other.entries)
            and np.array_equal(self.tie_mask, other.tie_mask)
            and np.array_equal(self.invalid_mask, other.invalid_mask)
        )

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "entries": self.entries.tolist(),
            "tie_mask": self.tie_mask.tolist(),
            "invalid_mask": self.invalid_mask.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ComparisonMatrix":
        return cls(
            query_id=str(raw["query_id"]),
            entries=np.array(raw["entries"]),
            tie_mask=np.array(raw["tie_mask"]) if "tie_mask" in raw else None,
            invalid_mask=np.array(raw["invalid_mask"]) if "invalid_mask" in raw else None,
        )

    def shard_records(self) -> list[dict]:
        """One audit record per cell, ``{query_id, g, c, d, r, tie}``."""
        G, C, _ = self.shape
        return [
            {
                "query_id": self.query_id,
                "g": g,
                "c": c,
                "d": d,
                "r": int(self.entries[g, c, d]),
                "tie": int(self.tie_mask[g, c, d]),
            }
            for g in range(G)
            for c in range(C)
            for d in range(D)
        ]


def _float_tuple(values: Sequence[float], name: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if not all(math.isfinite(v) for v in out):
        raise SchemaError(f"{name} must be finite")
    return out


@dataclass(frozen=True)
class RewardVector:
    query_id: str
    rewards: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", _float_tuple(self.rewards, "rewards"))
        if any(r < 0.0 or r > 1.0 for r in self.rewards):
            raise SchemaError("rewards must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "rewards": list(self.rewards)}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RewardVector":
        return cls(str(raw["query_id"]), tuple(raw["rewards"]))


@dataclass(frozen=True)
class AdvantageVector:
    query_id: str
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "advantages", _float_tuple(self.advantages, "advantages"))

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "advantages": list(self.advantages)}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "AdvantageVector":
        return cls(str(raw["query_id"]), tuple(raw["advantages"]))


@dataclass(frozen=True)
class Judgment:
    """One judge verdict.

    Pairwise judgments compare ``subject`` against ``reference`` and hold a
    :class:`Verdict` per dimension (plus an optional ``overall`` verdict if
    the judge emitted one). Absolute judgments have no reference and hold
    integer scores 1..5.
    """

    query_id: str
    subject: str
    reference: str | None
    mode: Mode
    per_dimension: Mapping[Dimension, Any]
    judge_id: str
    rationale: str | None = None
    overall: Verdict | None = None
    template_id: str | None = None

    def __post_init__(self) -> None:
        if self.mode is Mode.PAIRWISE and self.reference is None:
            raise SchemaError("pairwise judgment requires a reference")
        if self.mode is Mode.ABSOLUTE and self.reference is not None:
            raise SchemaError("absolute judgment must not have a reference")
        if set(self.per_dimension) != set(DIMENSIONS) or len(self.per_dimension) != D:
            raise SchemaError("judgment must cover all four dimensions exactly once")
        for value in self.per_dimension.values():
            if self.mode is Mode.PAIRWISE and not isinstance(value, Verdict):
                raise SchemaError(f"pairwise verdict must be win/tie/loss, got {value!r}")
            if self.mode is Mode.ABSOLUTE and (
                isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5
            ):
                raise SchemaError(f"absolute score must be an integer 1..5, got {value!r}")
        if self.overall is not None and self.mode is not Mode.PAIRWISE:
            raise SchemaError("overall verdict only applies to pairwise judgments")
        ordered = {dim: self.per_dimension[dim] for dim in DIMENSIONS}
        object.__setattr__(self, "per_dimension", ordered)

    @property
    def id(self) -> str:
        return f"{self.query_id}|{self.subject}|{self.reference or '-'}|{self.mode.value}"

    def verdicts(self) -> list[Any]:
        return [self.per_dimension[dim] for dim in DIMENSIONS]

    def to_dict(self) -> dict:
        per_dim = {
            dim.value: (v.value if isinstance(v, Verdict) else v)
            for dim, v in self.per_dimension.items()
        }
        return {
            "query_id": self.query_id,
            "subject": self.subject,
            "reference": self.reference,
            "mode": self.mode.value,
            "per_dimension": per_dim,
            "judge_id": self.judge_id,
            "rationale": self.rationale,
            "overall": self.overall.value if self.overall else None,
            "template_id": self.template_id,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Judgment":
        mode = Mode(raw["mode"])
        per_dim = {}
        for key, value in raw["per_dimension"].items():
            per_dim[Dimension.parse(key)] = Verdict(value) if mode is Mode.PAIRWISE else int(value)
        return cls(
            query_id=str(raw["query_id"]),
            subject=str(raw["subject"]),
            reference=raw.get("reference"),
            mode=mode,
            per_dimension=per_dim,
            judge_id=str(raw["judge_id"]),
            rationale=raw.get("rationale"),
            overall=Verdict(raw["overall"]) if raw.get("overall") else None,
            template_id=raw.get("template_id"),
        )


@dataclass(frozen=True)
class RateCell:
    wins: int = 0
    ties: int = 0
    losses: int = 0

    @property
    def total(self) -> int:
        return self.wins + self.ties + self.losses

    def _rate(self, n: int) -> float:
        return n / self.total if self.total else 0.0

    @property
    def win_rate(self) -> float:
        return self._rate(self.wins)

    @property
    def tie_rate(self) -> float:
        return self._rate(self.ties)

    @property
    def loss_rate(self) -> float:
        return self._rate(self.losses)

    @property
    def decisive_win_rate(self) -> float:
        """Wins over decided comparisons, i.e. with ties left out of the denominator."""
        decided = self.wins + self.losses
        return self.wins / decided if decided else 0.0

    def add(self, verdict: Verdict) -> "RateCell":
        return RateCell(
            self.wins + (verdict is Verdict.WIN),
            self.ties + (verdict is Verdict.TIE),
            self.losses + (verdict is Verdict.LOSS),
        )

    def to_dict(self) -> dict:
        return {
            "win_rate": self.win_rate,
            "tie_rate": self.tie_rate,
            "loss_rate": self.loss_rate,
            "decisive_win_rate": self.decisive_win_rate,
            "counts": {"win": self.wins, "tie": self.ties, "loss": self.losses},
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RateCell":
        counts = raw["counts"]
        return cls(int(counts["win"]), int(counts["tie"]), int(counts["loss"]))


OVERALL = "all"


@dataclass(frozen=True)
class EvalReport:
    """Aggregated benchmark results.

    ``per_baseline[name]`` maps each dimension value and ``"all"`` to a
    :class:`RateCell`. ``consistency`` is keyed the same way.
    """

    per_baseline: Mapping[str, Mapping[str, RateCell]]
    aggregate_win_rate: float
    mcq_accuracy: float | None = None
    consistency: Mapping[str, float] | None = None
    errors: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "per_baseline": {
                name: {key: cell.to_dict() for key, cell in cells.items()}
                for name, cells in sorted(self.per_baseline.items())
            },
            "aggregate_win_rate": self.aggregate_win_rate,
            "mcq_accuracy": self.mcq_accuracy,
            "consistency": dict(self.consistency) if self.consistency is not None else None,
            "errors": list(self.errors),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EvalReport":
        check_schema_version(raw)
        return cls(
            per_baseline={
                name: {key: RateCell.from_dict(cell) for key, cell in cells.items()}
                for name, cells in raw["per_baseline"].items()
            },
            aggregate_win_rate=float(raw["aggregate_win_rate"]),
            mcq_accuracy=raw.get("mcq_accuracy"),
            consistency=raw.get("consistency"),
            errors=tuple(raw.get("errors", ())),
        )


def check_schema_version(raw: Mapping) -> None:
    version = str(raw.get("schema_version", SCHEMA_VERSION))
    if version.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise SchemaError(f"unsupported schema_version {version!r}")
