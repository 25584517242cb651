"""Judges that turn responses into Judgments.

Two implementations share one duck-typed interface (``pairwise``,
``absolute``, ``consistency``):

* :class:`SimJudge` compares the hidden ``latent_quality`` vectors of
  simulated responses under seeded Gaussian noise, so it has a known ground
  truth.
* :class:`ApiJudge` renders a rubric prompt, posts it to a chat-style HTTP
  endpoint and parses the ``VERDICT: {...}`` block out of the reply.

:func:`dispatch_judgments` fans a batch of pairwise tasks out over a bounded
thread pool and keeps per-task failures in their own result slot.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx

from .core import (
    D,
    DIMENSIONS,
    ConsultationQuery,
    Dimension,
    Judgment,
    Mode,
    Response,
    Verdict,
)
from .errors import (
    JudgeUnavailable,
    MissingLatentQuality,
    QueryMismatch,
    SchemaError,
    UnparseableVerdict,
)

logger = logging.getLogger(__name__)


class Judge(Protocol):
    judge_id: str

    def pairwise(
        self, a: Response, b: Response, query: ConsultationQuery | None = None
    ) -> Judgment: ...

    def absolute(self, a: Response, query: ConsultationQuery | None = None) -> Judgment: ...

    def consistency(
        self, response: Response, reference_answer: str, query: ConsultationQuery | None = None
    ) -> bool: ...


# ---------------------------------------------------------------------------
# Seeded noise
# ---------------------------------------------------------------------------


def _key_bytes(*parts: Any) -> bytes:
    return json.dumps([str(p) for p in parts], separators=(",", ":")).encode()


def seeded_normal_pair(*key: Any) -> tuple[float, float]:
    """Two independent N(0, 1) draws fully determined by ``key``.

    Hash-derived (Box-Muller over a BLAKE2b digest) instead of a stateful
    RNG so the draw for a cell does not depend on call order or threading.
    """
    digest = hashlib.blake2b(_key_bytes(*key), digest_size=16).digest()
    x1, x2 = struct.unpack("<QQ", digest)
    u1 = ((x1 >> 11) + 1) * 2.0**-53  # (0, 1]
    u2 = (x2 >> 11) * 2.0**-53
    radius = math.sqrt(-2.0 * math.log(u1))
    return radius * math.cos(2.0 * math.pi * u2), radius * math.sin(2.0 * math.pi * u2)


def seeded_coin(*key: Any) -> bool:
    return hashlib.blake2b(_key_bytes(*key), digest_size=1).digest()[0] & 1 == 1


def _require_latent(*responses: Response) -> None:
    for r in responses:
        if r.latent_quality is None:
            raise MissingLatentQuality(f"response from {r.producer!r} has no latent_quality")


def _clamp_score(x: float) -> int:
    return int(min(5, max(1, math.floor(x + 0.5))))


def normalize_text(text: str) -> str:
    return " ".join(re.findall(r"\w+", text.lower()))


def jaccard(a: str, b: str) -> float:
    """Token-level Jaccard similarity over lowercased, punctuation-stripped words."""
    ta, tb = set(normalize_text(a).split()), set(normalize_text(b).split())
    if not ta and not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


# ---------------------------------------------------------------------------
# Simulated judge
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimJudgeConfig:
    noise_sigma: float = 0.0
    tie_threshold: float = 0.0
    seed: int = 0
    # open-ended mode: minimum noisy accuracy quality to call a response consistent
    consistency_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.noise_sigma < 0 or self.tie_threshold < 0:
            raise ValueError("noise_sigma and tie_threshold must be >= 0")


class SimJudge:
    """Deterministic judge over ``Response.latent_quality``."""

    def __init__(self, cfg: SimJudgeConfig | None = None):
        self.cfg = cfg or SimJudgeConfig()
        self.judge_id = (
            f"sim(sigma={self.cfg.noise_sigma},tie={self.cfg.tie_threshold},seed={self.cfg.seed})"
        )

    def _pair_noise(self, a: Response, b: Response, d: int) -> tuple[float, float]:
        sigma = self.cfg.noise_sigma
        if sigma == 0.0:
            return 0.0, 0.0
        # keyed on the unordered pair so judging (b, a) replays the same draws
        first, second = sorted((a.producer, b.producer))
        z1, z2 = seeded_normal_pair(self.cfg.seed, a.query_id, first, second, d)
        if a.producer == first:
            return sigma * z1, sigma * z2
        return sigma * z2, sigma * z1

    def pairwise(
        self, a: Response, b: Response, query: ConsultationQuery | None = None
    ) -> Judgment:
        _require_latent(a, b)
        if a.query_id != b.query_id:
            raise QueryMismatch(f"{a.query_id!r} vs {b.query_id!r}")
        tie = self.cfg.tie_threshold
        verdicts = {}
        for d, dim in enumerate(DIMENSIONS):
            eps_a, eps_b = self._pair_noise(a, b, d)
            diff = (a.latent_quality[d] + eps_a) - (b.latent_quality[d] + eps_b)
            if diff > tie:
                verdicts[dim] = Verdict.WIN
            elif diff < -tie:
                verdicts[dim] = Verdict.LOSS
            else:
                verdicts[dim] = Verdict.TIE
        return Judgment(a.query_id, a.producer, b.producer, Mode.PAIRWISE, verdicts, self.judge_id)

    def _single_noise(self, r: Response, d: int, tag: str) -> float:
        if self.cfg.noise_sigma == 0.0:
            return 0.0
        return self.cfg.noise_sigma * seeded_normal_pair(self.cfg.seed, r.query_id, tag, r.producer, d)[0]

    def absolute(self, a: Response, query: ConsultationQuery | None = None) -> Judgment:
        _require_latent(a)
        scores = {
            dim: _clamp_score(1.0 + 4.0 * (a.latent_quality[d] + self._single_noise(a, d, "abs")))
            for d, dim in enumerate(DIMENSIONS)
        }
        return Judgment(a.query_id, a.producer, None, Mode.ABSOLUTE, scores, self.judge_id)

    def consistency(
        self, response: Response, reference_answer: str, query: ConsultationQuery | None = None
    ) -> bool:
        if normalize_text(response.text) == normalize_text(reference_answer):
            return True
        if response.latent_quality is not None:
            d = Dimension.ACCURACY.index
            noisy = response.latent_quality[d] + self._single_noise(response, d, "consistency")
            return noisy >= self.cfg.consistency_threshold
        return jaccard(response.text, reference_answer) >= 0.5


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class JudgmentCache:
    """Append-only JSONL cache of ``{key, judgment}`` records.

    Reads are served from memory; writes are serialized under a lock and
    flushed line by line. A corrupt trailing line (an interrupted write) is
    truncated when the file is opened.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        raw = self.path.read_bytes()
        good_end = 0
        offset = 0
        lines = raw.split(b"\n")
        for i, line in enumerate(lines):
            end = offset + len(line) + (1 if i < len(lines) - 1 else 0)
            if line.strip():
                try:
                    rec = json.loads(line)
                    self._data[rec["key"]] = rec["judgment"]
                    good_end = end
                except (json.JSONDecodeError, KeyError, TypeError):
                    if any(rest.strip() for rest in lines[i + 1 :]):
                        logger.warning("skipping corrupt cache line %d in %s", i + 1, self.path)
                    else:
                        logger.warning("truncating corrupt trailing line in %s", self.path)
                        with self.path.open("r+b") as fh:
                            fh.truncate(good_end)
                        return
            else:
                good_end = end
            offset = end

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> Any | None:
        return self._data.get(key)

    def put(self, key: str, value: Any) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = value
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps({"key": key, "judgment": value}, sort_keys=True) + "\n")


def cache_key(*parts: Any) -> str:
    return "|".join(str(p) for p in parts)


class CachingJudge:
    """Wraps any judge with a :class:`JudgmentCache`; counts underlying calls."""

    def __init__(self, inner: Judge, cache: JudgmentCache):
        self.inner = inner
        self.cache = cache
        self.judge_id = inner.judge_id
        self.calls = 0
        self._lock = threading.Lock()

    def _cached(self, key: str, compute: Callable[[], Any], encode, decode) -> Any:
        hit = self.cache.get(key)
        if hit is not None:
            return decode(hit)
        with self._lock:
            self.calls += 1
        value = compute()
        self.cache.put(key, encode(value))
        return value

    def pairwise(self, a, b, query=None) -> Judgment:
        key = cache_key(self.judge_id, "pairwise", a.query_id, a.producer, b.producer)
        return self._cached(
            key, lambda: self.inner.pairwise(a, b, query), Judgment.to_dict, Judgment.from_dict
        )

    def absolute(self, a, query=None) -> Judgment:
        key = cache_key(self.judge_id, "absolute", a.query_id, a.producer)
        return self._cached(
            key, lambda: self.inner.absolute(a, query), Judgment.to_dict, Judgment.from_dict
        )

    def consistency(self, response, reference_answer, query=None) -> bool:
        ref_hash = hashlib.sha256(reference_answer.encode()).hexdigest()[:12]
        key = cache_key(self.judge_id, "consistency", response.query_id, response.producer, ref_hash)
        return self._cached(
            key,
            lambda: self.inner.consistency(response, reference_answer, query),
            lambda v: {"consistent": bool(v)},
            lambda raw: bool(raw["consistent"]),
        )


# ---------------------------------------------------------------------------
# API judge
# ---------------------------------------------------------------------------

_RUBRIC = """\
Rate on four dimensions:
- proactiveness: does the reply ask for missing critical information?
- accuracy: is the medical content sound?
- usefulness: is the advice actionable and relevant?
- language: is it fluent and professional?"""

PROMPT_TEMPLATES: dict[str, str] = {
    "pairwise-v1": _RUBRIC
    + """

Consultation so far:
{context}

Response A:
{first}

Response B:
{second}

For each dimension say whether Response A wins, ties or loses against Response B.
End with a line of the exact form
VERDICT: {{proactiveness: win|tie|loss, accuracy: win|tie|loss, usefulness: win|tie|loss, language: win|tie|loss, overall: win|tie|loss}}""",
    "absolute-v1": _RUBRIC
    + """

Consultation so far:
{context}

Response:
{first}

Score each dimension on an integer scale from 1 (poor) to 5 (excellent).
End with a line of the exact form
VERDICT: {{proactiveness: N, accuracy: N, usefulness: N, language: N}}""",
    "consistency-v1": """\
Decide whether the model answer is semantically consistent with the reference answer.

Question:
{context}

Reference answer:
{second}

Model answer:
{first}

End with a line of the exact form
VERDICT: {{consistent: yes|no}}""",
}


def template_digest(name: str) -> str:
    """Content-addressed id for a prompt template: ``name@<sha256 prefix>``."""
    body = PROMPT_TEMPLATES[name]
    return f"{name}@{hashlib.sha256(body.encode()).hexdigest()[:12]}"


_VERDICT_RE = re.compile(r"VERDICT\s*:\s*\{(.*?)\}", re.IGNORECASE | re.DOTALL)
_PAIR_RE = re.compile(r"[\"']?([A-Za-z_ \-]+?)[\"']?\s*:\s*[\"']?([A-Za-z0-9]+)[\"']?")


def parse_verdict_block(text: str) -> dict[str, str]:
    """Return the lowercased ``key -> value`` pairs of the last VERDICT block."""
    blocks = _VERDICT_RE.findall(text or "")
    if not blocks:
        raise UnparseableVerdict("no VERDICT block in judge reply")
    return {k.strip().lower(): v.strip().lower() for k, v in _PAIR_RE.findall(blocks[-1])}


def _parse_dimensions(pairs: dict[str, str], convert: Callable[[str], Any]) -> dict[Dimension, Any]:
    out: dict[Dimension, Any] = {}
    for key, value in pairs.items():
        if key in ("overall", "all"):
            continue
        try:
            dim = Dimension.parse(key)
        except SchemaError:
            continue
        try:
            out[dim] = convert(value)
        except ValueError as exc:
            raise UnparseableVerdict(f"bad value {value!r} for {key}") from exc
    if len(out) != D:
        missing = sorted(d.value for d in DIMENSIONS if d not in out)
        raise UnparseableVerdict(f"verdict block missing dimensions {missing}")
    return out


def _to_score(value: str) -> int:
    score = int(value)
    if not 1 <= score <= 5:
        raise ValueError(value)
    return score


_YES = {"yes", "true", "consistent", "1"}
_NO = {"no", "false", "inconsistent", "0"}


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_ms: int = 500

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class ApiJudgeConfig:
    endpoint_url: str
    model_name: str
    prompt_template_id: str = "pairwise-v1"
    max_in_flight: int = 4
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)
    cache_path: str | None = None
    api_key_env: str = "JUDGE_API_KEY"
    order_seed: int = 0
    timeout_s: float = 60.0

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.prompt_template_id not in PROMPT_TEMPLATES:
            raise ValueError(f"unknown prompt template {self.prompt_template_id!r}")


def _render_context(query: ConsultationQuery | None) -> str:
    if query is None:
        return "(no context)"
    lines = []
    for turn in query.turns:
        images = "".join(f" [image: {ref.uri}]" for ref in turn.image_refs)
        lines.append(f"{turn.speaker.value.capitalize()}: {turn.text}{images}")
    return "\n".join(lines)


def _reply_text(payload: Any) -> str:
    if isinstance(payload, dict):
        if isinstance(payload.get("text"), str):
            return payload["text"]
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            pass
    raise UnparseableVerdict("judge reply has no text field")


class ApiJudge:
    """LLM-as-judge over an HTTP chat endpoint, with retries and a verdict cache."""

    def __init__(
        self,
        cfg: ApiJudgeConfig,
        client: httpx.Client | None = None,
        cache: JudgmentCache | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.client = client or httpx.Client(timeout=cfg.timeout_s)
        self.cache = cache if cache is not None else JudgmentCache(cfg.cache_path)
        self.sleep = sleep
        self.judge_id = f"api:{cfg.model_name}"
        self.requests_sent = 0
        self._count_lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, prompt: str) -> str:
        with self._count_lock:
            self.requests_sent += 1
        body = {"model": self.cfg.model_name, "messages": [{"role": "user", "content": prompt}]}
        resp = self.client.post(self.cfg.endpoint_url, json=body, headers=self._headers())
        if resp.status_code == 429 or resp.status_code >= 500:
            raise JudgeUnavailable(f"judge endpoint returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise _Fatal(JudgeUnavailable(f"judge endpoint rejected request: HTTP {resp.status_code}"))
        try:
            payload = resp.json()
        except ValueError as exc:
            raise UnparseableVerdict("judge reply is not JSON") from exc
        return _reply_text(payload)

    def _ask(self, prompt: str, parse: Callable[[str], Any]) -> tuple[Any, str]:
        policy = self.cfg.retry_policy
        last: Exception | None = None
        for attempt in range(policy.max_attempts):
            if attempt:
                self.sleep(policy.backoff_base_ms * 2 ** (attempt - 1) / 1000.0)
            try:
                text = self._post(prompt)
                return parse(text), text
            except _Fatal as exc:
                raise exc.error from None
            except httpx.HTTPError as exc:
                last = JudgeUnavailable(f"{type(exc).__name__}: {exc}")
            except (JudgeUnavailable, UnparseableVerdict) as exc:
                last = exc
            logger.info("judge attempt %d/%d failed: %s", attempt + 1, policy.max_attempts, last)
        assert last is not None
        raise last

    def pairwise(
        self, a: Response, b: Response, query: ConsultationQuery | None = None
    ) -> Judgment:
        if a.query_id != b.query_id:
            raise QueryMismatch(f"{a.query_id!r} vs {b.query_id!r}")
        template = self.cfg.prompt_template_id
        digest = template_digest(template)
        flipped = seeded_coin(self.cfg.order_seed, a.query_id, a.producer, b.producer)
        first, second = (b, a) if flipped else (a, b)
        key = cache_key(digest, self.cfg.model_name, a.query_id, a.producer, b.producer,
                        "BA" if flipped else "AB")
        hit = self.cache.get(key)
        if hit is not None:
            return Judgment.from_dict(hit)

        prompt = PROMPT_TEMPLATES[template].format(
            context=_render_context(query), first=first.text, second=second.text
        )

        def parse(text: str):
            pairs = parse_verdict_block(text)
            try:
                dims = _parse_dimensions(pairs, Verdict)
                overall = Verdict(pairs["overall"]) if "overall" in pairs else None
            except ValueError as exc:
                raise UnparseableVerdict(str(exc)) from exc
            return dims, overall

        (dims, overall), raw = self._ask(prompt, parse)
        if flipped:
            dims = {dim: v.flipped() for dim, v in dims.items()}
            overall = overall.flipped() if overall else None
        judgment = Judgment(
            a.query_id, a.producer, b.producer, Mode.PAIRWISE, dims, self.judge_id,
            rationale=raw, overall=overall, template_id=digest,
        )
        self.cache.put(key, judgment.to_dict())
        return judgment

    def absolute(self, a: Response, query: ConsultationQuery | None = None) -> Judgment:
        digest = template_digest("absolute-v1")
        key = cache_key(digest, self.cfg.model_name, a.query_id, a.producer)
        hit = self.cache.get(key)
        if hit is not None:
            return Judgment.from_dict(hit)
        prompt = PROMPT_TEMPLATES["absolute-v1"].format(
            context=_render_context(query), first=a.text, second=""
        )
        scores, raw = self._ask(
            prompt, lambda text: _parse_dimensions(parse_verdict_block(text), _to_score)
        )
        judgment = Judgment(
            a.query_id, a.producer, None, Mode.ABSOLUTE, scores, self.judge_id,
            rationale=raw, template_id=digest,
        )
        self.cache.put(key, judgment.to_dict())
        return judgment

    def consistency(
        self, response: Response, reference_answer: str, query: ConsultationQuery | None = None
    ) -> bool:
        digest = template_digest("consistency-v1")
        ref_hash = hashlib.sha256(reference_answer.encode()).hexdigest()[:12]
        key = cache_key(digest, self.cfg.model_name, response.query_id, response.producer, ref_hash)
        hit = self.cache.get(key)
        if hit is not None:
            return bool(hit["consistent"])
        prompt = PROMPT_TEMPLATES["consistency-v1"].format(
            context=_render_context(query), first=response.text, second=reference_answer
        )

        def parse(text: str) -> bool:
            value = parse_verdict_block(text).get("consistent")
            if value in _YES:
                return True
            if value in _NO:
                return False
            raise UnparseableVerdict(f"bad consistency verdict {value!r}")

        verdict, _ = self._ask(prompt, parse)
        self.cache.put(key, {"consistent": verdict})
        return verdict


class _Fatal(Exception):
    """Internal wrapper for non-retryable errors."""

    def __init__(self, error: Exception):
        super().__init__(str(error))
        self.error = error


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairwiseTask:
    a: Response
    b: Response
    query: ConsultationQuery | None = None


def dispatch_judgments(
    tasks: Sequence[PairwiseTask], judge: Judge, max_in_flight: int = 4
) -> list[Judgment | Exception]:
    """Judge every task with at most ``max_in_flight`` calls outstanding.

    Results come back in input order. A task that raises leaves its
    exception in its own slot; the rest of the batch still runs.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    if not tasks:
        return []

    def run(task: PairwiseTask) -> Judgment | Exception:
        try:
            return judge.pairwise(task.a, task.b, task.query)
        except Exception as exc:  # noqa: BLE001 - isolated per slot by contract
            return exc

    if max_in_flight == 1:
        return [run(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(run, tasks))
