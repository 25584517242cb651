import json
import threading
import time

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from crpo_lab.core import DIMENSIONS, Dimension, Judgment, Mode, Response, Verdict
from crpo_lab.errors import (
    JudgeUnavailable,
    MissingLatentQuality,
    QueryMismatch,
    UnparseableVerdict,
)
from crpo_lab.judging import (
    ApiJudge,
    ApiJudgeConfig,
    CachingJudge,
    JudgmentCache,
    PairwiseTask,
    RetryPolicy,
    SimJudge,
    SimJudgeConfig,
    dispatch_judgments,
    parse_verdict_block,
    seeded_coin,
    template_digest,
)

from conftest import resp

quality = st.lists(st.floats(0, 1, allow_nan=False), min_size=4, max_size=4)


# --- simulated judge -------------------------------------------------------


def test_strict_dominance_wins_everywhere():
    j = SimJudge().pairwise(resp("a", 0.9), resp("b", 0.1))
    assert j.verdicts() == [Verdict.WIN] * 4
    assert j.mode is Mode.PAIRWISE and j.reference == "b"


def test_identical_quality_inside_tie_band():
    j = SimJudge(SimJudgeConfig(tie_threshold=0.05)).pairwise(resp("a", 0.4), resp("b", 0.4))
    assert j.verdicts() == [Verdict.TIE] * 4


def test_noisy_win_probability_matches_gaussian_cdf():
    qa, qb, sigma = [0.6, 0.4, 0.5, 0.5], [0.5] * 4, 0.1
    a, b = resp("a", qa), resp("b", qb)
    wins = np.zeros(4)
    n = 10_000
    for seed in range(n):
        j = SimJudge(SimJudgeConfig(noise_sigma=sigma, seed=seed)).pairwise(a, b)
        wins += [v is Verdict.WIN for v in j.verdicts()]
    expected = norm.cdf((np.array(qa) - np.array(qb)) / (sigma * np.sqrt(2)))
    np.testing.assert_allclose(wins / n, expected, atol=0.02)


def test_sim_judge_errors():
    judge = SimJudge()
    with pytest.raises(MissingLatentQuality):
        judge.pairwise(Response("q1", "t", "a"), resp("b", 0.1))
    with pytest.raises(MissingLatentQuality):
        judge.absolute(Response("q1", "t", "a"))
    with pytest.raises(QueryMismatch):
        judge.pairwise(resp("a", 0.1), resp("b", 0.1, query_id="q2"))


@pytest.mark.parametrize("q,scores", [(1.0, 5), (0.0, 1), (0.5, 3)])
def test_absolute_scale_endpoints(q, scores):
    j = SimJudge().absolute(resp("a", q))
    assert j.verdicts() == [scores] * 4 and j.reference is None


@settings(max_examples=200, deadline=None)
@given(quality, quality, st.integers(0, 2**63 - 1), st.floats(0, 0.3))
def test_determinism(qa, qb, seed, sigma):
    cfg = SimJudgeConfig(noise_sigma=sigma, seed=seed)
    a, b = resp("a", qa), resp("b", qb)
    assert SimJudge(cfg).pairwise(a, b) == SimJudge(cfg).pairwise(a, b)
    assert SimJudge(cfg).absolute(a) == SimJudge(cfg).absolute(a)


@settings(max_examples=200)
@given(quality, quality, st.floats(0, 0.2))
def test_antisymmetry_without_noise(qa, qb, tie):
    judge = SimJudge(SimJudgeConfig(tie_threshold=tie))
    ab = judge.pairwise(resp("a", qa), resp("b", qb)).verdicts()
    ba = judge.pairwise(resp("b", qb), resp("a", qa)).verdicts()
    assert [v.flipped() for v in ab] == ba


@settings(max_examples=300)
@given(quality, quality)
def test_absolute_and_pairwise_agree_when_scores_differ(qa, qb):
    judge = SimJudge()
    a, b = resp("a", qa), resp("b", qb)
    sa, sb = judge.absolute(a).verdicts(), judge.absolute(b).verdicts()
    pw = judge.pairwise(a, b).verdicts()
    for d in range(4):
        if sa[d] > sb[d]:
            assert pw[d] is Verdict.WIN
        elif sa[d] < sb[d]:
            assert pw[d] is Verdict.LOSS


def test_open_ended_consistency():
    judge = SimJudge()
    ref = "Take ibuprofen and rest for two days."
    assert judge.consistency(Response("q1", "take ibuprofen and rest for two days", "m"), ref)
    bad = Response("q1", "Stop all medication.", "m", (0.9, 0.1, 0.9, 0.9))
    assert not judge.consistency(bad, ref)
    good = Response("q1", "Rest, and an NSAID may help.", "m", (0.9, 0.9, 0.9, 0.9))
    assert judge.consistency(good, ref)


# --- cache -----------------------------------------------------------------


def test_cache_truncates_corrupt_trailing_line(tmp_path):
    path = tmp_path / "cache.jsonl"
    cache = JudgmentCache(path)
    cache.put("k1", {"consistent": True})
    cache.put("k2", {"consistent": False})
    with path.open("a") as fh:
        fh.write('{"key": "k3", "judgm')
    reopened = JudgmentCache(path)
    assert len(reopened) == 2 and reopened.get("k2") == {"consistent": False}
    assert path.read_text().endswith("}\n")
    reopened.put("k3", {"consistent": True})
    assert len(JudgmentCache(path)) == 3


def test_caching_judge_warm_equals_cold(tmp_path):
    path = tmp_path / "c.jsonl"
    cold = CachingJudge(SimJudge(SimJudgeConfig(noise_sigma=0.1, seed=3)), JudgmentCache(path))
    pairs = [(resp(f"a{i}", 0.5), resp("b", 0.45)) for i in range(10)]
    first = [cold.pairwise(a, b) for a, b in pairs]
    assert cold.calls == 10
    warm = CachingJudge(SimJudge(SimJudgeConfig(noise_sigma=0.1, seed=3)), JudgmentCache(path))
    assert [warm.pairwise(a, b) for a, b in pairs] == first
    assert warm.calls == 0


# --- API judge -------------------------------------------------------------

VERDICT_WIN_ALL = "VERDICT: {proactiveness: win, accuracy: win, usefulness: win, language: win}"


def _api(handler, tmp_path=None, **kw):
    cfg = ApiJudgeConfig(
        endpoint_url="http://judge.test/v1/chat",
        model_name="judge-model",
        retry_policy=kw.pop("retry_policy", RetryPolicy(3, 1)),
        cache_path=str(tmp_path / "api_cache.jsonl") if tmp_path else None,
        **kw,
    )
    client = httpx.Client(transport=httpx.MockTransport(handler))
    sleeps = []
    return ApiJudge(cfg, client=client, sleep=sleeps.append), sleeps


def _prompt(request: httpx.Request) -> str:
    body = json.loads(request.content)
    assert body["model"] == "judge-model"
    return body["messages"][0]["content"]


def _prefers_good(request: httpx.Request) -> httpx.Response:
    """Fake judge: the response containing GOOD wins every dimension."""
    prompt = _prompt(request)
    first = prompt.split("Response A:")[1].split("Response B:")[0]
    word = "win" if "GOOD" in first else "loss"
    block = ", ".join(f"{k}: {word}" for k in ("proactiveness", "accuracy", "usefulness", "language"))
    return httpx.Response(200, json={"text": f"Reasoning...\nVERDICT: {{{block}}}"})


def test_verdict_unflipped_for_logical_subject(query):
    judge, _ = _api(_prefers_good)
    subject_wins = Response("q1", "GOOD answer", "subject")
    flips = set()
    for i in range(12):
        other = Response("q1", "meh answer", f"base{i}")
        flips.add(seeded_coin(0, "q1", "subject", f"base{i}"))
        j = judge.pairwise(subject_wins, other, query)
        assert j.verdicts() == [Verdict.WIN] * 4
        j = judge.pairwise(other, subject_wins, query)
        assert j.verdicts() == [Verdict.LOSS] * 4
    assert flips == {True, False}


def test_first_response_wins_accuracy_after_flip(query):
    a = Response("q1", "alpha", "subject")
    b = next(
        Response("q1", "beta", f"b{i}") for i in range(50) if seeded_coin(0, "q1", "subject", f"b{i}")
    )

    def handler(request):
        return httpx.Response(200, json={"text": "VERDICT: {proactiveness: tie, accuracy: win, "
                                                 "usefulness: tie, language: tie}"})

    judge, _ = _api(handler)
    j = judge.pairwise(a, b, query)
    # b was shown first, so "first wins accuracy" is a loss for the subject a
    assert j.per_dimension[Dimension.ACCURACY] is Verdict.LOSS
    assert j.per_dimension[Dimension.USEFULNESS] is Verdict.TIE


def test_retry_until_valid_verdict(query):
    replies = iter(["no verdict here", "VERDICT: {accuracy: win}", VERDICT_WIN_ALL])
    judge, sleeps = _api(lambda r: httpx.Response(200, json={"text": next(replies)}))
    j = judge.pairwise(Response("q1", "x", "s"), Response("q1", "y", "b"), query)
    # the judge saw "s" first unless the order coin flipped it
    expected = Verdict.LOSS if seeded_coin(0, "q1", "s", "b") else Verdict.WIN
    assert j.verdicts() == [expected] * 4
    assert judge.requests_sent == 3 and len(sleeps) == 2


def test_retry_exhaustion_errors(query):
    judge, _ = _api(lambda r: httpx.Response(200, json={"text": "I refuse"}))
    with pytest.raises(UnparseableVerdict):
        judge.pairwise(Response("q1", "x", "s"), Response("q1", "y", "b"), query)
    judge, _ = _api(lambda r: httpx.Response(503))
    with pytest.raises(JudgeUnavailable):
        judge.pairwise(Response("q1", "x", "s"), Response("q1", "y", "b"), query)

    def boom(request):
        raise httpx.ConnectError("refused", request=request)

    judge, _ = _api(boom)
    with pytest.raises(JudgeUnavailable):
        judge.pairwise(Response("q1", "x", "s"), Response("q1", "y", "b"), query)
    assert judge.requests_sent == 3


def test_client_error_is_not_retried(query):
    judge, _ = _api(lambda r: httpx.Response(401))
    with pytest.raises(JudgeUnavailable):
        judge.pairwise(Response("q1", "x", "s"), Response("q1", "y", "b"), query)
    assert judge.requests_sent == 1


def test_cache_hit_skips_network(tmp_path, query):
    judge, _ = _api(_prefers_good, tmp_path)
    a, b = Response("q1", "GOOD", "s"), Response("q1", "bad", "b")
    first = judge.pairwise(a, b, query)
    assert first.template_id == template_digest("pairwise-v1")

    def no_network(request):
        raise AssertionError("network used on a cache hit")

    warm, _ = _api(no_network, tmp_path)
    assert warm.pairwise(a, b, query) == first
    assert warm.requests_sent == 0


def test_api_credentials_sent_but_not_logged(monkeypatch, caplog, query):
    monkeypatch.setenv("JUDGE_API_KEY", "sk-secret-123")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"text": "garbage"})

    judge, _ = _api(handler)
    with caplog.at_level("DEBUG"), pytest.raises(UnparseableVerdict):
        judge.pairwise(Response("q1", "x", "s"), Response("q1", "y", "b"), query)
    assert seen["auth"] == "Bearer sk-secret-123"
    assert "sk-secret-123" not in caplog.text


def test_openai_style_reply_and_absolute_and_consistency(query):
    def handler(request):
        prompt = _prompt(request)
        if "integer scale" in prompt:
            text = "VERDICT: {Proactiveness: 4, Accuracy: 5, Usefulness: 3, Language: 5}"
        elif "semantically consistent" in prompt:
            text = 'VERDICT: {"consistent": "yes"}'
        else:
            text = VERDICT_WIN_ALL
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})

    judge, _ = _api(handler)
    j = judge.absolute(Response("q1", "x", "s"), query)
    assert j.verdicts() == [4, 5, 3, 5] and j.mode is Mode.ABSOLUTE
    assert judge.consistency(Response("q1", "x", "s"), "ref answer", query) is True


def test_parse_verdict_block_variants():
    pairs = parse_verdict_block("```\nverdict: {PROACTIVENESS: Win, 'accuracy': 'tie'}\n```")
    assert pairs == {"proactiveness": "win", "accuracy": "tie"}
    with pytest.raises(UnparseableVerdict):
        parse_verdict_block("The first one is better.")


# --- dispatch --------------------------------------------------------------


def test_dispatch_preserves_input_order():
    tasks = [PairwiseTask(resp(f"s{i}", (i % 10) / 10), resp("b", 0.45)) for i in range(100)]
    out = dispatch_judgments(tasks, SimJudge(), max_in_flight=8)
    assert [j.subject for j in out] == [f"s{i}" for i in range(100)]


def test_dispatch_isolates_failures():
    class Flaky:
        judge_id = "flaky"

        def pairwise(self, a, b, query=None):
            if a.producer == "s2":
                raise JudgeUnavailable("down")
            return SimJudge().pairwise(a, b)

    tasks = [PairwiseTask(resp(f"s{i}", 0.5), resp("b", 0.4)) for i in (1, 2, 3)]
    out = dispatch_judgments(tasks, Flaky(), max_in_flight=3)
    assert isinstance(out[0], Judgment) and isinstance(out[2], Judgment)
    assert isinstance(out[1], JudgeUnavailable)


def test_dispatch_empty_and_bound():
    assert dispatch_judgments([], SimJudge(), 4) == []
    with pytest.raises(ValueError):
        dispatch_judgments([], SimJudge(), 0)

    class Slow:
        judge_id = "slow"
        active = peak = 0
        lock = threading.Lock()

        def pairwise(self, a, b, query=None):
            with self.lock:
                Slow.active += 1
                Slow.peak = max(Slow.peak, Slow.active)
            time.sleep(0.005)
            with self.lock:
                Slow.active -= 1
            return SimJudge().pairwise(a, b)

    tasks = [PairwiseTask(resp(f"s{i}", 0.5), resp("b", 0.4)) for i in range(40)]
    dispatch_judgments(tasks, Slow(), max_in_flight=3)
    assert 1 <= Slow.peak <= 3
