"""Group-relative policy optimization over a toy single-action policy.

Each query owns K response templates; the policy is a logit vector per
query and a "generation" is one categorical draw. Because every candidate is
a single action, the sequence-level and token-level forms of the clipped
surrogate coincide, which keeps the analytic gradient short enough to check
against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    AdvantageVector,
    CandidateSet,
    ConsultationQuery,
    CounterpartRoster,
    Response,
    RewardVector,
)
from .errors import CrpoLabError, GroupTooSmall, NonFiniteLoss, UnknownQuery
from .judging import Judge
from .reward import RewardMode, absolute_reward, aggregate_reward, build_comparison_matrix

logger = logging.getLogger(__name__)

RewardFn = Callable[[CandidateSet, ConsultationQuery], RewardVector]


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    templates: Mapping[str, tuple[Response, ...]]
    logits: Mapping[str, np.ndarray]
    temperature: float = 1.0
    version: str = "init"

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        frozen = {}
        for qid, z in self.logits.items():
            if qid not in self.templates:
                raise UnknownQuery(qid)
            arr = np.array(z, dtype=np.float64)
            if arr.shape != (len(self.templates[qid]),):
                raise ValueError(f"logits for {qid!r} do not match its template count")
            arr.setflags(write=False)
            frozen[qid] = arr
        if set(frozen) != set(self.templates):
            raise ValueError("every template set needs a logit vector")
        object.__setattr__(self, "logits", frozen)

    @classmethod
    def uniform(cls, templates: Mapping[str, Sequence[Response]], temperature: float = 1.0):
        templates = {qid: tuple(ts) for qid, ts in templates.items()}
        return cls(templates, {qid: np.zeros(len(ts)) for qid, ts in templates.items()}, temperature)

    def _z(self, query_id: str) -> np.ndarray:
        try:
            return self.logits[query_id]
        except KeyError:
            raise UnknownQuery(query_id) from None

    def logprobs(self, query_id: str) -> np.ndarray:
        z = self._z(query_id) / self.temperature
        return z - logsumexp(z)

    def probs(self, query_id: str) -> np.ndarray:
        return np.exp(self.logprobs(query_id))

    def with_logits(self, logits: Mapping[str, np.ndarray], version: str) -> "ToyPolicy":
        return replace(self, logits=dict(logits), version=version)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ToyPolicy):
            return NotImplemented
        return (
            self.temperature == other.temperature
            and self.logits.keys() == other.logits.keys()
            and all(np.array_equal(z, other.logits[q]) for q, z in self.logits.items())
        )

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "temperature": self.temperature,
            "logits": {qid: z.tolist() for qid, z in sorted(self.logits.items())},
        }


def kl_divergence(p_logprobs: np.ndarray, q_logprobs: np.ndarray) -> float:
    """Exact KL(p || q) between two categorical distributions given log-probs."""
    return float(np.sum(np.exp(p_logprobs) * (p_logprobs - q_logprobs)))


@dataclass(frozen=True)
class OptimizerConfig:
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_coeff: float = 0.01
    learning_rate: float = 0.1
    std_floor: float = 1e-8
    steps: int = 100
    seed: int = 0
    # gradient steps per sampled group; 1 keeps old policy == current policy
    epochs_per_group: int = 1
    max_grad_norm: float | None = 1.0
    tie_credit: float = 0.0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise GroupTooSmall("group_size must be >= 2")
        if self.clip_epsilon <= 0 or self.learning_rate <= 0:
            raise ValueError("clip_epsilon and learning_rate must be positive")
        if self.kl_coeff < 0 or self.std_floor < 0 or self.steps < 0:
            raise ValueError("kl_coeff, std_floor and steps must be non-negative")
        if self.epochs_per_group < 1:
            raise ValueError("epochs_per_group must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    step: int
    query_id: str
    rewards: RewardVector
    advantages: AdvantageVector
    loss: float
    kl: float
    grad_norm: float
    reward_mode: str = RewardMode.CRPO.value

    def __post_init__(self) -> None:
        for name in ("loss", "kl", "grad_norm"):
            if not math.isfinite(getattr(self, name)):
                raise NonFiniteLoss(f"{name} is not finite at step {self.step}")

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "query_id": self.query_id,
            "reward_mode": self.reward_mode,
            "rewards": list(self.rewards.rewards),
            "advantages": list(self.advantages.advantages),
            "loss": self.loss,
            "kl": self.kl,
            "grad_norm": self.grad_norm,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "StepRecord":
        qid = str(raw["query_id"])
        return cls(
            step=int(raw["step"]),
            query_id=qid,
            rewards=RewardVector(qid, tuple(raw["rewards"])),
            advantages=AdvantageVector(qid, tuple(raw["advantages"])),
            loss=float(raw["loss"]),
            kl=float(raw["kl"]),
            grad_norm=float(raw["grad_norm"]),
            reward_mode=str(raw.get("reward_mode", RewardMode.CRPO.value)),
        )


class TrainingStepError(CrpoLabError):
    def __init__(self, step: int, query_id: str, cause: Exception):
        super().__init__(f"step {step}, query {query_id!r}: {type(cause).__name__}: {cause}")
        self.step = step
        self.query_id = query_id


def sample_group(
    policy: ToyPolicy,
    query: ConsultationQuery,
    G: int,
    seed: int | np.random.SeedSequence | np.random.Generator,
    tag: str = "",
) -> CandidateSet:
    """Draw G templates i.i.d. from ``softmax(logits / temperature)``.

    Each candidate's producer name encodes the policy version, slot and
    template index, so every draw is a distinct producer to the judge.
    """
    if G < 2:
        raise GroupTooSmall("G must be >= 2")
    logp = policy.logprobs(query.id)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = np.exp(logp)
    idx = rng.choice(len(p), size=G, p=p / p.sum())
    templates = policy.templates[query.id]
    prefix = f"policy:{policy.version}{tag}"
    candidates = tuple(
        Response(query.id, templates[k].text, f"{prefix}:g{g}:t{k}", templates[k].latent_quality)
        for g, k in enumerate(idx)
    )
    return CandidateSet(
        query.id,
        candidates,
        policy_version=policy.version,
        indices=tuple(int(k) for k in idx),
        logprobs=tuple(float(logp[k]) for k in idx),
    )


def compute_advantages(rewards: RewardVector, std_floor: float = 1e-8) -> AdvantageVector:
    """``A_g = (R_g - mean(R)) / max(popstd(R), std_floor)``; all zero when rewards tie."""
    r = np.asarray(rewards.rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall("advantages need a group of at least 2")
    if r.max() == r.min():
        return AdvantageVector(rewards.query_id, (0.0,) * r.size)
    centered = r - r.mean()
    std = float(np.sqrt(np.mean(centered**2)))
    return AdvantageVector(rewards.query_id, tuple(centered / max(std, std_floor)))


def surrogate_loss(
    logits: np.ndarray,
    indices: Sequence[int],
    advantages: Sequence[float],
    old_logprobs: Sequence[float],
    ref_logprobs: Sequence[float],
    clip_epsilon: float = 0.2,
    kl_coeff: float = 0.01,
    temperature: float = 1.0,
) -> tuple[float, float, np.ndarray]:
    """Clipped surrogate plus KL penalty, with its gradient w.r.t. ``logits``.

    loss = -mean_g min(rho_g A_g, clip(rho_g, 1-eps, 1+eps) A_g) + beta * KL,
    where rho_g = exp(logp_g - old_g) and KL is the mean of
    exp(ref_g - logp_g) - (ref_g - logp_g) - 1.
    """
    z = np.asarray(logits, dtype=np.float64) / temperature
    logp_all = z - logsumexp(z)
    probs = np.exp(logp_all)
    idx = np.asarray(indices, dtype=np.int64)
    adv = np.asarray(advantages, dtype=np.float64)
    old = np.asarray(old_logprobs, dtype=np.float64)
    ref = np.asarray(ref_logprobs, dtype=np.float64)

    logp = logp_all[idx]
    with np.errstate(over="ignore", invalid="ignore"):
        return _surrogate_terms(logp, probs, idx, adv, old, ref, clip_epsilon, kl_coeff, temperature)


def _surrogate_terms(logp, probs, idx, adv, old, ref, clip_epsilon, kl_coeff, temperature):
    G = idx.size
    ratio = np.exp(logp - old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv
    surrogate = np.minimum(unclipped, clipped)
    log_ref_ratio = ref - logp
    kl_terms = np.exp(log_ref_ratio) - log_ref_ratio - 1.0
    kl = float(kl_terms.mean())
    loss = float(-surrogate.mean() + kl_coeff * kl)
    if not (math.isfinite(loss) and math.isfinite(kl)):
        raise NonFiniteLoss(f"loss={loss}, kl={kl}")

    # d surrogate / d rho is A on the unclipped branch, 0 where the clip binds
    dsurr_dratio = np.where(unclipped <= clipped, adv, 0.0)
    dloss_dlogp = (-dsurr_dratio * ratio + kl_coeff * (1.0 - np.exp(log_ref_ratio))) / G
    # d logp_k / d z = (onehot_k - probs) / T
    grad = -dloss_dlogp.sum() * probs
    np.add.at(grad, idx, dloss_dlogp)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLoss("gradient is not finite")
    return loss, kl, grad / temperature


def crpo_loss(
    group: CandidateSet,
    advantages: AdvantageVector,
    old_logprobs: Sequence[float],
    ref_logprobs: Sequence[float],
    cfg: OptimizerConfig,
    policy: ToyPolicy,
) -> tuple[float, float]:
    """Loss and KL for ``group`` under the live ``policy``."""
    loss, kl, _ = surrogate_loss(
        policy.logits[group.query_id],
        group.indices,
        advantages.advantages,
        old_logprobs,
        ref_logprobs,
        cfg.clip_epsilon,
        cfg.kl_coeff,
        policy.temperature,
    )
    return loss, kl


def finite_difference_gradient(
    loss_fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        f_plus = loss_fn(x.copy())
        x[i] = orig - h
        f_minus = loss_fn(x.copy())
        x[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def _rewards_for(
    group: CandidateSet,
    query: ConsultationQuery,
    reward_mode: RewardMode | RewardFn,
    roster: CounterpartRoster | None,
    judge: Judge | None,
    counterpart_responses,
    cfg: OptimizerConfig,
    max_in_flight: int,
) -> RewardVector:
    if callable(reward_mode) and not isinstance(reward_mode, RewardMode):
        return reward_mode(group, query)
    if reward_mode is RewardMode.CRPO:
        if roster is None:
            raise ValueError("comparison rewards need a counterpart roster")
        matrix = build_comparison_matrix(
            group, roster, judge, counterpart_responses, query, max_in_flight
        )
        return aggregate_reward(matrix, cfg.tie_credit)
    return absolute_reward(group, judge, query)


def train(
    policy: ToyPolicy,
    queries: Iterable[ConsultationQuery],
    roster: CounterpartRoster | None,
    reward_mode: RewardMode | str | RewardFn,
    judge: Judge | None,
    cfg: OptimizerConfig,
    counterpart_responses: Mapping[tuple[int, str], Response] | None = None,
    max_in_flight: int = 1,
    on_step: Callable[[StepRecord], None] | None = None,
) -> tuple[ToyPolicy, list[StepRecord]]:
    """Run ``cfg.steps`` rounds of sample -> reward -> advantage -> update.

    Every round visits each query once. The reference policy is the input
    policy, frozen; the old policy is the live one at sampling time.
    ``reward_mode`` may also be any callable returning a RewardVector.
    """
    if isinstance(reward_mode, str):
        reward_mode = RewardMode(reward_mode)
    mode_tag = reward_mode.value if isinstance(reward_mode, RewardMode) else "custom"
    queries = list(queries)
    reference = policy
    records: list[StepRecord] = []
    for step in range(cfg.steps):
        new_logits = dict(policy.logits)
        for qi, query in enumerate(queries):
            try:
                rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, qi]))
                group = sample_group(policy, query, cfg.group_size, rng, tag=f"@{step}")
                rewards = _rewards_for(
                    group, query, reward_mode, roster, judge, counterpart_responses, cfg,
                    max_in_flight,
                )
                advantages = compute_advantages(rewards, cfg.std_floor)
                ref_lp = reference.logprobs(query.id)[list(group.indices)]
                z = policy.logits[query.id].copy()
                for _ in range(cfg.epochs_per_group):
                    loss, kl, grad = surrogate_loss(
                        z, group.indices, advantages.advantages, group.logprobs, ref_lp,
                        cfg.clip_epsilon, cfg.kl_coeff, policy.temperature,
                    )
                    grad_norm = float(np.linalg.norm(grad))
                    if cfg.max_grad_norm is not None and grad_norm > cfg.max_grad_norm:
                        grad = grad * (cfg.max_grad_norm / grad_norm)
                    z = z - cfg.learning_rate * grad
                new_logits[query.id] = z
                record = StepRecord(
                    step, query.id, rewards, advantages, loss, kl, grad_norm, mode_tag
                )
            except CrpoLabError as exc:
                raise TrainingStepError(step, query.id, exc) from exc
            records.append(record)
            if on_step is not None:
                on_step(record)
        policy = policy.with_logits(new_logits, version=f"step-{step + 1}")
    return policy, records
