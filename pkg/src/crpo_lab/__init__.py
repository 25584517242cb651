"""Comparison-based policy optimization with pairwise multi-dimension judging."""

from .core import (
    DIMENSIONS,
    AdvantageVector,
    CandidateSet,
    ComparisonMatrix,
    ConsultationQuery,
    Counterpart,
    CounterpartRoster,
    Dimension,
    EvalReport,
    Judgment,
    Mode,
    Response,
    RewardVector,
    Verdict,
)
from .judging import ApiJudge, ApiJudgeConfig, SimJudge, SimJudgeConfig, dispatch_judgments
from .optimizer import OptimizerConfig, ToyPolicy, compute_advantages, train
from .reward import RewardMode, absolute_reward, aggregate_reward, build_comparison_matrix
from .toy import GoldProblem, make_gold_problem

__version__ = "0.1.0"
