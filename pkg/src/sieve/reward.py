"""Trajectory reward (four binary components, weighted sum) and
group-relative advantages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    INSERT_EVIDENCE,
    THINK_CLOSE,
    THINK_OPEN,
)

ADVANTAGE_EPS = 1e-6
DEFAULT_MIN_THINK = 8


@dataclass(frozen=True)
class RewardWeights:
    result: float = 0.6
    format: float = 0.3
    embedding: float = 0.5
    action: float = 0.2


@dataclass
class RewardBreakdown:
    r_res: int
    r_format: int
    r_emb: int
    r_act: int
    total: float

    def to_dict(self) -> dict:
        return {
            "r_res": self.r_res,
            "r_format": self.r_format,
            "r_emb": self.r_emb,
            "r_act": self.r_act,
            "total": self.total,
        }


@dataclass(frozen=True)
class ActParams:
    min_think: int = DEFAULT_MIN_THINK
    require_both: bool = True   # AND of length and commit clauses (else OR)
    enabled: bool = True


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def _turn_tokens(turn, rev: dict[int, str]) -> list[str]:
    return [rev[int(i)] for i in turn.text_ids]


def _well_formed_turn(tokens: list[str], is_last: bool) -> bool:
    """A turn must be `<think> ... </think>` optionally followed by either a
    closed answer span (last turn only) or the insertion trigger."""
    if not tokens or tokens[0] != THINK_OPEN:
        return False
    try:
        close = tokens.index(THINK_CLOSE)
    except ValueError:
        return False
    body = tokens[close + 1 :]
    if any(t in (THINK_OPEN, THINK_CLOSE) for t in body):
        return False
    if not body:
        return True
    if body[0] == INSERT_EVIDENCE:
        return len(body) == 1
    if body[0] == ANSWER_OPEN:
        return is_last and len(body) >= 2 and body[-1] == ANSWER_CLOSE
    return False


def format_ok(traj, rev: dict[int, str]) -> bool:
    if not traj.turns or traj.failed_insertions > 0:
        return False
    if traj.terminated_by != "answer" or traj.final_answer is None:
        return False
    n = len(traj.turns)
    for i, turn in enumerate(traj.turns):
        if not _well_formed_turn(_turn_tokens(turn, rev), is_last=(i == n - 1)):
            return False
    if n > 1 and traj.insertion_count < 1:
        return False
    return True


def score_trajectory(
    traj,
    gold_answer: str,
    rev: dict[int, str],
    weights: RewardWeights | None = None,
    act_params: ActParams | None = None,
) -> RewardBreakdown:
    """Binary components per the trajectory reward: result, format,
    embedding (gated on a correct answer plus at least one insertion), and
    action (adequate think length plus a committed action)."""
    weights = weights or RewardWeights()
    act = act_params or ActParams()

    r_res = int(
        traj.final_answer is not None
        and normalize_answer(traj.final_answer) == normalize_answer(gold_answer)
    )
    r_format = int(format_ok(traj, rev))
    r_emb = int(r_res == 1 and traj.insertion_count >= 1)

    committed = traj.terminated_by == "answer" or traj.insertion_count >= 1
    long_enough = traj.think_token_count >= act.min_think
    if not act.enabled:
        r_act = 0
    elif act.require_both:
        r_act = int(long_enough and committed)
    else:
        r_act = int(long_enough or committed)

    total = (
        weights.result * r_res
        + weights.format * r_format
        + weights.embedding * r_emb
        + weights.action * r_act
    )
    return RewardBreakdown(r_res, r_format, r_emb, r_act, total)


def grpo_advantages(rewards) -> np.ndarray:
    """(r - mean) / (population std + eps) over one group."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ConfigurationError(f"group size must be >= 2, got {rewards.size}")
    return (rewards - rewards.mean()) / (rewards.std() + ADVANTAGE_EPS)
