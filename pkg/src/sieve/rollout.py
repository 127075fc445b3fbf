"""Multi-turn generation state machine with evidence insertion.

The assembled context is always: vision block, prompt text, then the turns
in temporal order, each turn's generated text optionally followed by an
inserted evidence span (open marker, raw snapshot vectors, close marker).
Snapshot vectors enter the sequence as input embeddings directly, bypassing
the token-embedding table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grounding import EvidenceSnapshot, build_prompt_inputs
from .model import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    EVIDENCE_CLOSE,
    EVIDENCE_OPEN,
    INSERT_EVIDENCE,
    Model,
    THINK_CLOSE,
    THINK_OPEN,
    detokenize,
    embed_tokens,
    full_logits,
    sample_next_token,
)
from .numerics import RngStream, log_softmax, seed_stream

ACTION_ANSWER = "answer"
ACTION_INSERT = "insert-evidence"
ACTION_CONTINUE = "continue"

DEFAULT_PER_TURN_BUDGET = 64
DEFAULT_MAX_TURNS = 4

# Placeholder id for raw embedding positions (not tokens).
EMBEDDING_SLOT = -1


@dataclass(frozen=True)
class SamplerParams:
    temperature: float = 1.0
    seed: int = 0
    per_turn_budget: int = DEFAULT_PER_TURN_BUDGET
    script: tuple[int, ...] | None = None   # forced token ids, for tests


@dataclass
class Turn:
    text_ids: list[int] = field(default_factory=list)
    snapshot: EvidenceSnapshot | None = None
    insertion_failed: bool = False


@dataclass
class RolloutState:
    model: Model
    inputs: np.ndarray                 # current assembled embedding sequence
    ids: list[int]                     # token ids; EMBEDDING_SLOT for raw vectors
    turns: list[Turn] = field(default_factory=list)
    gen_positions: list[int] = field(default_factory=list)
    gen_ids: list[int] = field(default_factory=list)
    old_logprobs: list[float] = field(default_factory=list)
    rng: RngStream = field(default_factory=lambda: seed_stream(0))
    script_cursor: int = 0
    out_of_capacity: bool = False

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Trajectory:
    turns: list[Turn]
    final_answer: str | None
    insertion_count: int
    terminated_by: str                 # "answer" | "horizon"
    think_token_count: int
    failed_insertions: int
    model_version: int
    inputs: np.ndarray                 # final assembled sequence (for updates)
    gen_positions: list[int]
    gen_ids: list[int]
    old_logprobs: list[float]


def new_state(model: Model, image, prompt: str, rng: RngStream) -> RolloutState:
    inputs, stream, _ = build_prompt_inputs(model, image, prompt)
    return RolloutState(
        model=model, inputs=inputs, ids=list(int(i) for i in stream.ids), rng=rng
    )


def _append_tokens(state: RolloutState, ids: list[int]) -> None:
    positions = list(range(state.length, state.length + len(ids)))
    emb = embed_tokens(ids, positions, state.model)
    state.inputs = np.vstack([state.inputs, emb])
    state.ids.extend(int(i) for i in ids)


def _next_token(state: RolloutState, sampler: SamplerParams) -> int | None:
    """Sample (or script) one token and record its log-prob; None when the
    sequence is at capacity."""
    if state.length + 1 > state.model.config.max_seq:
        state.out_of_capacity = True
        return None
    logits = full_logits(state.model, state.inputs)[-1]
    if sampler.script is not None:
        if state.script_cursor >= len(sampler.script):
            return None
        token = int(sampler.script[state.script_cursor])
        state.script_cursor += 1
    else:
        token, state.rng = sample_next_token(logits, sampler.temperature, state.rng)
    tau = sampler.temperature if sampler.temperature > 0 else 1.0
    logprob = float(log_softmax(logits, tau=tau)[token])
    position = state.length  # the slot the token will occupy
    _append_tokens(state, [token])
    state.gen_positions.append(position)
    state.gen_ids.append(token)
    state.old_logprobs.append(logprob)
    return token


def step(state: RolloutState, sampler: SamplerParams) -> str:
    """Generate one turn of text; returns the action that ended it."""
    vocab = state.model.config.vocab
    insert_id = vocab[INSERT_EVIDENCE]
    open_id = vocab[ANSWER_OPEN]
    close_id = vocab[ANSWER_CLOSE]

    turn = Turn()
    state.turns.append(turn)
    answered_open = False
    for _ in range(sampler.per_turn_budget):
        token = _next_token(state, sampler)
        if token is None:
            return ACTION_CONTINUE
        turn.text_ids.append(token)
        if token == insert_id:
            return ACTION_INSERT
        if token == open_id:
            answered_open = True
        elif token == close_id and answered_open:
            return ACTION_ANSWER
    return ACTION_CONTINUE


def apply_insertion(state: RolloutState, snapshot: EvidenceSnapshot | None) -> None:
    """Splice `<evidence> [vectors] </evidence>` into the live sequence.

    A missing snapshot degrades to the marker pair alone and records a
    failed insertion (penalized through the format reward).
    """
    vocab = state.model.config.vocab
    turn = state.turns[-1]
    n_vec = 0 if snapshot is None else snapshot.embeddings.shape[0]
    if state.length + n_vec + 2 > state.model.config.max_seq:
        state.out_of_capacity = True
        return
    _append_tokens(state, [vocab[EVIDENCE_OPEN]])
    if snapshot is None:
        turn.insertion_failed = True
    else:
        vectors = np.asarray(snapshot.embeddings, dtype=np.float64)
        state.inputs = np.vstack([state.inputs, vectors])
        state.ids.extend([EMBEDDING_SLOT] * n_vec)
        turn.snapshot = snapshot
    _append_tokens(state, [vocab[EVIDENCE_CLOSE]])


def _extract_answer(turn: Turn, model: Model) -> str | None:
    rev = model.config.id_to_token()
    toks = [rev[i] for i in turn.text_ids]
    try:
        start = toks.index(ANSWER_OPEN)
        end = toks.index(ANSWER_CLOSE, start + 1)
    except ValueError:
        return None
    return " ".join(toks[start + 1 : end])


def _count_think_tokens(turns: list[Turn], model: Model) -> int:
    rev = model.config.id_to_token()
    count = 0
    for turn in turns:
        inside = False
        for tok_id in turn.text_ids:
            tok = rev[tok_id]
            if tok == THINK_OPEN:
                inside = True
            elif tok == THINK_CLOSE:
                inside = False
            elif inside:
                count += 1
    return count


def run_rollout(
    model: Model,
    sample,
    cache,
    max_turns: int = DEFAULT_MAX_TURNS,
    sampler: SamplerParams | None = None,
    rng: RngStream | None = None,
) -> Trajectory:
    """Iterate step / apply_insertion until an answer or the turn horizon."""
    sampler = sampler or SamplerParams()
    if rng is None:
        rng = seed_stream(sampler.seed).split(f"rollout:{sample.sample_id}")
    state = new_state(model, sample.image, sample.question, rng)

    final_answer = None
    terminated_by = "horizon"
    for _ in range(max_turns):
        action = step(state, sampler)
        if action == ACTION_ANSWER:
            final_answer = _extract_answer(state.turns[-1], model)
            terminated_by = "answer"
            break
        if action == ACTION_INSERT:
            entry = cache.lookup(sample.sample_id) if cache is not None else None
            snapshot = None
            if entry is not None and entry.snapshots:
                snapshot = entry.snapshots[0]  # highest-saliency anchor first
            apply_insertion(state, snapshot)
        if state.out_of_capacity:
            break

    insertion_count = sum(1 for t in state.turns if t.snapshot is not None)
    failed = sum(1 for t in state.turns if t.insertion_failed)
    return Trajectory(
        turns=state.turns,
        final_answer=final_answer,
        insertion_count=insertion_count,
        terminated_by=terminated_by,
        think_token_count=_count_think_tokens(state.turns, model),
        failed_insertions=failed,
        model_version=model.version,
        inputs=state.inputs,
        gen_positions=state.gen_positions,
        gen_ids=state.gen_ids,
        old_logprobs=state.old_logprobs,
    )


def dump_trajectory(traj: Trajectory, model: Model, fh) -> None:
    """One JSON line per turn, plus a termination record."""
    for i, turn in enumerate(traj.turns):
        meta = None
        if turn.snapshot is not None:
            meta = {
                "anchor": list(turn.snapshot.anchor),
                "bbox_patches": list(turn.snapshot.region.bbox_patches),
            }
        fh.write(
            json.dumps(
                {
                    "turn": i,
                    "token_ids": list(turn.text_ids),
                    "text": detokenize(turn.text_ids, model.config),
                    "insertion": meta,
                    "insertion_failed": turn.insertion_failed,
                }
            )
            + "\n"
        )
    fh.write(
        json.dumps(
            {
                "terminated_by": traj.terminated_by,
                "final_answer": traj.final_answer,
                "insertion_count": traj.insertion_count,
                "think_token_count": traj.think_token_count,
                "model_version": traj.model_version,
            }
        )
        + "\n"
    )


def dump_trajectories(trajectories, model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name("." + path.name + ".tmp")
    with open(tmp, "w") as fh:
        for traj in trajectories:
            dump_trajectory(traj, model, fh)
    tmp.replace(path)
