"""GRPO-lite policy-gradient loop: group rollouts, trajectory rewards,
group-relative advantages, clipped surrogate update, and failure-triggered
evidence refresh.

A short behavior-cloning warm start precedes RL: a randomly initialized
toy policy emits no well-formed protocol turns, so strict-format rewards
would never fire and every group would have zero advantage. The warm start
puts probability mass on the turn protocol; RL then sharpens it.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import EvidenceCache, refresh_triggered
from .grounding import DiscoveryParams, discover_evidence
from .model import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    COLORS,
    EVIDENCE_CLOSE,
    EVIDENCE_OPEN,
    INSERT_EVIDENCE,
    Model,
    THINK_CLOSE,
    THINK_OPEN,
    backward_from_logits,
    embed_tokens,
    full_logits,
)
from .numerics import RngStream, log_softmax, seed_stream, stable_softmax
from .reward import ActParams, RewardWeights, grpo_advantages, score_trajectory
from .rollout import EMBEDDING_SLOT, SamplerParams, Trajectory, new_state, run_rollout

log = logging.getLogger("sieve")

METRIC_COLUMNS = (
    "step", "mean_reward", "mean_len", "max_len", "insertion_rate", "refreshes"
)


@dataclass(frozen=True)
class TrainConfig:
    prompts_per_batch: int = 16
    group_size: int = 8
    steps: int = 60
    learning_rate: float = 1e-3
    clip_eps: float = 0.2
    kl_coeff: float = 0.0
    seed: int = 0
    momentum: float = 0.9
    max_turns: int = 4
    temperature: float = 1.0
    per_turn_budget: int = 64
    min_think: int = 8
    act_enabled: bool = True
    warmup_steps: int = 0
    warmup_lr: float = 0.05
    refresh_period: int = 0            # 0 = failure-triggered only

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.kl_coeff < 0:
            raise ValueError(f"kl_coeff must be >= 0, got {self.kl_coeff}")


def generate_group(
    model: Model,
    sample,
    cache: EvidenceCache,
    group_size: int,
    sampler: SamplerParams,
    rng: RngStream,
    max_turns: int,
) -> list[Trajectory]:
    """Independent rollouts with pre-split rng streams; log-probs are
    recorded per generated text token (inserted vectors carry none)."""
    return [
        run_rollout(
            model, sample, cache, max_turns, sampler,
            rng=rng.split(f"member{i}"),
        )
        for i in range(group_size)
    ]


def _apply_sgd(
    model: Model,
    grads: dict[str, np.ndarray],
    momentum_state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    for name, grad in grads.items():
        buf = momentum_state.get(name)
        buf = grad if buf is None else momentum * buf + grad
        momentum_state[name] = buf
        model.params[name] = model.params[name] - lr * buf


def _accumulate_embedding_grads(
    grads: dict[str, np.ndarray],
    input_grads: np.ndarray,
    ids: list[int],
    n_vision: int,
    model: Model,
) -> None:
    """Route input-embedding gradients into the token and position tables.

    Vision positions and raw evidence slots are treated as constants: the
    policy loss trains text embeddings and the transformer stack.
    """
    tok = grads.setdefault("tok_emb", np.zeros_like(model.params["tok_emb"]))
    pos = grads.setdefault("pos_emb", np.zeros_like(model.params["pos_emb"]))
    for position, tok_id in enumerate(ids):
        if position < n_vision or tok_id == EMBEDDING_SLOT:
            continue
        tok[tok_id] += input_grads[position]
        pos[position] += input_grads[position]


def _trajectory_ids(traj: Trajectory, model: Model) -> tuple[list[int], int]:
    """Reconstruct per-position token ids (EMBEDDING_SLOT for raw vectors)
    from the generated-position record; prompt positions are unused by the
    update, so non-generated text slots are also marked as slots."""
    ids = [EMBEDDING_SLOT] * traj.inputs.shape[0]
    for position, tok_id in zip(traj.gen_positions, traj.gen_ids):
        ids[position] = tok_id
    return ids, model.config.n_patches


def policy_update(
    model: Model,
    trajectories: list[Trajectory],
    advantages: np.ndarray,
    config: TrainConfig,
    momentum_state: dict[str, np.ndarray] | None = None,
) -> Model:
    """One gradient step on the token-level clipped surrogate; the
    advantage is broadcast uniformly over each trajectory's tokens."""
    if momentum_state is None:
        momentum_state = {}
    total_tokens = sum(len(t.gen_positions) for t in trajectories)
    if total_tokens == 0:
        model.version += 1
        return model
    for traj in trajectories:
        if traj.model_version != model.version:
            raise RuntimeError(
                f"trajectory from model version {traj.model_version} used "
                f"against version {model.version}"
            )

    tau = config.temperature if config.temperature > 0 else 1.0
    accum: dict[str, np.ndarray] = {}
    for traj, advantage in zip(trajectories, advantages):
        if not traj.gen_positions:
            continue
        logits = full_logits(model, traj.inputs)
        d_logits = np.zeros_like(logits)
        for position, tok_id, old_lp in zip(
            traj.gen_positions, traj.gen_ids, traj.old_logprobs
        ):
            row = logits[position - 1]
            probs = stable_softmax(row, tau=tau)
            new_lp = float(log_softmax(row, tau=tau)[tok_id])
            ratio = float(np.exp(new_lp - old_lp))
            clipped = float(np.clip(ratio, 1 - config.clip_eps, 1 + config.clip_eps))
            d_obj_d_lp = ratio * advantage if ratio * advantage <= clipped * advantage else 0.0
            d_lp = -d_obj_d_lp / total_tokens
            if config.kl_coeff > 0:
                # k1 estimator of KL(new || old); gradient d/d_lp = 1
                d_lp += config.kl_coeff / total_tokens
            onehot = np.zeros_like(row)
            onehot[tok_id] = 1.0
            d_logits[position - 1] += d_lp * (onehot - probs) / tau
        param_grads, input_grads = backward_from_logits(model, traj.inputs, d_logits)
        ids, n_vision = _trajectory_ids(traj, model)
        _accumulate_embedding_grads(param_grads, input_grads, ids, n_vision, model)
        for name, grad in param_grads.items():
            accum[name] = accum.get(name, 0.0) + grad

    if any(not np.all(np.isfinite(g)) for g in accum.values()):
        log.warning("non-finite gradient at version %d; step skipped", model.version)
    else:
        _apply_sgd(model, accum, momentum_state, config.learning_rate, config.momentum)
    model.version += 1
    return model


# ---------------------------------------------------------------------------
# behavior-cloning warm start
# ---------------------------------------------------------------------------

def _warmup_script(vocab: dict[str, int], answer: str, with_insert: bool) -> list[list[int]]:
    """Target token segments for one demonstration; segments after the first
    are separated by an evidence insertion."""
    think = "i see the shape look find it check region".split()
    think2 = "this is the region i see it there check".split()
    first = [THINK_OPEN, *think, THINK_CLOSE]
    answer_span = [ANSWER_OPEN, answer, ANSWER_CLOSE]
    if not with_insert:
        return [[vocab[t] for t in first + answer_span]]
    second = [THINK_OPEN, *think2, THINK_CLOSE, *answer_span]
    return [
        [vocab[t] for t in first + [INSERT_EVIDENCE]],
        [vocab[t] for t in second],
    ]


def warmup(
    model: Model,
    dataset,
    cache: EvidenceCache,
    config: TrainConfig,
    rng: RngStream,
    momentum_state: dict[str, np.ndarray] | None = None,
) -> Model:
    """Cross-entropy cloning of scripted protocol demonstrations (with the
    sample's gold answer), alternating direct-answer and insert-then-answer
    turns."""
    if momentum_state is None:
        momentum_state = {}
    vocab = model.config.vocab
    for it in range(config.warmup_steps):
        idx, rng = rng.integers(0, len(dataset))
        sample = dataset[int(idx)]
        state = new_state(model, sample.image, sample.question, rng.split(f"warmup{it}"))
        with_insert = it % 2 == 1
        segments = _warmup_script(vocab, sample.gold_answer, with_insert)

        target_positions: list[int] = []
        target_ids: list[int] = []
        for seg_i, segment in enumerate(segments):
            if seg_i > 0:
                entry = cache.lookup(sample.sample_id)
                snapshot = entry.snapshots[0] if entry and entry.snapshots else None
                open_close = [vocab[EVIDENCE_OPEN], vocab[EVIDENCE_CLOSE]]
                vectors = (
                    np.zeros((0, model.config.d_model))
                    if snapshot is None
                    else np.asarray(snapshot.embeddings, dtype=np.float64)
                )
                pos0 = state.inputs.shape[0]
                emb_open = embed_tokens([open_close[0]], [pos0], model)
                state.inputs = np.vstack([state.inputs, emb_open, vectors])
                emb_close = embed_tokens(
                    [open_close[1]], [state.inputs.shape[0]], model
                )
                state.inputs = np.vstack([state.inputs, emb_close])
            for tok_id in segment:
                position = state.inputs.shape[0]
                target_positions.append(position)
                target_ids.append(tok_id)
                state.inputs = np.vstack(
                    [state.inputs, embed_tokens([tok_id], [position], model)]
                )

        logits = full_logits(model, state.inputs)
        d_logits = np.zeros_like(logits)
        n = len(target_positions)
        for position, tok_id in zip(target_positions, target_ids):
            probs = stable_softmax(logits[position - 1])
            onehot = np.zeros_like(probs)
            onehot[tok_id] = 1.0
            d_logits[position - 1] = (probs - onehot) / n
        grads, _ = backward_from_logits(model, state.inputs, d_logits)
        _apply_sgd(model, grads, momentum_state, config.warmup_lr, config.momentum)
    return model


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def populate_cache(
    model: Model, dataset, params: DiscoveryParams | None = None
) -> EvidenceCache:
    cache = EvidenceCache(patch_size=model.config.patch_size, vocab=model.config.vocab)
    for sample in dataset:
        snaps = discover_evidence(model, sample.image, sample.question, params)
        cache.upsert(sample.sample_id, snaps, model.version)
    return cache


def train(
    model: Model,
    dataset,
    config: TrainConfig,
    cache: EvidenceCache | None = None,
    discovery: DiscoveryParams | None = None,
) -> tuple[Model, list[dict]]:
    """Fig-3-style loop: groups -> rewards -> advantages -> clipped update ->
    failure-triggered refresh. Returns (model, per-step metrics)."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    root = seed_stream(config.seed).split("train")
    sampler = SamplerParams(
        temperature=config.temperature,
        seed=config.seed,
        per_turn_budget=config.per_turn_budget,
    )
    weights = RewardWeights()
    act = ActParams(min_think=config.min_think, enabled=config.act_enabled)
    rev = model.config.id_to_token()
    momentum_state: dict[str, np.ndarray] = {}

    if cache is None:
        cache = populate_cache(model, dataset, discovery)
    if config.warmup_steps > 0:
        warmup(model, dataset, cache, config, root.split("warmup"), momentum_state)
        momentum_state.clear()

    metrics: list[dict] = []
    by_id = {s.sample_id: s for s in dataset}
    for step_idx in range(config.steps):
        step_rng = root.split(f"step{step_idx}")
        picks, step_rng = step_rng.integers(
            0, len(dataset), size=config.prompts_per_batch
        )
        all_trajs: list[Trajectory] = []
        all_advs: list[float] = []
        refresh_ids: set[str] = set()
        rewards_step: list[float] = []
        for slot, idx in enumerate(picks):
            sample = dataset[int(idx)]
            group = generate_group(
                model, sample, cache, config.group_size, sampler,
                step_rng.split(f"group{slot}"), config.max_turns,
            )
            breakdowns = [
                score_trajectory(t, sample.gold_answer, rev, weights, act)
                for t in group
            ]
            totals = [b.total for b in breakdowns]
            rewards_step.extend(totals)
            advantages = grpo_advantages(totals)
            all_trajs.extend(group)
            all_advs.extend(advantages)
            if refresh_triggered(group, breakdowns):
                refresh_ids.add(sample.sample_id)

        policy_update(model, all_trajs, np.asarray(all_advs), config, momentum_state)

        if config.refresh_period and (step_idx + 1) % config.refresh_period == 0:
            refresh_ids.update(dataset[int(i)].sample_id for i in picks)
        refreshes = 0
        for sample_id in sorted(refresh_ids):
            cache.refresh(by_id[sample_id], model, discovery)
            refreshes += 1

        lengths = [len(t.gen_positions) for t in all_trajs]
        metrics.append(
            {
                "step": step_idx,
                "mean_reward": float(np.mean(rewards_step)),
                "mean_len": float(np.mean(lengths)),
                "max_len": int(max(lengths)),
                "insertion_rate": float(
                    np.mean([t.insertion_count >= 1 for t in all_trajs])
                ),
                "refreshes": refreshes,
            }
        )
        log.info(
            "step %d reward %.3f len %.1f insert %.2f refreshes %d",
            step_idx, metrics[-1]["mean_reward"], metrics[-1]["mean_len"],
            metrics[-1]["insertion_rate"], refreshes,
        )
    return model, metrics


def write_metrics_csv(metrics: list[dict], path) -> None:
    path = Path(path)
    tmp = path.with_name("." + path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(METRIC_COLUMNS))
        writer.writeheader()
        writer.writerows(metrics)
    tmp.replace(path)


def flag_reward_collapse(metrics: list[dict]) -> bool:
    """Collapse flag (reported, never asserted): final-10-step mean reward
    below half the peak step reward."""
    if len(metrics) < 10:
        return False
    rewards = [m["mean_reward"] for m in metrics]
    peak = max(rewards)
    if peak <= 0:
        return False
    return float(np.mean(rewards[-10:])) < 0.5 * peak
