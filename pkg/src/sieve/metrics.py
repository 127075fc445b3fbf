"""Evaluation: answer accuracy, the Information Hit Ratio, and the layer /
top-k sweep harnesses."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .grounding import DiscoveryParams, Region, discover_evidence
from .model import Model, ModelConfig
from .numerics import RngStream, seed_stream
from .reward import normalize_answer


@dataclass(frozen=True)
class BBox:
    """Pixel box, inclusive-exclusive, x = column and y = row."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ShapeError(f"degenerate box {self}")

    def to_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def region_to_bbox(region: Region) -> BBox:
    r0, c0, r1, c1 = region.bbox_pixels  # (row0, col0, row1, col1), half-open
    return BBox(x_min=c0, y_min=r0, x_max=c1, y_max=r1)


def ihr(pred: BBox, gt: BBox) -> int:
    """Information Hit Ratio: 1 iff the boxes overlap with positive area."""
    w = min(pred.x_max, gt.x_max) - max(pred.x_min, gt.x_min)
    h = min(pred.y_max, gt.y_max) - max(pred.y_min, gt.y_min)
    return int(w > 0 and h > 0)


def sample_ihr(model: Model, sample, params: DiscoveryParams) -> list[int]:
    """IHR of every discovered snapshot's region against the sample's gold
    boxes (hit if it overlaps any)."""
    snapshots = discover_evidence(model, sample.image, sample.question, params)
    hits = []
    for snap in snapshots:
        box = region_to_bbox(snap.region)
        hits.append(max((ihr(box, gb) for _, gb in sample.gold_boxes), default=0))
    return hits


def layer_sweep(
    model: Model,
    samples,
    layer_choices,
    k: int = 1,
    params: DiscoveryParams | None = None,
) -> list[dict]:
    """Mean IHR per candidate representation layer, averaged over
    (sample, anchor) pairs."""
    base = params or DiscoveryParams()
    base = replace(base, k=k)
    rows = []
    for layer in layer_choices:
        cfg = model.config
        swept = Model(
            ModelConfig(
                d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                patch_size=cfg.patch_size, image_side=cfg.image_side,
                vocab=cfg.vocab, mid_layers=(layer,), seed=cfg.seed,
                max_seq=cfg.max_seq,
            ),
            model.params,
        )
        swept.version = model.version
        hits: list[int] = []
        for sample in samples:
            hits.extend(sample_ihr(swept, sample, base))
        rows.append(
            {
                "layer": layer,
                "mean_ihr": float(np.mean(hits)) if hits else 0.0,
                "n_anchors": len(hits),
            }
        )
    return rows


def answer_accuracy(model: Model, samples, cache, max_turns: int, sampler) -> float:
    from .rollout import run_rollout

    correct = 0
    for sample in samples:
        traj = run_rollout(model, sample, cache, max_turns, sampler)
        if traj.final_answer is not None and normalize_answer(
            traj.final_answer
        ) == normalize_answer(sample.gold_answer):
            correct += 1
    return correct / len(samples) if samples else 0.0


def k_sweep(
    model: Model,
    eval_set,
    k_values,
    max_turns: int = 4,
    sampler=None,
    params: DiscoveryParams | None = None,
) -> list[dict]:
    """Answer accuracy per top-k block-selection setting."""
    from .cache import EvidenceCache
    from .rollout import SamplerParams

    sampler = sampler or SamplerParams(temperature=0.0, seed=0)
    base = params or DiscoveryParams()
    rows = []
    for k in k_values:
        cfg = model.config
        brows, bcols = (
            -(-cfg.grid[0] // base.block_size),
            -(-cfg.grid[1] // base.block_size),
        )
        clamped = k > brows * bcols
        cache = EvidenceCache(patch_size=cfg.patch_size, vocab=cfg.vocab)
        disc = replace(base, k=k)
        for sample in eval_set:
            snaps = discover_evidence(model, sample.image, sample.question, disc)
            cache.upsert(sample.sample_id, snaps, model.version)
        acc = answer_accuracy(model, eval_set, cache, max_turns, sampler)
        rows.append({"k": k, "accuracy": acc, "clamped": clamped})
    return rows


def ablate_random_embeddings(
    model: Model,
    eval_set,
    seed: int,
    max_turns: int = 4,
    sampler=None,
    params: DiscoveryParams | None = None,
) -> dict:
    """Same rollout protocol, but each cached snapshot is replaced by a
    uniformly placed region of identical size (paired sampling). Returns
    both accuracies for direction comparison."""
    from .cache import EvidenceCache
    from .grounding import extract_snapshot, region_from_blocks
    from .rollout import SamplerParams

    sampler = sampler or SamplerParams(temperature=0.0, seed=0)
    base = params or DiscoveryParams()
    cfg = model.config
    grid = cfg.grid
    rng = seed_stream(seed).split("random-embedding-ablation")

    disc_cache = EvidenceCache(patch_size=cfg.patch_size, vocab=cfg.vocab)
    rand_cache = EvidenceCache(patch_size=cfg.patch_size, vocab=cfg.vocab)
    for sample in eval_set:
        from .grounding import build_prompt_inputs

        snaps = discover_evidence(model, sample.image, sample.question, base)
        disc_cache.upsert(sample.sample_id, snaps, model.version)
        _, _, vis_emb = build_prompt_inputs(model, sample.image, sample.question)
        rand_snaps = []
        for snap in snaps:
            r0, c0, r1, c1 = snap.region.bbox_patches
            height, width = r1 - r0 + 1, c1 - c0 + 1
            top, rng = rng.integers(0, grid[0] - height + 1)
            left, rng = rng.integers(0, grid[1] - width + 1)
            top, left = int(top), int(left)
            region = Region(
                blocks=set(),
                bbox_patches=(top, left, top + height - 1, left + width - 1),
                bbox_pixels=(
                    top * cfg.patch_size,
                    left * cfg.patch_size,
                    (top + height) * cfg.patch_size,
                    (left + width) * cfg.patch_size,
                ),
            )
            rand_snaps.append(
                extract_snapshot(
                    region, vis_emb, grid, snap.anchor,
                    snap.source_space, model.version,
                )
            )
        rand_cache.upsert(sample.sample_id, rand_snaps, model.version)

    return {
        "discovered_accuracy": answer_accuracy(
            model, eval_set, disc_cache, max_turns, sampler
        ),
        "random_accuracy": answer_accuracy(
            model, eval_set, rand_cache, max_turns, sampler
        ),
        "seed": seed,
    }


def write_sweep_outputs(rows: list[dict], out_dir, stem: str) -> None:
    """CSV table plus a JSON summary, written atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if rows:
        csv_tmp = out_dir / f".{stem}.csv.tmp"
        with open(csv_tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        csv_tmp.replace(out_dir / f"{stem}.csv")
    json_tmp = out_dir / f".{stem}.json.tmp"
    json_tmp.write_text(json.dumps(rows, indent=2))
    json_tmp.replace(out_dir / f"{stem}.json")
