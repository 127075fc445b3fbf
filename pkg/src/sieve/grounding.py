"""Cross-modal grounding: map textual anchors to patch-grid regions and
extract their snapshot embeddings.

Localization runs on mid-layer averaged hidden states; snapshot payloads are
taken from the input-layer vision embeddings by default, because inserted
vectors must live in the space the model consumes as input (a flag switches
to the mid-layer variant for ablation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError
from .model import (
    HiddenStateStack,
    Model,
    ModelConfig,
    TokenStream,
    embed_image,
    embed_tokens,
    forward,
    grad_scalar_logit,
    tokenize,
)
from .numerics import stable_softmax
from .saliency import AnchorSet, compute_saliency, filter_anchors

SOURCE_INPUT = "input-embedding"
SOURCE_MID = "mid-layer"


@dataclass
class AffinityMap:
    anchor_index: int
    sims: np.ndarray        # N cosine similarities
    weights: np.ndarray     # N softmax weights
    grid: tuple[int, int]
    tau: float


@dataclass
class Region:
    blocks: set[tuple[int, int]]                    # selected block coords
    bbox_patches: tuple[int, int, int, int]         # inclusive, patch units
    bbox_pixels: tuple[int, int, int, int]          # half-open, pixel units


@dataclass
class EvidenceSnapshot:
    anchor: tuple[int, str]                          # (token id, token string)
    region: Region                                   # expanded region (inserted)
    embeddings: np.ndarray                           # n_patches x d, region order
    source_space: str
    model_version: int
    matched: Region | None = None                    # pre-expansion region


@dataclass
class DiscoveryParams:
    tau: float = 0.1
    block_size: int = 2
    k: int = 1
    margin_blocks: int = 1
    center: bool = True
    source_space: str = SOURCE_INPUT
    threshold: float | None = None                   # None = relative rule
    max_anchors: int = 4


def mid_layer_average(stack: HiddenStateStack, mid_layers) -> np.ndarray:
    mid_layers = tuple(mid_layers)
    if not mid_layers:
        raise ConfigurationError("mid_layers must be nonempty")
    n_layers = len(stack.layers)
    for layer in mid_layers:
        if not 1 <= layer <= n_layers:
            raise ConfigurationError(f"mid layer {layer} outside [1, {n_layers}]")
    return np.mean([stack.layers[layer - 1] for layer in mid_layers], axis=0)


def normalize_rows(
    vectors: np.ndarray, center: bool = True, mean: np.ndarray | None = None
) -> np.ndarray:
    """Optionally mean-center (per coordinate, across rows), then scale each
    row to unit l2 norm; all-zero rows stay zero. A precomputed `mean` lets
    single anchors share the patch-set center."""
    vectors = np.asarray(vectors, dtype=np.float64)
    out = vectors.copy()
    if center:
        out = out - (vectors.mean(axis=0) if mean is None else np.asarray(mean))
    norms = np.sqrt((out**2).sum(axis=-1, keepdims=True))
    return np.where(norms > 0, out / np.where(norms == 0, 1.0, norms), 0.0)


def anchor_patch_affinity(
    anchor_vec: np.ndarray,
    patch_vecs: np.ndarray,
    tau: float,
    anchor_index: int = -1,
    grid: tuple[int, int] | None = None,
) -> AffinityMap:
    """Cosine affinities of one (unit) anchor against (unit) patch rows, plus
    their temperature softmax."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    anchor_vec = np.asarray(anchor_vec, dtype=np.float64)
    patch_vecs = np.asarray(patch_vecs, dtype=np.float64)
    if anchor_vec.shape != (patch_vecs.shape[1],):
        raise ShapeError(
            f"anchor {anchor_vec.shape} vs patches {patch_vecs.shape}"
        )
    sims = patch_vecs @ anchor_vec
    weights = stable_softmax(sims, tau=tau)
    n = patch_vecs.shape[0]
    if grid is None:
        side = int(round(np.sqrt(n)))
        grid = (side, n // side)
    return AffinityMap(
        anchor_index=anchor_index, sims=sims, weights=weights, grid=grid, tau=tau
    )


def _block_grid_dims(grid: tuple[int, int], block_size: int) -> tuple[int, int]:
    rows, cols = grid
    return (-(-rows // block_size), -(-cols // block_size))


def _block_patch_span(
    block: tuple[int, int], grid: tuple[int, int], block_size: int
) -> tuple[int, int, int, int]:
    """Inclusive patch range (r0, c0, r1, c1) covered by a block; edge blocks
    may be partial."""
    rows, cols = grid
    br, bc = block
    r0, c0 = br * block_size, bc * block_size
    r1 = min(r0 + block_size, rows) - 1
    c1 = min(c0 + block_size, cols) - 1
    return (r0, c0, r1, c1)


def score_blocks(affinity: AffinityMap, block_size: int) -> np.ndarray:
    """Per-block score = max softmax weight over the block's patches."""
    if block_size < 1:
        raise ConfigurationError(f"block_size must be >= 1, got {block_size}")
    rows, cols = affinity.grid
    weights = affinity.weights.reshape(rows, cols)
    brows, bcols = _block_grid_dims(affinity.grid, block_size)
    scores = np.empty((brows, bcols), dtype=np.float64)
    for br in range(brows):
        for bc in range(bcols):
            r0, c0, r1, c1 = _block_patch_span((br, bc), affinity.grid, block_size)
            scores[br, bc] = weights[r0 : r1 + 1, c0 : c1 + 1].max()
    return scores


def region_from_blocks(
    blocks: set[tuple[int, int]],
    grid: tuple[int, int],
    block_size: int,
    patch_size: int,
) -> Region:
    spans = [_block_patch_span(b, grid, block_size) for b in blocks]
    r0 = min(s[0] for s in spans)
    c0 = min(s[1] for s in spans)
    r1 = max(s[2] for s in spans)
    c1 = max(s[3] for s in spans)
    return Region(
        blocks=set(blocks),
        bbox_patches=(r0, c0, r1, c1),
        bbox_pixels=(
            r0 * patch_size,
            c0 * patch_size,
            (r1 + 1) * patch_size,
            (c1 + 1) * patch_size,
        ),
    )


def select_region(
    block_scores: np.ndarray,
    k: int,
    grid: tuple[int, int],
    block_size: int,
    patch_size: int,
) -> tuple[Region, bool]:
    """Top-k blocks (row-major tie-break) merged into one bounding region.

    Returns (region, clamped): clamped is True when k exceeded the block
    count and was reduced.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    block_scores = np.asarray(block_scores, dtype=np.float64)
    brows, bcols = block_scores.shape
    n_blocks = brows * bcols
    clamped = k > n_blocks
    k = min(k, n_blocks)
    order = sorted(
        ((br, bc) for br in range(brows) for bc in range(bcols)),
        key=lambda b: (-block_scores[b[0], b[1]], b[0], b[1]),
    )
    blocks = set(order[:k])
    return region_from_blocks(blocks, grid, block_size, patch_size), clamped


def expand_region(
    region: Region,
    margin_blocks: int,
    grid: tuple[int, int],
    block_size: int,
    patch_size: int,
) -> Region:
    """Grow the bbox by margin_blocks blocks per side, clipped to the grid;
    the selected block set is unchanged."""
    if margin_blocks < 0:
        raise ConfigurationError(f"margin must be >= 0, got {margin_blocks}")
    rows, cols = grid
    m = margin_blocks * block_size
    r0, c0, r1, c1 = region.bbox_patches
    r0, c0 = max(0, r0 - m), max(0, c0 - m)
    r1, c1 = min(rows - 1, r1 + m), min(cols - 1, c1 + m)
    return Region(
        blocks=set(region.blocks),
        bbox_patches=(r0, c0, r1, c1),
        bbox_pixels=(
            r0 * patch_size,
            c0 * patch_size,
            (r1 + 1) * patch_size,
            (c1 + 1) * patch_size,
        ),
    )


def extract_snapshot(
    region: Region,
    vision_embeddings: np.ndarray,
    grid: tuple[int, int],
    anchor: tuple[int, str],
    source_space: str,
    model_version: int,
    matched: Region | None = None,
) -> EvidenceSnapshot:
    """Copy, in row-major region order, every patch embedding inside bbox."""
    rows, cols = grid
    r0, c0, r1, c1 = region.bbox_patches
    if not (0 <= r0 <= r1 < rows and 0 <= c0 <= c1 < cols):
        raise ShapeError(f"region {region.bbox_patches} outside grid {grid}")
    vision_embeddings = np.asarray(vision_embeddings)
    if vision_embeddings.shape[0] != rows * cols:
        raise ShapeError(
            f"expected {rows * cols} vision embeddings, got "
            f"{vision_embeddings.shape[0]}"
        )
    idx = [r * cols + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]
    return EvidenceSnapshot(
        anchor=anchor,
        region=region,
        embeddings=vision_embeddings[idx].copy(),
        source_space=source_space,
        model_version=model_version,
        matched=matched,
    )


def build_prompt_inputs(
    model: Model, image: np.ndarray, prompt: str
) -> tuple[np.ndarray, TokenStream, np.ndarray]:
    """Assemble the joint vision+text input block.

    Returns (inputs N_total x d, token stream, vision embeddings).
    """
    cfg = model.config
    vis_emb, grid = embed_image(image, model)
    n_vision = vis_emb.shape[0]
    text_ids = tokenize(prompt, cfg)
    positions = list(range(n_vision, n_vision + len(text_ids)))
    text_emb = embed_tokens(text_ids, positions, model)
    inputs = np.vstack([vis_emb, text_emb]) if text_ids else vis_emb
    ids = np.array([cfg.vocab["<img>"]] * n_vision + text_ids, dtype=np.int64)
    stream = TokenStream(
        ids=ids,
        modality=["vision"] * n_vision + ["text"] * len(text_ids),
        grid=grid,
    )
    return inputs, stream, vis_emb


def discover_evidence(
    model: Model,
    image: np.ndarray,
    prompt: str,
    params: DiscoveryParams | None = None,
) -> list[EvidenceSnapshot]:
    """End-to-end self-guided discovery: saliency anchors, cross-modal
    affinity, block selection, region expansion, snapshot extraction.

    Returns one snapshot per surviving anchor, in descending saliency order.
    """
    if params is None:
        params = DiscoveryParams()
    cfg = model.config
    inputs, stream, vis_emb = build_prompt_inputs(model, image, prompt)
    grid = stream.grid
    n_vision = stream.n_vision

    stack = forward(model, inputs)
    target_id = int(np.argmax(stack.logits))
    report = grad_scalar_logit(model, inputs, target_id)
    scores = compute_saliency(report.grads, stack.inputs)
    anchors = filter_anchors(
        scores, stream, cfg, threshold=params.threshold,
        max_anchors=params.max_anchors,
    )
    if not anchors.anchors:
        return []

    hbar = mid_layer_average(stack, cfg.mid_layers)
    patch_h = hbar[:n_vision]
    patch_mean = patch_h.mean(axis=0) if params.center else None
    patch_unit = normalize_rows(patch_h, center=params.center)
    source = vis_emb if params.source_space == SOURCE_INPUT else patch_h

    snapshots = []
    for pos, tok_id, tok, _score in anchors.anchors:
        anchor_unit = normalize_rows(
            hbar[pos : pos + 1], center=params.center, mean=patch_mean
        )[0]
        affinity = anchor_patch_affinity(
            anchor_unit, patch_unit, params.tau, anchor_index=pos, grid=grid
        )
        scores_b = score_blocks(affinity, params.block_size)
        matched, _ = select_region(
            scores_b, params.k, grid, params.block_size, cfg.patch_size
        )
        expanded = expand_region(
            matched, params.margin_blocks, grid, params.block_size, cfg.patch_size
        )
        snapshots.append(
            extract_snapshot(
                expanded, source, grid, (tok_id, tok),
                params.source_space, model.version, matched=matched,
            )
        )
    return snapshots
