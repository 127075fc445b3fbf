"""Gradient-times-input saliency and textual anchor filtering.

Sal(i) = || grad_i * input_i ||_2 over the input embeddings; anchors are the
content-bearing text tokens whose score clears a relative threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ShapeError
from .model import CONTROL_TOKENS, ModelConfig, TokenStream

# Relative threshold: keep scores above this fraction of the max text-token
# score, capped at MAX_ANCHORS anchors.
RELATIVE_THRESHOLD = 0.5
MAX_ANCHORS = 4


def load_stop_words() -> frozenset[str]:
    text = resources.files("sieve.data").joinpath("stopwords.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


@dataclass
class AnchorSet:
    anchors: list[tuple[int, int, str, float]]  # (position, token id, token, score)
    threshold_used: float

    def positions(self) -> list[int]:
        return [a[0] for a in self.anchors]


def compute_saliency(grads: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    grads = np.asarray(grads, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if grads.shape != inputs.shape:
        raise ShapeError(f"grads {grads.shape} vs inputs {inputs.shape}")
    return np.sqrt(np.sum((grads * inputs) ** 2, axis=-1))


def filter_anchors(
    scores: np.ndarray,
    token_stream: TokenStream,
    config: ModelConfig,
    stop_words: frozenset[str] | None = None,
    threshold: float | None = None,
    max_anchors: int = MAX_ANCHORS,
) -> AnchorSet:
    """Keep content-bearing text tokens above threshold: stop words and
    control tokens are removed first, then threshold=None means relative to
    the max score among the surviving tokens (so the top token always
    qualifies)."""
    if stop_words is None:
        stop_words = load_stop_words()
    scores = np.asarray(scores, dtype=np.float64)
    rev = config.id_to_token()

    eligible = []
    for pos in token_stream.text_positions():
        tok_id = int(token_stream.ids[pos])
        tok = rev[tok_id]
        if tok in stop_words or tok in CONTROL_TOKENS:
            continue
        eligible.append((pos, tok_id, tok))

    if threshold is None:
        max_score = max((scores[p] for p, _, _ in eligible), default=0.0)
        threshold = RELATIVE_THRESHOLD * max_score
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")

    kept = [
        (pos, tok_id, tok, float(scores[pos]))
        for pos, tok_id, tok in eligible
        if scores[pos] > threshold
    ]
    kept.sort(key=lambda a: (-a[3], a[0]))
    return AnchorSet(anchors=kept[:max_anchors], threshold_used=float(threshold))
