"""Deterministic toy multimodal transformer with a hand-written backward pass.

The model exposes exactly what evidence discovery needs: input embeddings,
per-layer hidden states, final-position logits, and the exact reverse-mode
gradient of any scalar logit with respect to every input embedding. All
compute is float64; causal attention over the whole joint sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import CapacityError, ConfigurationError, NumericError, ShapeError
from .numerics import RngStream, seed_stream, stable_softmax

# Control tokens shared across the pipeline.
UNK = "<unk>"
IMG = "<img>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
INSERT_EVIDENCE = "<insert_evidence>"
EVIDENCE_OPEN = "<evidence>"
EVIDENCE_CLOSE = "</evidence>"

CONTROL_TOKENS = (
    UNK,
    IMG,
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    INSERT_EVIDENCE,
    EVIDENCE_OPEN,
    EVIDENCE_CLOSE,
)

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle")

_LEXICON = (
    COLORS
    + SHAPES
    + (
        "what", "color", "is", "the", "of", "a", "an", "left", "right",
        "yes", "no", "shape", "?", ".", "i", "see", "look", "find", "it",
        "this", "that", "there", "and", "to", "in", "on", "small", "big",
        "region", "check",
    )
)


def default_vocab() -> dict[str, int]:
    tokens = list(CONTROL_TOKENS) + list(_LEXICON)
    return {tok: i for i, tok in enumerate(tokens)}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    patch_size: int = 8
    image_side: int = 64
    vocab: dict[str, int] = field(default_factory=default_vocab)
    mid_layers: tuple[int, ...] = (3, 4)
    seed: int = 0
    max_seq: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.image_side % self.patch_size != 0:
            raise ConfigurationError(
                f"image_side={self.image_side} not divisible by "
                f"patch_size={self.patch_size}"
            )
        for layer in self.mid_layers:
            if not 1 <= layer <= self.n_layers:
                raise ConfigurationError(
                    f"mid layer {layer} outside [1, {self.n_layers}]"
                )
        missing = [t for t in CONTROL_TOKENS if t not in self.vocab]
        if missing:
            raise ConfigurationError(f"vocab missing control tokens: {missing}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_side // self.patch_size
        return (side, side)

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    def id_to_token(self) -> dict[int, str]:
        return {i: t for t, i in self.vocab.items()}


@dataclass
class TokenStream:
    ids: np.ndarray                 # int token ids, vision positions use <img>
    modality: list[str]             # "vision" | "text" per position
    grid: tuple[int, int]

    def __post_init__(self):
        n_vision = sum(1 for m in self.modality if m == "vision")
        if any(m == "vision" for m in self.modality[n_vision:]):
            raise ShapeError("vision positions must precede all text positions")
        if self.grid[0] * self.grid[1] != n_vision:
            raise ShapeError(
                f"grid {self.grid} does not match {n_vision} vision positions"
            )

    @property
    def n_vision(self) -> int:
        return self.grid[0] * self.grid[1]

    def text_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.modality) if m == "text"]


@dataclass
class HiddenStateStack:
    inputs: np.ndarray              # N_total x d
    layers: list[np.ndarray]        # n_layers arrays, each N_total x d
    logits: np.ndarray              # |V| vector at the last position


@dataclass
class GradientReport:
    target_id: int
    target_logit: float
    grads: np.ndarray               # N_total x d


class Model:
    """Immutable-between-updates weight container."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.version = 0


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d_model
    flat = 3 * config.patch_size**2
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "patch_w": (flat, d),
        "patch_b": (d,),
        "pos_emb": (config.max_seq, d),
        "head_w": (d, config.vocab_size),
    }
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "w1"] = (d, 4 * d)
        shapes[p + "b1"] = (4 * d,)
        shapes[p + "w2"] = (4 * d, d)
        shapes[p + "b2"] = (d,)
    return shapes


def build_model(config: ModelConfig) -> Model:
    """Initialize all weights from per-parameter split streams (seed-stable)."""
    root = seed_stream(config.seed).split("weights")
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        noise, _ = root.split(name).normal(shape, std=0.02)
        if name.endswith(("ln1_g", "ln2_g")):
            params[name] = 1.0 + noise      # layernorm gains centered at 1
        else:
            params[name] = noise
    return Model(config, params)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def tokenize(text: str, config: ModelConfig) -> list[int]:
    unk = config.vocab[UNK]
    return [config.vocab.get(w, unk) for w in normalize_text(text).split()]


def detokenize(ids, config: ModelConfig) -> str:
    rev = config.id_to_token()
    return " ".join(rev[int(i)] for i in ids)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def embed_image(image: np.ndarray, model: Model) -> tuple[np.ndarray, tuple[int, int]]:
    """Per-patch linear projection plus the learned position vector.

    Patches are taken row-major; vision tokens occupy sequence positions
    0..N-1, so position j uses pos_emb[j].
    """
    cfg = model.config
    image = np.asarray(image)
    if image.shape != (cfg.image_side, cfg.image_side, 3):
        raise ShapeError(
            f"expected {(cfg.image_side, cfg.image_side, 3)} image, got {image.shape}"
        )
    ps = cfg.patch_size
    rows, cols = cfg.grid
    pixels = image.astype(np.float64) / 255.0
    flat = (
        pixels.reshape(rows, ps, cols, ps, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, 3 * ps * ps)
    )
    emb = flat @ model.params["patch_w"] + model.params["patch_b"]
    emb = emb + model.params["pos_emb"][: rows * cols]
    return emb, (rows, cols)


def embed_tokens(ids, positions, model: Model) -> np.ndarray:
    """Token embeddings plus position vectors for the given sequence slots."""
    ids = np.asarray(ids, dtype=np.int64)
    pos = np.asarray(positions, dtype=np.int64)
    if np.any(pos >= model.config.max_seq):
        raise CapacityError("position beyond max_seq")
    return model.params["tok_emb"][ids] + model.params["pos_emb"][pos]


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + 1e-5)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * phi


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _forward_full(model: Model, inputs: np.ndarray):
    cfg = model.config
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise ShapeError(f"inputs must be N x {cfg.d_model}, got {x.shape}")
    n = x.shape[0]
    if n > cfg.max_seq:
        raise CapacityError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input embeddings")

    mask = np.triu(np.ones((n, n), dtype=bool), k=1)  # True above the diagonal
    dh = cfg.d_model // cfg.n_heads
    scale = 1.0 / np.sqrt(dh)

    layers: list[np.ndarray] = []
    caches = []
    for layer in range(cfg.n_layers):
        p = model.params
        pre = f"layer{layer}."
        x_in = x
        a, ln1_cache = _layer_norm(x_in, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = _split_heads(a @ p[pre + "wq"], cfg.n_heads)
        k = _split_heads(a @ p[pre + "wk"], cfg.n_heads)
        v = _split_heads(a @ p[pre + "wv"], cfg.n_heads)
        scores = np.einsum("hqd,hkd->hqk", q, k) * scale
        scores = np.where(mask[None, :, :], -1e30, scores)
        probs = stable_softmax(scores)
        ctx = np.einsum("hqk,hkd->hqd", probs, v)
        ctx_merged = _merge_heads(ctx)
        x_mid = x_in + ctx_merged @ p[pre + "wo"]

        b, ln2_cache = _layer_norm(x_mid, p[pre + "ln2_g"], p[pre + "ln2_b"])
        h1 = b @ p[pre + "w1"] + p[pre + "b1"]
        g = _gelu(h1)
        x = x_mid + g @ p[pre + "w2"] + p[pre + "b2"]

        layers.append(x.copy())
        caches.append(
            dict(x_in=x_in, a=a, ln1=ln1_cache, q=q, k=k, v=v, probs=probs,
                 ctx=ctx_merged, x_mid=x_mid, b=b, ln2=ln2_cache, h1=h1, g=g)
        )

    logits_full = x @ model.params["head_w"]
    return x, layers, caches, logits_full


def forward(model: Model, inputs: np.ndarray) -> HiddenStateStack:
    """Pre-norm causal transformer over the joint sequence."""
    x, layers, _, logits_full = _forward_full(model, inputs)
    return HiddenStateStack(
        inputs=np.asarray(inputs, dtype=np.float64).copy(),
        layers=layers,
        logits=logits_full[-1].copy(),
    )


def full_logits(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Logits at every position (N x |V|); used for log-prob accounting."""
    return _forward_full(model, inputs)[3]


def backward_from_logits(
    model: Model, inputs: np.ndarray, d_logits: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode gradients of sum(d_logits * logits_full).

    Returns (parameter gradients, input-embedding gradients). Parameter
    gradients cover only the weights the forward pass touches (transformer
    blocks and head; embedding tables get their gradients from the caller
    via the input-gradient chain).
    """
    cfg = model.config
    x_final, _, caches, _ = _forward_full(model, inputs)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != (x_final.shape[0], cfg.vocab_size):
        raise ShapeError(
            f"d_logits must be {(x_final.shape[0], cfg.vocab_size)}, "
            f"got {d_logits.shape}"
        )

    grads: dict[str, np.ndarray] = {}
    grads["head_w"] = x_final.T @ d_logits
    dx = d_logits @ model.params["head_w"].T

    dh = cfg.d_model // cfg.n_heads
    scale = 1.0 / np.sqrt(dh)
    for layer in range(cfg.n_layers - 1, -1, -1):
        p = model.params
        pre = f"layer{layer}."
        c = caches[layer]

        # MLP block: x = x_mid + gelu(ln2(x_mid) @ w1 + b1) @ w2 + b2
        dm = dx
        grads[pre + "w2"] = c["g"].T @ dm
        grads[pre + "b2"] = dm.sum(axis=0)
        dg = dm @ p[pre + "w2"].T
        dh1 = dg * _gelu_grad(c["h1"])
        grads[pre + "w1"] = c["b"].T @ dh1
        grads[pre + "b1"] = dh1.sum(axis=0)
        db = dh1 @ p[pre + "w1"].T
        dx_mid_ln, dg2, db2 = _layer_norm_backward(db, c["ln2"], p[pre + "ln2_g"])
        grads[pre + "ln2_g"] = dg2
        grads[pre + "ln2_b"] = db2
        dx_mid = dx + dx_mid_ln

        # attention block: x_mid = x_in + merge(softmax(qk)v) @ wo
        do = dx_mid
        grads[pre + "wo"] = c["ctx"].T @ do
        dctx = _split_heads(do @ p[pre + "wo"].T, cfg.n_heads)
        dprobs = np.einsum("hqd,hkd->hqk", dctx, c["v"])
        dv = np.einsum("hqk,hqd->hkd", c["probs"], dctx)
        probs = c["probs"]
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dq = np.einsum("hqk,hkd->hqd", dscores, c["k"]) * scale
        dk = np.einsum("hqk,hqd->hkd", dscores, c["q"]) * scale
        da = (
            _merge_heads(dq) @ p[pre + "wq"].T
            + _merge_heads(dk) @ p[pre + "wk"].T
            + _merge_heads(dv) @ p[pre + "wv"].T
        )
        grads[pre + "wq"] = c["a"].T @ _merge_heads(dq)
        grads[pre + "wk"] = c["a"].T @ _merge_heads(dk)
        grads[pre + "wv"] = c["a"].T @ _merge_heads(dv)
        dx_in_ln, dg1, db1 = _layer_norm_backward(da, c["ln1"], p[pre + "ln1_g"])
        grads[pre + "ln1_g"] = dg1
        grads[pre + "ln1_b"] = db1
        dx = dx_mid + dx_in_ln

    return grads, dx


def grad_scalar_logit(model: Model, inputs: np.ndarray, target_id: int) -> GradientReport:
    """Exact gradient of z_L[target_id] w.r.t. every input embedding."""
    cfg = model.config
    if not 0 <= target_id < cfg.vocab_size:
        raise IndexError(f"target_id {target_id} outside vocab of {cfg.vocab_size}")
    _, _, _, logits_full = _forward_full(model, inputs)
    d_logits = np.zeros_like(logits_full)
    d_logits[-1, target_id] = 1.0
    _, input_grads = backward_from_logits(model, inputs, d_logits)
    return GradientReport(
        target_id=target_id,
        target_logit=float(logits_full[-1, target_id]),
        grads=input_grads,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_next_token(
    logits: np.ndarray, temperature: float, rng: RngStream
) -> tuple[int, RngStream]:
    """Argmax at temperature 0 (lowest-id tie-break), categorical otherwise."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if temperature < 0:
        raise NumericError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return int(np.argmax(logits)), rng
    probs = stable_softmax(logits, tau=temperature)
    u, rng = rng.uniform()
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, u, side="right").clip(0, len(probs) - 1)), rng
