"""Low-level kernels with pinned semantics: stable softmax and a splittable
counter-based random stream.

Everything here is pure and bitwise-deterministic for fixed inputs, so the
oracle tests elsewhere in the suite can assert exact values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError

# Each draw gets its own 2^128-block slice of the Philox counter space, so
# draws of any array size never overlap.
_DRAW_STRIDE_BITS = 128


def _derive_key(parent_key: int, label: str) -> int:
    digest = hashlib.sha256(
        parent_key.to_bytes(16, "little") + label.encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:16], "little")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream (Philox under the hood).

    Splitting and drawing are pure: they return new streams and never mutate
    the parent, so results are independent of evaluation order.
    """

    key: int
    counter: int = 0

    def split(self, label: str) -> "RngStream":
        return RngStream(key=_derive_key(self.key, label), counter=0)

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=self.key, counter=self.counter << _DRAW_STRIDE_BITS
        )
        return np.random.Generator(bitgen)

    def _bump(self) -> "RngStream":
        return RngStream(key=self.key, counter=self.counter + 1)

    def normal(self, shape, std: float = 1.0) -> tuple[np.ndarray, "RngStream"]:
        values = self._generator().normal(0.0, std, size=shape)
        return values, self._bump()

    def uniform(self) -> tuple[float, "RngStream"]:
        value = float(self._generator().random())
        return value, self._bump()

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high); returns (values, stream')."""
        values = self._generator().integers(low, high, size=size)
        return values, self._bump()


def seed_stream(seed: int) -> RngStream:
    return RngStream(key=_derive_key(int(seed) & (2**64 - 1), "root"), counter=0)


def split_rng(stream: RngStream, label: str) -> RngStream:
    return stream.split(label)


def stable_softmax(v: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Softmax of v / tau with max-subtraction, over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax input contains non-finite values")
    if tau <= 0:
        raise NumericError(f"softmax temperature must be positive, got {tau}")
    scaled = v / tau
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v: np.ndarray, tau: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("log-softmax input contains non-finite values")
    scaled = v / tau
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def l2_norm_rows(vectors: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(vectors, dtype=np.float64) ** 2, axis=-1))
