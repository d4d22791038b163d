"""Embeddings on the unit hypersphere and the score batches built from them.

Similarity is the cosine of unit-normalized embeddings, so every score
lies in [-1, 1]. The temperature is never folded into the score; losses
apply it themselves.
"""

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


def normalize(v):
    """Project a vector onto the unit sphere, keeping its direction."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding has non-finite coordinates")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("degenerate embedding: zero vector has no direction")
    out = v / norm
    # a second pass pins the norm to 1 at the last ulp, making the map idempotent
    out = out / np.linalg.norm(out)
    out.setflags(write=False)
    return out


def _check_unit(u, name):
    n = np.linalg.norm(u)
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} is not unit-norm (norm {n:.6g})")


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_unit(u, "u")
    _check_unit(v, "v")
    # the sum of elementwise products is symmetric in (u, v) bit-for-bit
    s = float(np.sum(u * v))
    return min(1.0, max(-1.0, s))


@dataclass(frozen=True)
class ScoreBatch:
    """Positive scores, shape (A,), and negative scores, shape (A, N)."""

    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        pos = np.atleast_1d(np.asarray(self.pos, dtype=np.float64))
        neg = np.asarray(self.neg, dtype=np.float64)
        if neg.ndim == 1:
            neg = neg[None, :]
        if pos.ndim != 1 or neg.ndim != 2:
            raise ValueError("pos must be (A,) and neg must be (A, N)")
        if neg.shape[0] != pos.shape[0]:
            raise ValueError(
                f"anchor count mismatch: {pos.shape[0]} positives vs {neg.shape[0]} negative rows"
            )
        if pos.shape[0] < 1 or neg.shape[1] < 1:
            raise ValueError("a score batch needs at least one anchor and one negative")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise ValueError("scores must be finite")
        pos = pos.copy()
        neg = neg.copy()
        pos.setflags(write=False)
        neg.setflags(write=False)
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "neg", neg)

    @property
    def num_anchors(self):
        return self.pos.shape[0]

    @property
    def num_negatives(self):
        return self.neg.shape[1]

    def shifted(self, c):
        return ScoreBatch(self.pos + c, self.neg + c)

    def scaled(self, c):
        return ScoreBatch(self.pos * c, self.neg * c)


def build_score_batch(anchor, positive, negatives):
    """Score one anchor against its positive and a list of negatives."""
    if len(negatives) == 0:
        raise ValueError("negatives must be nonempty")
    pos = cosine_similarity(anchor, positive)
    neg = [cosine_similarity(anchor, n) for n in negatives]
    return ScoreBatch(np.array([pos]), np.array([neg]))


def random_unit_vectors(rng, count, dim):
    """Draw ``count`` directions uniformly on the sphere in ``dim`` dimensions."""
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def random_score_batch(rng, anchors, negatives, low=-1.0, high=1.0):
    """Uniform scores in ``[low, high]``; the test workhorse."""
    return ScoreBatch(
        rng.uniform(low, high, size=anchors),
        rng.uniform(low, high, size=(anchors, negatives)),
    )
