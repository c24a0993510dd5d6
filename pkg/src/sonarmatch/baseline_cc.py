"""Zero-normalised cross-correlation as a non-learned matcher."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .evalkit import ScoredPair
from .pairgen import PairSample


def cc_similarity(a, b) -> float:
    """Pearson correlation of the pixels of two equally sized patches, in [-1, 1].

    Raises:
        DegenerateInputError: if either patch is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"patches differ in shape: {a.shape} vs {b.shape}")
    # test constancy directly: the mean of a flat patch is not exact in floating point
    if a.size == 0 or np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise DegenerateInputError("zero-variance patch has no defined correlation")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da.ravel(), da.ravel()))
    sbb = float(np.dot(db.ravel(), db.ravel()))
    # symmetric in (a, b) term by term, so swapping the patches gives the same bits
    s = float(np.dot(da.ravel(), db.ravel())) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, s))


def cc_matcher(pair: PairSample) -> ScoredPair:
    """Score a pair with ``p = (s + 1) / 2``."""
    s = cc_similarity(pair.patch_a, pair.patch_b)
    return ScoredPair((s + 1.0) / 2.0, pair.label, pair.kind)


def score_pairs(pairs: Sequence[PairSample]) -> tuple[list[ScoredPair], int]:
    """Score every pair, skipping (and counting) degenerate ones.

    Returns:
        ``(scored, skipped)``.
    """
    scored = []
    skipped = 0
    for p in pairs:
        try:
            scored.append(cc_matcher(p))
        except DegenerateInputError:
            skipped += 1
    return scored, skipped
