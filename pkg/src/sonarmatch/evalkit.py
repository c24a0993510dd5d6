"""Decision rule, ROC/AUC and accuracy reports for scored patch pairs."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError
from .pairgen import MATCH, NON_MATCH, PairKind, PairSample, _atomic_write_text

ROC_HEADER = "threshold fpr tpr"


def decide(p: float) -> int:
    """Return MATCH when ``p > 1 - p``; a tie at exactly 0.5 is NON_MATCH."""
    return MATCH if p > 0.5 else NON_MATCH


@dataclass(frozen=True)
class ScoredPair:
    p: float
    true_label: int
    kind: PairKind

    def __post_init__(self):
        if not (math.isfinite(self.p) and 0.0 <= self.p <= 1.0):
            raise InputError(f"match probability must be finite and in [0, 1], got {self.p!r}")
        if self.true_label not in (MATCH, NON_MATCH):
            raise InputError(f"true_label must be 0 or 1, got {self.true_label!r}")
        if self.kind.label != self.true_label:
            raise InputError(f"{self.kind.value} pairs cannot carry label {self.true_label}")


@dataclass(frozen=True)
class RocCurve:
    """ROC points ordered by threshold, highest first.

    ``thresholds[0]`` is ``+inf`` (nothing predicted positive); the last
    threshold is the smallest score (everything predicted positive).
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def __len__(self):
        return len(self.fpr)

    def __eq__(self, other):
        if not isinstance(other, RocCurve):
            return NotImplemented
        return (np.array_equal(self.fpr, other.fpr) and np.array_equal(self.tpr, other.tpr)
                and np.array_equal(self.thresholds, other.thresholds))


def _scores_labels(scored) -> tuple[np.ndarray, np.ndarray]:
    scored = list(scored)
    scores = np.array([s.p for s in scored], dtype=float)
    labels = np.array([s.true_label for s in scored], dtype=int)
    return scores, labels


def roc_from_scores(scores, labels) -> RocCurve:
    """ROC curve for raw arrays; a score at or above the threshold counts as a match."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be 1-D arrays of equal length")
    n_pos = int(np.sum(labels == MATCH))
    n_neg = int(np.sum(labels == NON_MATCH))
    if n_pos + n_neg != len(labels):
        raise InputError("labels must be 0 or 1")
    if n_pos == 0:
        raise InputError("ROC needs at least one match pair; none present")
    if n_neg == 0:
        raise InputError("ROC needs at least one non-match pair; none present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == MATCH)
    fp = np.cumsum(y == NON_MATCH)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    thresholds = np.r_[np.inf, s[last]]
    return RocCurve(fpr, tpr, thresholds)


def roc_curve(scored: Iterable[ScoredPair]) -> RocCurve:
    """Sweep thresholds over the distinct scores of ``scored``."""
    return roc_from_scores(*_scores_labels(scored))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under ``curve``."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1])) / 2.0)


@dataclass(frozen=True)
class EvalReport:
    """Ranking and decision quality of one matcher on one pair set.

    Per-kind accuracies are NaN when a kind is absent.  ``mean_accuracy`` is
    pooled over all pairs, so it is ``correct / total``.
    """

    auc: float
    mean_accuracy: float
    acc_objobj_pos: float
    acc_objobj_neg: float
    acc_objbg_neg: float
    correct: int
    total: int
    counts: tuple[int, int, int] = (0, 0, 0)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "mean_accuracy": self.mean_accuracy,
            "acc_objobj_pos": self.acc_objobj_pos,
            "acc_objobj_neg": self.acc_objobj_neg,
            "acc_objbg_neg": self.acc_objbg_neg,
            "correct": self.correct,
            "total": self.total,
            "n_objobj_pos": self.counts[0],
            "n_objobj_neg": self.counts[1],
            "n_objbg_neg": self.counts[2],
        }


_KINDS = (PairKind.OBJ_OBJ_POS, PairKind.OBJ_OBJ_NEG, PairKind.OBJ_BG_NEG)


def report(scored: Sequence[ScoredPair]) -> EvalReport:
    """Aggregate a scored pair list into an :class:`EvalReport`."""
    scored = list(scored)
    if not scored:
        raise InputError("cannot evaluate an empty pair list")
    curve = roc_curve(scored)
    hits = {k: [0, 0] for k in _KINDS}
    for s in scored:
        h = hits[s.kind]
        h[0] += decide(s.p) == s.true_label
        h[1] += 1
    correct = sum(h[0] for h in hits.values())
    acc = [h[0] / h[1] if h[1] else math.nan for h in (hits[k] for k in _KINDS)]
    return EvalReport(auc(curve), correct / len(scored), *acc, correct=correct, total=len(scored),
                      counts=tuple(hits[k][1] for k in _KINDS))


def score_network(net, pairs: Sequence[PairSample], batch_size: int = 64) -> list[ScoredPair]:
    """Inference-mode match probabilities of ``net`` for every pair."""
    if not pairs:
        return []
    a = np.stack([p.patch_a for p in pairs])
    b = np.stack([p.patch_b for p in pairs])
    probs = net.predict(a, b, batch_size)
    return [ScoredPair(float(q), p.label, p.kind) for q, p in zip(probs, pairs)]


def evaluate(net, pairs: Sequence[PairSample], batch_size: int = 64) -> EvalReport:
    """Score ``pairs`` with ``net`` and report AUC and accuracies."""
    return report(score_network(net, pairs, batch_size))


# ---------------------------------------------------------------------------
# text output
# ---------------------------------------------------------------------------

def format_roc(curve: RocCurve) -> str:
    lines = [ROC_HEADER]
    for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
        lines.append(f"{float(th)!r} {float(f)!r} {float(t)!r}")
    return "\n".join(lines) + "\n"


def export_roc(curve: RocCurve, path) -> None:
    """Write ``curve`` as whitespace-separated columns under a ``threshold fpr tpr`` header."""
    _atomic_write_text(Path(path), format_roc(curve))


def parse_roc(text: str) -> RocCurve:
    lines = text.splitlines()
    if not lines or lines[0].split() != ROC_HEADER.split():
        raise FormatError(f"ROC file must start with the header {ROC_HEADER!r}", offset=0)
    rows = []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"expected 3 columns, got {len(parts)}", offset=offset)
        try:
            rows.append([float(x) for x in parts])
        except ValueError:
            raise FormatError(f"non-numeric ROC row {line!r}", offset=offset) from None
        offset += len(line) + 1
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return RocCurve(arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 0].copy())


def load_roc(path) -> RocCurve:
    return parse_roc(Path(path).read_text())


def _pct(x: float) -> str:
    return "   n/a" if math.isnan(x) else f"{100.0 * x:5.1f}%"


def format_table(rows: dict[str, EvalReport]) -> str:
    """Human-readable table, one row per method."""
    width = max([6] + [len(k) for k in rows])
    head = f"{'Method':<{width}}  {'AUC':>6}  {'Mean Acc':>8}  {'ObjObj+':>7}  {'ObjObj-':>7}  {'ObjBg-':>7}"
    lines = [head, "-" * len(head)]
    for name, r in rows.items():
        lines.append(f"{name:<{width}}  {r.auc:6.3f}  {_pct(r.mean_accuracy):>8}  "
                     f"{_pct(r.acc_objobj_pos):>7}  {_pct(r.acc_objobj_neg):>7}  {_pct(r.acc_objbg_neg):>7}")
    return "\n".join(lines) + "\n"


def format_report(r: EvalReport, prefix: str = "") -> str:
    """Machine-readable ``key=value`` lines."""
    return "".join(f"{prefix}{k}={v!r}\n" for k, v in r.to_dict().items())


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"not a key=value line: {line!r}")
        out[key.strip()] = float(value) if value.strip() != "nan" else math.nan
    return out
