"""Prediction-to-query linking plus recall-at-top-alpha and mean IoU."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .intervals import TimeSpan, iou

ALPHAS = (1, 5)
MUS = (0.5, 0.7)
COLUMNS = ("R1@0.5", "R1@0.7", "R5@0.5", "R5@0.7", "mIoU")


@dataclass
class RankedPredictions:
    """``per_query[k]`` lists ``(span, score)`` for the predictions linked to
    query k, best first. ``indices`` mirrors it with prediction indices."""

    per_query: list[list[tuple[TimeSpan, float]]]
    indices: list[list[int]] = field(default_factory=list)

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def top(self, k: int, alpha: int) -> list[TimeSpan]:
        return [sp for sp, _ in self.per_query[k][:alpha]]


def _clip_span(s: float, e: float) -> TimeSpan:
    s = min(max(float(s), 0.0), 1.0)
    e = min(max(float(e), s), 1.0)
    return TimeSpan(s, e)


def link(spans: np.ndarray, probs: np.ndarray) -> RankedPredictions:
    """Assign every prediction to its most similar query (lowest k on ties) and
    sort each query's list by that probability, lower index first on ties."""
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != spans.shape[0]:
        raise ValueError(f"spans {spans.shape} and probabilities {probs.shape} disagree")
    K = probs.shape[1]
    owner = np.argmax(probs, axis=1) if len(probs) else np.zeros(0, dtype=int)
    per_query, indices = [], []
    for k in range(K):
        idx = [int(i) for i in np.flatnonzero(owner == k)]
        idx.sort(key=lambda i: (-probs[i, k], i))
        indices.append(idx)
        per_query.append([(_clip_span(*spans[i]), float(probs[i, k])) for i in idx])
    return RankedPredictions(per_query, indices)


def link_predictions(output, b: int = 0) -> RankedPredictions:
    """Link the active predictions of sample ``b`` of a ModelOutput."""
    return link(output.spans(b), output.probs(b))


def _pairs(ranked, targets):
    # accept a single sample or parallel sequences of samples
    if isinstance(ranked, RankedPredictions):
        return [(ranked, targets)]
    if len(ranked) != len(targets):
        raise ValueError("ranked predictions and targets differ in length")
    return list(zip(ranked, targets))


def _hits(ranked: RankedPredictions, targets, alpha: int, mu: float) -> list[bool]:
    out = []
    for span, q in targets:
        top = ranked.top(q, alpha) if q < ranked.n_queries else []
        out.append(any(iou(p, span) > mu for p in top))
    return out


def recall_at(ranked, targets, alpha: int, mu: float) -> float:
    """Fraction of query instances with a top-``alpha`` linked span of IoU > ``mu``."""
    if alpha < 1 or not 0.0 < mu < 1.0:
        raise ValueError(f"need alpha >= 1 and mu in (0, 1), got {alpha}, {mu}")
    hits = [h for r, t in _pairs(ranked, targets) for h in _hits(r, t, alpha, mu)]
    return sum(hits) / len(hits) if hits else 0.0


def _top1_ious(ranked: RankedPredictions, targets) -> list[float]:
    out = []
    for span, q in targets:
        top = ranked.top(q, 1) if q < ranked.n_queries else []
        out.append(iou(top[0], span) if top else 0.0)
    return out


def mean_iou(ranked, targets) -> float:
    vals = [v for r, t in _pairs(ranked, targets) for v in _top1_ious(r, t)]
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(vals) / len(vals) if vals else 0.0


@dataclass
class MetricReport:
    recall: dict[tuple[int, float], float]
    miou: float
    n_samples: int
    n_queries: int = 0

    @property
    def row(self) -> dict[str, float]:
        return {
            "R1@0.5": self.recall[(1, 0.5)],
            "R1@0.7": self.recall[(1, 0.7)],
            "R5@0.5": self.recall[(5, 0.5)],
            "R5@0.7": self.recall[(5, 0.7)],
            "mIoU": self.miou,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow((*COLUMNS, "n_samples", "n_queries"))
        w.writerow((*(f"{v:.6f}" for v in self.row.values()), self.n_samples, self.n_queries))
        return buf.getvalue()

    def table(self) -> str:
        """Percentages, two decimals, one header row."""
        head = " | ".join(f"{c:>7}" for c in COLUMNS)
        vals = " | ".join(f"{100 * v:7.2f}" for v in self.row.values())
        return f"{head}\n{'-' * len(head)}\n{vals}\n"

    def to_dict(self) -> dict:
        return {**self.row, "n_samples": self.n_samples, "n_queries": self.n_queries}


def report(ranked: Sequence[RankedPredictions], targets: Sequence) -> MetricReport:
    recall = {(a, m): recall_at(list(ranked), list(targets), a, m) for a in ALPHAS for m in MUS}
    return MetricReport(recall, mean_iou(list(ranked), list(targets)), len(ranked),
                        sum(len(t) for t in targets))


def evaluate(model, samples, batch_size: int = 32) -> MetricReport:
    """Run the model over ``samples`` and score the final decoder layer."""
    if not samples:
        raise ValueError("no samples to evaluate")
    ranked = []
    for out in model.predict(samples, batch_size):
        ranked.extend(link_predictions(out, b) for b in range(len(out.n_queries)))
    return report(ranked, [s.targets for s in samples])
