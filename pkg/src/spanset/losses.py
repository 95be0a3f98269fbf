"""Training objectives: set guidance NLL, span localization, and the matched set loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .intervals import TimeSpan
from .matching import Assignment, DimensionError

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 1.0
    lambda_iou: float = 3.0
    lambda_sg: float = 2.0

    def __post_init__(self):
        if min(self.lambda_l1, self.lambda_iou, self.lambda_sg) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Unweighted loss components of the final decoder layer.

    ``total`` is the weighted sum of the three; ``per_layer`` holds the same
    record for each auxiliary decoder layer; ``objective`` is what gets
    differentiated (final plus all auxiliary totals).
    """

    l1: float
    giou: float
    set_guidance: float
    total: float
    per_layer: list["LossBreakdown"] = field(default_factory=list)
    objective: float = 0.0
    clamped: int = 0

    def as_row(self) -> dict:
        return {"l1": self.l1, "giou": self.giou, "set_guidance": self.set_guidance,
                "total": self.total}

    def to_dict(self) -> dict:
        return asdict(self)


def subset_targets(n_proposals: int, n_queries: int) -> np.ndarray:
    """Static partition: proposal i is guided towards query floor(i*K/N)."""
    if n_queries == 0:
        return np.zeros(0, dtype=np.int64)
    return (np.arange(n_proposals) * n_queries) // n_proposals


def _clamped_log(p: Tensor) -> tuple[Tensor, int]:
    n_low = int((p.data < LOG_EPS).sum())
    return ad.log(ad.clamp_min(p, LOG_EPS)), n_low


def set_guidance_loss(correspondence: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over proposals of -log p_i(target_i) for an N x K probability grid."""
    t = np.asarray(targets, dtype=np.int64)
    n = correspondence.shape[0]
    if t.shape != (n,):
        raise DimensionError(f"need one target per proposal ({n}), got {t.shape}")
    if n == 0:
        return Tensor(0.0)
    if t.min() < 0 or t.max() >= correspondence.shape[1]:
        raise DimensionError("set guidance target out of range")
    logp, _ = _clamped_log(correspondence[np.arange(n), t])
    return -logp.mean()


def span_terms(ps: Tensor, pe: Tensor, ts, te) -> tuple[Tensor, Tensor]:
    """Differentiable L1 distance and gIoU between predicted and fixed spans (elementwise)."""
    ts = np.asarray(ts, dtype=np.float64)
    te = np.asarray(te, dtype=np.float64)
    l1 = ad.abs_(ps - ts) + ad.abs_(pe - te)
    inter = ad.clamp_min(ad.minimum(pe, te) - ad.maximum(ps, ts), 0.0)
    union = (pe - ps) + (te - ts) - inter
    hull = ad.maximum(pe, te) - ad.minimum(ps, ts)
    iou = inter / ad.clamp_min(union, LOG_EPS)
    giou = iou - (hull - union) / ad.clamp_min(hull, LOG_EPS)
    return l1, giou


def span_loss(pred_s: Tensor, pred_e: Tensor, target: TimeSpan, w: LossWeights) -> Tensor:
    """lambda_l1 * L1 + lambda_iou * (1 - gIoU) for one prediction."""
    l1, g = span_terms(pred_s, pred_e, target.s, target.e)
    return (l1 * w.lambda_l1 + (1.0 - g) * w.lambda_iou).sum()


def _normalize_targets(targets) -> list[list[tuple[TimeSpan, int]]]:
    if len(targets) and isinstance(targets[0], tuple) and isinstance(targets[0][0], TimeSpan):
        return [list(targets)]
    return [list(t) for t in targets]


def _layer_loss(span_s: Tensor, span_e: Tensor, corr: Tensor, n_prop: np.ndarray,
                n_q: np.ndarray, targets: list[list[tuple[TimeSpan, int]]],
                w: LossWeights) -> tuple[Tensor, LossBreakdown, list[Assignment]]:
    B = len(targets)
    s_np, e_np, c_np = span_s.data, span_e.data, corr.data
    bidx: list[int] = []
    pidx: list[int] = []
    t_s: list[float] = []
    t_e: list[float] = []
    assignments: list[Assignment] = []
    sg_b: list[np.ndarray] = []
    sg_i: list[np.ndarray] = []
    sg_q: list[np.ndarray] = []
    sg_w: list[np.ndarray] = []
    for b, tg in enumerate(targets):
        n, k = int(n_prop[b]), int(n_q[b])
        if len(tg) > n:
            raise DimensionError(f"sample {b}: {len(tg)} targets but only {n} proposals")
        if not tg:
            assignments.append(Assignment((), 0.0))
            continue
        tspan = np.asarray([sp.as_tuple() for sp, _ in tg], dtype=np.float64)
        tq = np.asarray([q for _, q in tg], dtype=np.int64)
        if tq.max() >= k or tq.min() < 0:
            raise DimensionError(f"sample {b}: query index out of range for K={k}")
        pred = np.stack([s_np[b, :n], e_np[b, :n]], axis=1)
        cost = kernels.match_costs(tspan, tq, pred, c_np[b, :n, :k], w.lambda_l1, w.lambda_iou)
        if np.isfinite(cost).all():
            cols, total = kernels.hungarian_lexmin(cost)
        else:
            # diverged outputs: keep the loss non-finite so the trainer sees it
            cols, total = np.arange(len(tg)), float("nan")
        assignments.append(Assignment(tuple((i, int(j)) for i, j in enumerate(cols)), float(total)))
        bidx.extend([b] * len(cols))
        pidx.extend(int(j) for j in cols)
        t_s.extend(tspan[:, 0])
        t_e.extend(tspan[:, 1])
        sg_b.append(np.full(n, b))
        sg_i.append(np.arange(n))
        sg_q.append(subset_targets(n, k))
        sg_w.append(np.full(n, 1.0 / n))

    if not bidx:
        zero = Tensor(0.0)
        return zero, LossBreakdown(0.0, 0.0, 0.0, 0.0), assignments

    idx = (np.asarray(bidx), np.asarray(pidx))
    l1, g = span_terms(span_s[idx], span_e[idx], t_s, t_e)
    l1_sum = l1.sum() * (1.0 / B)
    giou_sum = (1.0 - g).sum() * (1.0 / B)
    gather = (np.concatenate(sg_b), np.concatenate(sg_i), np.concatenate(sg_q))
    logp, n_low = _clamped_log(corr[gather])
    sg = -(logp * np.concatenate(sg_w)).sum() * (1.0 / B)
    total = sg * w.lambda_sg + l1_sum * w.lambda_l1 + giou_sum * w.lambda_iou
    rec = LossBreakdown(
        l1=l1_sum.item(),
        giou=giou_sum.item(),
        set_guidance=sg.item(),
        total=w.lambda_sg * sg.item() + w.lambda_l1 * l1_sum.item() + w.lambda_iou * giou_sum.item(),
        clamped=n_low,
    )
    return total, rec, assignments


def final_set_loss(output, targets, w: LossWeights = LossWeights()):
    """Matched set loss over the final layer plus every auxiliary decoder layer.

    ``targets`` holds, per sample, a list of ``(TimeSpan, query_index)``; a
    single flat list is treated as a batch of one. Each layer is matched
    independently and the matching is not differentiated. Per-sample losses
    are averaged over the batch.

    Returns ``(objective, breakdown, assignments)`` with the final layer's
    assignments.
    """
    tg = _normalize_targets(targets)
    if len(tg) != output.span_s.shape[0]:
        raise DimensionError(f"{len(tg)} target lists for batch of {output.span_s.shape[0]}")
    objective, main, assignments = _layer_loss(
        output.span_s, output.span_e, output.correspondence,
        output.n_proposals, output.n_queries, tg, w,
    )
    clamped = main.clamped
    for layer in output.aux_outputs:
        loss, rec, _ = _layer_loss(layer.span_s, layer.span_e, layer.correspondence,
                                   output.n_proposals, output.n_queries, tg, w)
        objective = objective + loss
        main.per_layer.append(rec)
        clamped += rec.clamped
    main.objective = objective.item()
    main.clamped = clamped
    return objective, main, assignments


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
               floor: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> float:
    """Largest elementwise relative error between reverse-mode and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With ``max_entries``
    only a seeded random subset of coordinates is probed.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise ValueError("loss is not finite")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    coords = [(pi, ix) for pi, p in enumerate(params) for ix in np.ndindex(p.shape)]
    if max_entries is not None and len(coords) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_entries, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    with ad.no_grad():
        for pi, ix in coords:
            data = params[pi].data
            orig = data[ix]
            data[ix] = orig + epsilon
            up = loss_fn().item()
            data[ix] = orig - epsilon
            down = loss_fn().item()
            data[ix] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("loss is not finite under perturbation")
            num = (up - down) / (2.0 * epsilon)
            a = analytic[pi][ix]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
