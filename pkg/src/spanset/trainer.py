"""AdamW training loop with explore-and-match phase instrumentation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .autodiff import parameters_norm
from .losses import LossWeights, final_set_loss
from .model import VidGTR, collate

log = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "lr", "l1", "giou", "set_guidance", "total", "grad_norm")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    total_steps: int = 5000
    lr_drop_step: int | None = None
    lr_drop_factor: float = 0.1
    lr_schedule: str = "step"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 0.1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.lr_drop_step is None:
            self.lr_drop_step = int(0.7 * self.total_steps)
        if self.lr <= 0 or self.weight_decay <= 0:
            raise ValueError("lr and weight_decay must be positive")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        if self.lr_drop_step > self.total_steps:
            raise ValueError("lr_drop_step must not exceed total_steps")
        if self.lr_schedule not in ("step", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        """Step mode: two plateaus split at ``lr_drop_step``. Linear mode: ramp from
        ``lr`` down to ``lr * lr_drop_factor`` over the whole run."""
        if self.lr_schedule == "linear":
            frac = step / max(1, self.total_steps - 1)
            return self.lr * (1.0 - (1.0 - self.lr_drop_factor) * min(frac, 1.0))
        return self.lr if step < self.lr_drop_step else self.lr * self.lr_drop_factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """One decoupled-weight-decay Adam update in place. Returns False (and
    counts a skip) when any gradient is non-finite."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return False
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        data = p.data if hasattr(p, "data") else p
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        kernels.adamw_update(data, g, state.m[name], state.v[name], lr, weight_decay,
                             b1, b2, c1, c2, eps)
    return True


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to global norm at most ``max_norm``; returns the norm before clipping."""
    norm = parameters_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class PhaseReport:
    sg_drop_step: int
    sg_drop_ratio: float
    span_rebound: bool
    rebound_delta: float
    cliff: bool
    window: int
    total_steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth(x: np.ndarray, w: int) -> np.ndarray:
    """Trailing running mean over ``w`` entries."""
    if w <= 1 or len(x) == 0:
        return x.astype(np.float64)
    c = np.cumsum(np.insert(x.astype(np.float64), 0, 0.0))
    out = np.empty(len(x))
    for i in range(len(x)):
        lo = max(0, i + 1 - w)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def detect_phase(rows: list[dict], total_steps: int | None = None, window_frac: float = 0.05,
                 rebound_frac: float = 0.02, smooth_frac: float = 0.01) -> PhaseReport:
    """Locate the steepest relative decline of the set guidance loss and check
    whether the span losses rise transiently around it.

    The drop ratio at step i is ``1 - sg[i + w] / sg[i]`` on running-mean
    curves with ``w`` = ``window_frac`` of the run; the reported step is the
    window center. The rebound check looks for a positive change of
    ``l1 + giou`` over ``rebound_frac`` of the run starting anywhere within
    ``window_frac`` of that step.
    """
    n = len(rows)
    total = total_steps or n
    if n < 3:
        return PhaseReport(0, 0.0, False, 0.0, False, 0, total)
    w = max(1, int(round(window_frac * total)))
    r = max(1, int(round(rebound_frac * total)))
    sm = max(1, int(round(smooth_frac * total)))
    sg = _smooth(np.asarray([row["set_guidance"] for row in rows]), sm)
    span = _smooth(np.asarray([row["l1"] + row["giou"] for row in rows]), sm)
    w = min(w, n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sg[:-w] > 0, 1.0 - sg[w:] / sg[:-w], 0.0)
    start = int(np.argmax(ratio))
    drop_ratio = float(ratio[start])
    center = start + w // 2
    lo = max(0, center - w)
    hi = min(n - 1 - r, center + w)
    best = -math.inf
    for i in range(lo, hi + 1):
        best = max(best, span[i + r] - span[i])
    rebound = best > 0
    return PhaseReport(
        sg_drop_step=int(rows[center]["step"]) if "step" in rows[center] else center,
        sg_drop_ratio=drop_ratio,
        span_rebound=bool(rebound),
        rebound_delta=float(best) if best > -math.inf else 0.0,
        cliff=drop_ratio > 0.5,
        window=w,
        total_steps=total,
    )


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Sample indices for ``step``: a walk through seeded per-epoch permutations,
    so any step's batch is reproducible without replaying earlier ones."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 2, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
        pos += take
    return np.asarray(out, dtype=np.int64)


@dataclass
class TrainResult:
    model: VidGTR
    phase: PhaseReport
    curve: list[dict]
    optimizer: AdamState
    seconds: float


def write_curve(path: str | Path, rows: list[dict], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CURVE_FIELDS)
        for row in rows:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in CURVE_FIELDS[1:]])


def read_curve(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        rows = []
        for rec in csv.DictReader(fh):
            row = {k: float(v) for k, v in rec.items()}
            row["step"] = int(row["step"])
            rows.append(row)
        return rows


def train(model: VidGTR, corpus, config: TrainConfig, start_step: int = 0,
          optimizer: AdamState | None = None, on_step: Callable[[dict], None] | None = None,
          max_bad_steps: int = 10, stop_step: int | None = None) -> TrainResult:
    """Run optimization steps ``start_step .. config.total_steps`` (or up to
    ``stop_step`` for a partial run that is resumed later).

    Batches and dropout masks are functions of ``(seed, step)``, so a run
    resumed from a checkpoint continues exactly where it left off.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    opt = optimizer or AdamState()
    w = config.weights
    params = model.parameters()
    rows: list[dict] = []
    bad = 0
    t0 = time.perf_counter()
    model.train()
    end = config.total_steps if stop_step is None else min(stop_step, config.total_steps)
    for step in range(start_step, end):
        lr = config.lr_at(step)
        idx = batch_indices(len(corpus), config.batch_size, step, config.seed)
        samples = [corpus[i] for i in idx]
        batch = collate(samples)
        model.rng = np.random.default_rng([config.seed, 3, step])
        model.zero_grad()
        out = model(batch)
        loss, rec, _ = final_set_loss(out, [s.targets for s in samples], w)
        if not np.isfinite(loss.item()):
            bad += 1
            log.warning("step %d: non-finite loss (%d consecutive)", step, bad)
            if bad >= max_bad_steps:
                raise DivergenceError(f"loss non-finite for {bad} consecutive steps at step {step}")
            rows.append(dict(step=step, lr=lr, **rec.as_row(), grad_norm=float("nan")))
            continue
        bad = 0
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        norm = clip_grad_norm(grads, config.grad_clip_norm)
        adamw_step(params, grads, opt, lr, config.weight_decay, config.betas, config.adam_eps)
        row = dict(step=step, lr=lr, **rec.as_row(), grad_norm=norm)
        rows.append(row)
        if on_step is not None:
            on_step(row)
    model.eval()
    phase = detect_phase(rows, end - start_step)
    return TrainResult(model, phase, rows, opt, time.perf_counter() - t0)
