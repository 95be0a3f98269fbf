"""Procedural grounding samples standing in for backbone-extracted features.

Each sample carries ``K`` events. Event ``i`` has a unit-norm signature drawn
from a fixed bank; the signature is added to every frame whose center falls
inside the event span, and the query row ``i`` is the same signature plus
independent noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .intervals import TimeSpan

FORMAT_NAME = "spanset-corpus"
FORMAT_VERSION = 1

# (probability, low, high) of the event width mixture
WIDTH_MIXTURE = ((0.5, 0.05, 0.15), (0.3, 0.15, 0.4), (0.2, 0.4, 0.8))


class CorpusError(ValueError):
    pass


@dataclass
class CorpusSpec:
    n_samples: int = 1000
    T: int = 64
    d_in: int = 32
    k_min: int = 1
    k_max: int = 4
    noise_sigma: float = 0.1
    signature_bank_size: int = 64
    seed: int = 0
    first_id: int = 0

    def validate(self) -> None:
        if self.T < 4 or self.d_in < 4:
            raise CorpusError(f"need T >= 4 and d_in >= 4 (got T={self.T}, d_in={self.d_in})")
        if self.n_samples < 0:
            raise CorpusError("n_samples must be >= 0")
        if not 1 <= self.k_min <= self.k_max:
            raise CorpusError(f"invalid K range [{self.k_min}, {self.k_max}]")
        if self.signature_bank_size < self.k_max:
            raise CorpusError("signature bank smaller than k_max")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CorpusError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundingSample:
    frames: np.ndarray                          # (T, d_in)
    queries: np.ndarray                         # (K, d_in)
    targets: list[tuple[TimeSpan, int]] = field(default_factory=list)
    sample_id: int = 0

    @property
    def K(self) -> int:
        return self.queries.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroundingSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.targets == other.targets
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.queries, other.queries)
        )


def signature_bank(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0xB4A7])
    bank = rng.standard_normal((spec.signature_bank_size, spec.d_in))
    return bank / np.linalg.norm(bank, axis=1, keepdims=True)


def frame_mask(span: TimeSpan, T: int) -> np.ndarray:
    """Frames whose center lies inside the span."""
    centers = (np.arange(T) + 0.5) / T
    return (centers >= span.s) & (centers <= span.e)


def _draw_width(rng: np.random.Generator, T: int) -> float:
    u = rng.random()
    acc = 0.0
    for prob, lo, hi in WIDTH_MIXTURE:
        acc += prob
        if u < acc:
            break
    w = rng.uniform(lo, hi)
    return float(min(max(w, 2.0 / T), 1.0))


def generate_sample(spec: CorpusSpec, sample_id: int, bank: np.ndarray | None = None) -> GroundingSample:
    if bank is None:
        bank = signature_bank(spec)
    rng = np.random.default_rng([spec.seed, 1, sample_id])
    K = int(rng.integers(spec.k_min, spec.k_max + 1))
    sig_idx = rng.choice(bank.shape[0], size=K, replace=False)
    spans: list[TimeSpan] = []
    while len(spans) < K:
        w = _draw_width(rng, spec.T)
        start = rng.uniform(0.0, 1.0 - w)
        span = TimeSpan(start, min(start + w, 1.0))
        if span not in spans:
            spans.append(span)
    frames = rng.normal(0.0, spec.noise_sigma, size=(spec.T, spec.d_in)) if spec.noise_sigma > 0 \
        else np.zeros((spec.T, spec.d_in))
    queries = np.empty((K, spec.d_in))
    for i, (span, si) in enumerate(zip(spans, sig_idx)):
        frames[frame_mask(span, spec.T)] += bank[si]
        noise = rng.normal(0.0, spec.noise_sigma, size=spec.d_in) if spec.noise_sigma > 0 else 0.0
        queries[i] = bank[si] + noise
    return GroundingSample(frames, queries, [(sp, i) for i, sp in enumerate(spans)], sample_id)


def generate(spec: CorpusSpec) -> list[GroundingSample]:
    """Deterministic corpus for ``spec``; sample ids run from ``spec.first_id``."""
    spec.validate()
    bank = signature_bank(spec)
    return [generate_sample(spec, spec.first_id + i, bank) for i in range(spec.n_samples)]


def _cosine_rows(frames: np.ndarray, q: np.ndarray) -> np.ndarray:
    nf = np.linalg.norm(frames, axis=1)
    nq = np.linalg.norm(q)
    return frames @ q / (nf * nq + 1e-12)


def oracle_localize(sample: GroundingSample, threshold: float = 0.5) -> list[TimeSpan]:
    """Non-learned baseline: longest run of frames with cosine > threshold per query."""
    T = sample.T
    out = []
    for q in sample.queries:
        cos = _cosine_rows(sample.frames, q)
        above = cos > threshold
        best_len, best_start, run_start = 0, -1, None
        for f in range(T + 1):
            if f < T and above[f]:
                if run_start is None:
                    run_start = f
            elif run_start is not None:
                if f - run_start > best_len:
                    best_len, best_start = f - run_start, run_start
                run_start = None
        if best_len == 0:
            f = int(np.argmax(cos))
            out.append(TimeSpan(f / T, (f + 1) / T))
        else:
            out.append(TimeSpan(best_start / T, (best_start + best_len) / T))
    return out


# ------------------------------------------------------------------ file format

def header_path(path: str | Path) -> Path:
    return Path(str(path) + ".header.json")


def save_corpus(path: str | Path, samples: list[GroundingSample], spec: CorpusSpec) -> None:
    """One JSON record per line plus a sidecar header with the spec and seed.

    Floats are written with ``repr`` precision, so reloading is bit-exact.
    """
    path = Path(path)
    with path.open("w") as fh:
        for s in samples:
            rec = {
                "sample_id": int(s.sample_id),
                "T": int(s.T),
                "K": int(s.K),
                "frames": s.frames.ravel().tolist(),
                "queries": s.queries.ravel().tolist(),
                "targets": [[sp.s, sp.e, int(q)] for sp, q in s.targets],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "n_records": len(samples),
    }
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> tuple[list[GroundingSample], CorpusSpec]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    hp = header_path(path)
    if not hp.exists():
        raise CorpusError(f"missing corpus header {hp}")
    header = json.loads(hp.read_text())
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise CorpusError(f"unsupported corpus header in {hp}")
    spec = CorpusSpec.from_dict(header["spec"])
    samples = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                T, K = rec["T"], rec["K"]
                frames = np.asarray(rec["frames"], dtype=np.float64).reshape(T, -1)
                queries = np.asarray(rec["queries"], dtype=np.float64).reshape(K, -1)
                targets = [(TimeSpan(s, e), int(q)) for s, e, q in rec["targets"]]
            except (KeyError, ValueError, TypeError) as exc:
                raise CorpusError(f"{path}:{line_no}: malformed record ({exc})") from exc
            samples.append(GroundingSample(frames, queries, targets, int(rec["sample_id"])))
    if len(samples) != header.get("n_records", len(samples)):
        raise CorpusError(f"{path}: header says {header['n_records']} records, found {len(samples)}")
    return samples, spec
