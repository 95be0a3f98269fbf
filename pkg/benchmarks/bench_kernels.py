"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend and the speedup.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from spanset import _kernels_py as py

try:
    from spanset import _ckernels as cy
except ImportError:
    cy = None


def _time(fn, repeat: int) -> float:
    fn()  # warm-up
    runs = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t)
    return statistics.median(runs)


def cases(rng: np.random.Generator):
    """(name, callable taking a backend module) pairs sized like a desk training step."""
    costs = [rng.standard_normal((4, 40)) for _ in range(16)]
    x = rng.standard_normal((16 * 68, 128))
    gain, bias = rng.standard_normal(128), rng.standard_normal(128)
    ln = py.layer_norm_fwd(x, gain, bias, 1e-5)
    g = rng.standard_normal(x.shape)
    att = rng.standard_normal((16 * 4, 68, 68))
    mask = np.zeros((16 * 4, 68), dtype=np.uint8)
    mask[:, 66:] = 1
    sm = py.softmax_fwd(att, mask, 0.17)
    ga = rng.standard_normal(att.shape)
    p = rng.standard_normal(128 * 256)
    gp = rng.standard_normal(p.shape)
    bits = rng.integers(0, 65536, size=x.shape, dtype=np.uint16)

    def adam(mod):
        m, v, q = np.zeros_like(p), np.zeros_like(p), p.copy()
        mod.adamw_update(q, gp, m, v, 1e-4, 1e-4, 0.9, 0.999, 0.1, 0.001, 1e-8)

    return [
        ("hungarian 16x(4x40)", lambda mod: [mod.hungarian_lexmin(c) for c in costs]),
        ("layer_norm fwd 1088x128", lambda mod: mod.layer_norm_fwd(x, gain, bias, 1e-5)),
        ("layer_norm bwd 1088x128", lambda mod: mod.layer_norm_bwd(g, ln[1], ln[2], gain)),
        ("softmax fwd 64x68x68", lambda mod: mod.softmax_fwd(att, mask, 0.17)),
        ("softmax bwd 64x68x68", lambda mod: mod.softmax_bwd(ga, sm, 0.17)),
        ("adamw 32768", adam),
        ("dropout fwd 1088x128", lambda mod: mod.dropout_fwd(x, bits, 6554, 1 / 0.9)),
    ]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(rng):
        tp = _time(lambda: fn(py), args.repeat) * 1e3
        if cy is None:
            print(f"{name:<26}{tp:12.3f}{'n/a':>12}{'':>10}")
            continue
        tc = _time(lambda: fn(cy), args.repeat) * 1e3
        print(f"{name:<26}{tp:12.3f}{tc:12.3f}{tp / tc:9.1f}x")


if __name__ == "__main__":
    main()
