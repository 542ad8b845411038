"""Benchmark the compiled state-enumeration kernels against the numpy fallback.

Times the per-state L1 residual kernel and its gradient on training-loop
shapes, checks that both backends agree, and prints the speedup.  Run:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 9 --min-time 0.05
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from msvae.kernels import available_backends

# (label, B, M, K, D): the two reproduction protocols and a larger stress shape.
CASES = [
    ("two sources, M=100", 8, 100, 2, 100),
    ("six sources, M=1", 125, 1, 6, 100),
    ("ten sources, M=1", 125, 1, 10, 144),
]


def _states(k: int) -> np.ndarray:
    idx = np.arange(2**k, dtype=np.uint32)
    return ((idx[:, None] >> np.arange(k)[None, :]) & 1).astype(np.uint8)


def _time(fn, repeats: int, min_time: float) -> float:
    best = np.inf
    for _ in range(repeats):
        loops = 0
        start = time.perf_counter()
        while True:
            fn()
            loops += 1
            elapsed = time.perf_counter() - start
            if elapsed >= min_time:
                break
        best = min(best, elapsed / loops)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5, help="timing repetitions; best is kept")
    parser.add_argument("--min-time", type=float, default=0.02,
                        help="minimum seconds of work per repetition")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not importable; timing the python fallback only")
    rng = np.random.default_rng(args.seed)

    header = f"{'case':<22} {'kernel':<9}" + "".join(f" {name:>12}" for name in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9} {'max|diff|':>11}"
    print(header)
    print("-" * len(header))

    for label, b, m, k, d in CASES:
        x = rng.normal(size=(b, d))
        mu = rng.normal(size=(b, m, k, d))
        states = _states(k)
        upstream = rng.normal(size=(b, m, 2**k))

        for kernel, call in (
            ("forward", lambda mod: mod.state_l1_residuals(x, mu, states)),
            ("gradient", lambda mod: mod.state_l1_residuals_grad(x, mu, states, upstream)),
        ):
            times = {}
            outputs = {}
            for name, mod in backends.items():
                outputs[name] = call(mod)
                times[name] = _time(lambda: call(mod), args.repeats, args.min_time)
            row = f"{label:<22} {kernel:<9}"
            for name in backends:
                row += f" {times[name] * 1e3:>10.3f}ms"
            if len(backends) == 2:
                speed = times["python"] / times["cython"]
                diff = float(np.max(np.abs(outputs["python"] - outputs["cython"])))
                row += f" {speed:>8.2f}x {diff:>11.2e}"
            print(row)


if __name__ == "__main__":
    main()
