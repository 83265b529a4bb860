"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Set PHOTON_DFA_NUMBA=0 to make the package default to numpy; this script
times every available backend regardless and checks they agree.
"""

import argparse
import timeit

import numpy as np

from photon_dfa import kernels


def workloads(rng):
    W = rng.normal(size=(784, 784))
    a, b = rng.normal(size=784), rng.normal(size=784)
    tr, ti = rng.normal(0, np.sqrt(0.5), (1000, 10)), rng.normal(0, np.sqrt(0.5), (1000, 10))
    x = rng.normal(size=10)
    e = rng.uniform(-1, 1, size=10)
    ia, ie, idf = (rng.uniform(0.5, 2.0, size=4096) for _ in range(3))
    y = rng.normal(size=(96, 192))
    return {
        "matvec 784x784": ("matvec", (W, a, b)),
        "complex_intensity 1000x10": ("complex_intensity", (tr, ti, x)),
        "ternary_split 10": ("ternary_split", (e, 0.3)),
        "linear_recovery 4096": ("linear_recovery", (ia, ie, idf)),
        "sin_weighted_mean 96x192": ("sin_weighted_mean", (y,)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    print(f"{'kernel':<28}" + "".join(f"{b:>14}" for b in backends) + "   agree")
    for label, (name, inputs) in workloads(np.random.default_rng(0)).items():
        times, outs = [], []
        for b in backends:
            fn = kernels.get(name, b)
            outs.append(fn(*inputs))  # also triggers compilation
            t = min(timeit.repeat(lambda: fn(*inputs), number=args.repeat, repeat=3)) / args.repeat
            times.append(t)
        agree = all(np.array_equal(np.asarray(o), np.asarray(outs[0])) for o in outs[1:])
        print(f"{label:<28}" + "".join(f"{t * 1e6:>12.2f}us" for t in times) + f"   {agree}")


if __name__ == "__main__":
    main()
