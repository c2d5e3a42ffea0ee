"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from advdetect import kernels


def cases(rng):
    truth = rng.integers(0, 21, size=512 * 512)
    truth[rng.random(truth.size) < 0.05] = 255
    pred = rng.integers(0, 21, size=truth.size)
    queries = rng.normal(size=(1000, 64))
    refs = rng.normal(size=(200, 64))
    probs = rng.dirichlet(np.ones(102), size=20000)
    return {
        "confusion_counts 512x512, K=21": lambda impl: impl.confusion_counts(truth, pred, 21, 255),
        "rbf_density 1000 x 200 refs, D=64": lambda impl: impl.rbf_density(queries, refs, 8.0),
        "non_max_entropy 20000 x 102": lambda impl: impl.non_max_entropy(probs),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} " + " ".join(f"{name:>12s}" for name in impls) + "   speedup")
    for label, fn in cases(rng).items():
        times = {name: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
                 for name, impl in impls.items()}
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:38s} " + " ".join(f"{t * 1e3:10.2f}ms" for t in times.values()) + f"   {speed:6.2f}x")


if __name__ == "__main__":
    main()
