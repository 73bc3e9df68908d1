"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each case checks that both backends agree before timing them.
"""

import argparse
import timeit

import numpy as np

from hyperens import kernels


def cases(gen):
    x = gen.normal(size=(32, 16, 16, 8))
    k = gen.normal(size=(3, 3, 8, 16))
    g = gen.normal(size=(32, 14, 14, 16))
    probs = gen.uniform(0.05, 1.0, size=(200, 500))
    running = gen.uniform(0.0, 3.0, size=500)
    return {
        "conv2d_forward": lambda impl: kernels.conv2d_forward(x, k, 1, impl=impl),
        "conv2d_backward_kernel": lambda impl: kernels.conv2d_backward_kernel(x, g, 3, 1, impl=impl),
        "conv2d_backward_input": lambda impl: kernels.conv2d_backward_input(g, k, x.shape, 1, impl=impl),
        "greedy_scores": lambda impl: kernels.greedy_scores(probs, running, 3.0, impl=impl),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    gen = np.random.default_rng(0)
    print(f"{'kernel':24s}" + "".join(f"{name:>12s}" for name in backends) + f"{'speedup':>10s}")
    for name, fn in cases(gen).items():
        results = {b: fn(impl) for b, impl in backends.items()}
        ref = results["python"]
        for b, r in results.items():
            np.testing.assert_allclose(r, ref, rtol=1e-10, atol=1e-10, err_msg=f"{name} [{b}]")
        times = {b: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
                 for b, impl in backends.items()}
        row = f"{name:24s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
