"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times each kernel on shapes taken from a scale-1/8 generator at 64x64 and
one full train-style forward/backward pass, checks that both backends give
bit-identical results, and prints a table.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time
from contextlib import contextmanager

import numpy as np

from pamdenoise.model import Generator, as_image_batch
from pamdenoise.tensor import Tape, backward, kernels, ops
from pamdenoise.tensor import _pykernels

try:
    from pamdenoise.tensor import _ckernels
except ImportError:
    _ckernels = None

NAMES = ("im2col", "col2im", "maxpool2_forward", "maxpool2_backward")


def timeit(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


@contextmanager
def backend(mod):
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(mod, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def kernel_cases(rng):
    xp = rng.standard_normal((8, 8, 66, 66))
    cols = rng.standard_normal((8, 8 * 9, 64 * 64))
    x = rng.standard_normal((8, 8, 64, 64))
    out, arg = _pykernels.maxpool2_forward(x)
    g = rng.standard_normal(out.shape)
    return {
        "im2col 8x8x66x66 k3": lambda m: m.im2col(xp, 3, 3, 1),
        "col2im 8x72x4096": lambda m: m.col2im(cols, 8, 8, 66, 66, 3, 3, 1),
        "maxpool fwd 8x8x64x64": lambda m: m.maxpool2_forward(x),
        "maxpool bwd 8x8x32x32": lambda m: m.maxpool2_backward(g, arg),
    }


def train_pass(g, x, r):
    with Tape() as tape:
        loss = ops.sum(ops.mul(g(x), r))
    g.zero_grad()
    backward(loss, tape)
    return loss.item()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernel_cases(rng).items():
        a, b = fn(_pykernels), fn(_ckernels)
        same = all(np.array_equal(u, v) for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        rows.append((name, timeit(lambda: fn(_pykernels), args.repeat), timeit(lambda: fn(_ckernels), args.repeat), same))

    g = Generator(0, "1/8")
    x = as_image_batch(rng.uniform(0, 1, (8, 64, 64)))
    r = rng.standard_normal((8, 1, 64, 64))
    results = {}
    for label, mod in (("python", _pykernels), ("cython", _ckernels)):
        with backend(mod):
            results[label] = (timeit(lambda: train_pass(g, x, r), max(3, args.repeat // 4)), train_pass(g, x, r))
    rows.append(("generator fwd+bwd 8x64x64", results["python"][0], results["cython"][0],
                 results["python"][1] == results["cython"][1]))

    print(f"{'case':28s} {'numpy s':>10s} {'cython s':>10s} {'speedup':>8s}  identical")
    for name, tp, tc, same in rows:
        print(f"{name:28s} {tp:10.5f} {tc:10.5f} {tp / tc:8.2f}  {same}")
    return 0 if all(r[3] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
