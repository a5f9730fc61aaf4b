"""Compare the compiled and pure-Python kernels on route enumeration and scatter-add.

Run with ``python benchmarks/bench_kernels.py``. Each case checks that both
backends produce identical results before timing them.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from pathscape import kernels, lattice
from pathscape.archspec import parse_spec
from pathscape.engine.functional import conv_index

ROUTE_SPEC = """
{"rank": 2, "input": [11, 11, 2], "layers": [
  {"type": "conv", "k": 3, "c_in": 2, "c_out": 2},
  {"type": "conv", "k": 3, "c_in": 2, "c_out": 2},
  {"type": "conv", "k": 3, "c_in": 2, "c_out": 2},
  {"type": "conv", "k": 3, "c_in": 2, "c_out": 1}
]}
"""


def route_case():
    spec = parse_spec(ROUTE_SPEC)
    chains = lattice._chains(lattice._plan(spec), spec.rank)
    stages = np.ascontiguousarray(chains[0], dtype=np.int64).reshape(-1, 13)
    shape = (spec.input_channels, *spec.input_extent)

    def run(backend):
        counts = np.zeros(shape, dtype=np.int64)
        backend.enumerate_chain(stages, 0, 1, 1, counts)
        return counts

    return "enumerate_chain (4 conv layers, 3x3 kernels, 2 channels)", run


def scatter_case():
    index = conv_index(8, (32, 32), (3, 3), 1, 1, 1)
    size = 8 * 32 * 32
    rng = np.random.default_rng(0)
    src = rng.standard_normal((16, index.size))

    def run(backend):
        return backend.scatter_add(src, index.ravel(), size)

    return f"scatter_add (batch 16, {index.size} entries, 8x32x32 target)", run


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = kernels.BACKENDS
    if "cython" not in backends:
        print("compiled kernels unavailable; timing the pure-Python backend only")
    for name, run in (route_case(), scatter_case()):
        results = {b: run(mod) for b, mod in backends.items()}
        ref = results["python"]
        for b, out in results.items():
            if not np.allclose(out, ref, rtol=1e-12, atol=1e-12):
                raise AssertionError(f"{b} backend disagrees with python on {name}")
        print(name)
        times = {}
        for b, mod in backends.items():
            times[b] = min(timeit.repeat(lambda m=mod: run(m), number=1, repeat=args.repeat))
            print(f"  {b:<7s} {times[b] * 1e3:10.3f} ms")
        if "cython" in times:
            print(f"  speedup {times['python'] / times['cython']:.1f}x")


if __name__ == "__main__":
    main()
