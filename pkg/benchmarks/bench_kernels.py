"""Wall-clock comparison of the numba and pure-numpy simulation backends.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Both backends run the same loop source, so the traces are identical and only
the timing differs.  The first numba call is excluded (JIT compilation).
"""
import argparse
import time

import numpy as np

from trignet.plant import NonlinearPlant, generate_random_system, random_initial_state
from trignet.sim import SimConfig, run_simulation
from trignet.trigger import synthesize


def cases():
    nl = NonlinearPlant(64.0)
    yield "two-body basic, 5000 steps", nl, synthesize(nl), SimConfig(0.5, 1e-4, "basic", x0=(-4.0, 3.0))
    lin = generate_random_system(3, 3, 7)
    x0 = tuple(random_initial_state(lin, 7))
    design = synthesize(lin)
    yield ("linear n=3 basic, 20000 steps", lin, design,
           SimConfig(20.0, 1e-3, "basic", x0=x0, record_every=100))
    yield ("linear n=3 parsimonious, 20000 steps", lin, design,
           SimConfig(20.0, 1e-3, "parsimonious", x0=x0, record_every=100))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    print(f"{'case':40s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speed-up':>9s}")
    for name, plant, design, cfg in cases():
        run_simulation(plant, design, cfg, backend="numba")
        t_jit, fast = best_of(lambda: run_simulation(plant, design, cfg, backend="numba"), args.repeat)
        t_py, slow = best_of(lambda: run_simulation(plant, design, cfg, backend="numpy"), args.repeat)
        assert np.array_equal(fast[0].x, slow[0].x), "backends disagree"
        print(f"{name:40s} {t_jit:10.4f} {t_py:10.4f} {t_py / t_jit:8.0f}x")


if __name__ == "__main__":
    main()
