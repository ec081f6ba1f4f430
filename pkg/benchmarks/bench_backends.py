#!/usr/bin/env python3
"""Benchmark the compiled extension core against the pure-Python fallback.

Times the three hot kernels on both backends and prints a small table:

* scalar log K / ratio chains (per evaluation),
* exact empirical drift evaluation at a point (per evaluation),
* a full single reverse-diffusion trajectory (per trajectory),

plus the lockstep batched sampler, which is numpy-vectorized on both
backends and shown for scale.  Usage: ``python benchmarks/bench_backends.py``.
"""

import math
import time

import numpy as np

import polar_denoise as pd
from polar_denoise._backend import HAVE_COMPILED, get_backend


def timeit(fn, *, repeat=5, number=1):
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def bench_backend(B):
    out = {}
    # scalar chains at a mix of orders
    cases = [(0.5, 1.0), (24.0, 3.0), (199.0, 1.0), (999.0, 40.0)]

    def scalar():
        for nu, z in cases:
            B.log_k_and_ratio(nu, z)

    out["scalar chain (4 orders)"] = timeit(scalar, number=200)

    rng = np.random.default_rng(0)
    d, n = 50, 100
    atoms = np.ascontiguousarray(rng.standard_normal((n, d)))
    y = rng.standard_normal(d)
    sigma = 1.0
    nu = 0.5 * (d - 2)
    log_norm = (
        -0.5 * d * math.log(2 * math.pi)
        + math.log(2.0 / sigma**2)
        + nu * math.log(math.sqrt(2.0) / sigma)
    )
    out["drift eval (n=100, d=50)"] = timeit(
        lambda: B.drift_eval(atoms, y, sigma, log_norm, 1e-9), number=200
    )

    atoms2 = np.ascontiguousarray(np.array([[1.0] + [0.0] * 9, [-1.0] + [0.0] * 9]))
    y0 = np.full(10, 0.4)
    nu2 = 4.0
    log_norm2 = (
        -5.0 * math.log(2 * math.pi) + math.log(2.0) + nu2 * math.log(math.sqrt(2.0))
    )

    def one_traj():
        rng_t = np.random.Generator(np.random.PCG64(np.random.SeedSequence(7)))
        B.reverse_sim(atoms2, y0, 1.0, log_norm2, 1e9, 500_000, 0.01, 0.1, 1e-6, 10**9, rng_t)

    out["single trajectory (d=10)"] = timeit(one_traj, repeat=3)
    return out


def main():
    rows = {}
    backends = ["python"] + (["compiled"] if HAVE_COMPILED else [])
    for name in backends:
        rows[name] = bench_backend(get_backend(name))

    # batched sampler, identical numpy engine on either backend
    prior = pd.generate_synthetic("two_point", 8, 2, 0, {"separation": 2.0})
    kp = pd.KernelParams(8, 1.0)
    cfg = pd.ModelConfig(
        kernel=kp, stop_threshold=160.0, max_steps=300_000, dt_max=0.01, seed=3
    )
    field = pd.exact_drift(prior, kp, snap_radius=cfg.snap_radius)
    y0 = prior.atoms[0] + 0.5
    t0 = time.perf_counter()
    pd.reverse_sample_batch(field, y0, cfg, 1000)
    batch_time = time.perf_counter() - t0

    width = max(len(k) for k in rows["python"])
    header = f"{'kernel':<{width}}  " + "".join(f"{b:>14}" for b in backends)
    if HAVE_COMPILED:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for key in rows["python"]:
        line = f"{key:<{width}}  "
        for b in backends:
            line += f"{rows[b][key] * 1e6:>12.1f}us"
        if HAVE_COMPILED:
            line += f"{rows['python'][key] / rows['compiled'][key]:>9.1f}x"
        print(line)
    print(f"\nlockstep batch, 1000 trajectories (d=8, numpy engine): {batch_time:.2f}s")
    print(f"active backend: {pd.active_backend()}")


if __name__ == "__main__":
    main()
