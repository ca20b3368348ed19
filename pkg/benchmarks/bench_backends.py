#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Kernel micro-benchmarks run both implementations in-process; the optional
end-to-end run times a short pre-training slice in a subprocess per backend
(the backend is chosen at import time via MMDLORA_BACKEND).

Usage:
    python benchmarks/bench_backends.py [--e2e] [--repeats N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mmdlora import kernels  # noqa: E402
from mmdlora.tensor import SeededRng  # noqa: E402


def _time(fn, repeats):
    fn()  # warmup (and numba compile)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases():
    rng = SeededRng(0)
    x_small = rng.uniform(-5, 5, (16, 16))       # attention-score scale
    x_wide = rng.uniform(-5, 5, (256, 64))       # batched-token scale
    gain = rng.uniform(0.5, 1.5, 64)
    bias = rng.uniform(-0.5, 0.5, 64)
    g_wide = rng.uniform(-1, 1, (256, 64))
    p = rng.uniform(-1, 1, 4096)
    grad = rng.uniform(-1, 1, 4096)
    pred = rng.uniform(1, 100, 64 * 64)
    gt = rng.uniform(0.5, 100, 64 * 64)
    ys = rng.integers(-16, 64, 32).astype(np.int64)
    xs = rng.integers(-16, 64, 32).astype(np.int64)

    def softmax(impl):
        return lambda: impl.softmax_rows(x_small)

    def softmax_wide(impl):
        return lambda: impl.softmax_rows(x_wide)

    def layernorm(impl):
        return lambda: impl.layernorm_rows(x_wide, gain, bias, 1e-5)

    def layernorm_grad(impl):
        y, xh, istd = impl.layernorm_rows(x_wide, gain, bias, 1e-5)
        return lambda: impl.layernorm_rows_grad(xh, istd, gain, g_wide)

    def unit(impl):
        return lambda: impl.unit_rows(x_wide, 1e-12)

    def lse(impl):
        return lambda: impl.logsumexp_rows(x_wide)

    def adamw(impl):
        m = np.zeros(4096)
        v = np.zeros(4096)
        state = {"t": 0}

        def step():
            state["t"] += 1
            impl.adamw_update(p.copy(), grad, m, v, state["t"], 1e-3, 0.9, 0.999, 1e-8, 0.01)
        return step

    def streaks(impl):
        return lambda: impl.streak_field(64, 64, ys, xs, 16, 0.15)

    def metrics(impl):
        return lambda: impl.metrics_accum(pred, gt, 80.0)

    return [
        ("softmax_rows 16x16", softmax),
        ("softmax_rows 256x64", softmax_wide),
        ("layernorm_rows 256x64", layernorm),
        ("layernorm_grad 256x64", layernorm_grad),
        ("unit_rows 256x64", unit),
        ("logsumexp_rows 256x64", lse),
        ("adamw_update 4096", adamw),
        ("streak_field 64x64", streaks),
        ("metrics_accum 4096px", metrics),
    ]


def run_kernels(repeats):
    impls = kernels.implementations()
    if "numba" not in impls:
        print("numba not importable; nothing to compare")
        return
    print(f"{'kernel':<24} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    print("-" * 60)
    for name, make in kernel_cases():
        t_np = _time(make(impls["numpy"]), repeats)
        t_nb = _time(make(impls["numba"]), repeats)
        print(f"{name:<24} {t_np*1e6:>10.1f}us {t_nb*1e6:>10.1f}us {t_np/t_nb:>8.1f}x")
    print("\nnote: matmul uses BLAS np.dot under both backends and is not listed.")


E2E_SNIPPET = """
import time
from mmdlora.config import ExperimentConfig
from mmdlora import trainer
cfg = ExperimentConfig()
cfg.stage1.iterations = 30
image_enc, text_enc = trainer.build_encoders(cfg)
trainer.pretrain_stage(cfg, image_enc, text_enc)   # warm caches
t0 = time.perf_counter()
trainer.pretrain_stage(cfg, image_enc, text_enc)
print(f"{(time.perf_counter() - t0) / 30 * 1000:.1f}")
"""


def run_e2e():
    print("\nend-to-end: 30 pre-training iterations per backend (ms/iter)")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, MMDLORA_BACKEND=backend)
        env["PYTHONPATH"] = os.path.join(os.path.dirname(__file__), "..", "src")
        out = subprocess.run(
            [sys.executable, "-c", E2E_SNIPPET], env=env,
            capture_output=True, text=True, check=True,
        )
        print(f"  {backend:<6} {out.stdout.strip()} ms/iter")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--e2e", action="store_true", help="also time a training slice per backend")
    args = parser.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    run_kernels(args.repeats)
    if args.e2e:
        run_e2e()


if __name__ == "__main__":
    main()
