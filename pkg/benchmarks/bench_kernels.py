#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-Python fallback.

Times the hot kernels on desk-scale shapes and a full training step,
and verifies the two backends agree bit-for-bit on every workload.

Usage:
    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import random
import time
from array import array

from peftkit.backend import py_kernels

try:
    from peftkit.backend import _ckernels
except ImportError:
    _ckernels = None


def rand_buf(rng, n):
    return array("d", [rng.uniform(-1, 1) for _ in range(n)])


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_workloads(rng):
    a64 = rand_buf(rng, 64 * 64)
    b64 = rand_buf(rng, 64 * 64)
    x = rand_buf(rng, 32 * 64)
    gain = array("d", [1.0] * 64)
    bias = array("d", [0.0] * 64)
    ka = rand_buf(rng, 4 * 4)
    kb = rand_buf(rng, 16 * 16)
    return [
        ("matmul 64x64 @ 64x64", lambda k: k.matmul(a64, b64, 64, 64, 64)),
        ("matmul 32x64 @ 64x64", lambda k: k.matmul(x, a64, 32, 64, 64)),
        ("softmax 32x64", lambda k: k.softmax_rows(x, 32, 64)),
        ("layernorm 32x64",
         lambda k: k.layernorm_rows(x, gain, bias, 32, 64, 1e-12)),
        ("kron 4x4 (x) 16x16", lambda k: k.kron(ka, kb, 4, 4, 16, 16)),
    ]


def train_step_seconds(repeats):
    """One optimizer step of LoRA on the reference copy task."""
    from peftkit.peft import attach, build
    from peftkit.tensor import Tape
    from peftkit.trainer import (
        TRAIN_REFERENCE_BASE,
        TRAIN_REFERENCE_TASK,
        AdamOptimizer,
        TrainConfig,
        make_task,
        technique_hyper,
    )
    from peftkit.transformer import build_base

    task = make_task(TRAIN_REFERENCE_TASK)
    base = build_base(TRAIN_REFERENCE_BASE, 0)
    module = build("lora", technique_hyper("lora", 0), TRAIN_REFERENCE_BASE)
    composed = attach(base, module)
    tokens = [list(s.ids) for s in task.samples]
    targets = [list(s.targets) for s in task.samples]
    opt = AdamOptimizer(composed.trainable_tensors(), TrainConfig())

    def step():
        for p in composed.trainable_tensors():
            p.tensor.grad = None
        with Tape() as tape:
            loss = composed.loss(tokens, targets)
            tape.backward(loss)
        opt.step()

    return timeit(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _ckernels is None:
        print("compiled kernel core not built; "
              "run `python setup.py build_ext --inplace` first")

    rng = random.Random(0)
    rows = []
    for name, work in kernel_workloads(rng):
        pure = timeit(lambda: work(py_kernels), args.repeats)
        if _ckernels is not None:
            comp = timeit(lambda: work(_ckernels), args.repeats)
            got_c = work(_ckernels)
            got_p = work(py_kernels)
            if isinstance(got_c, tuple):
                agree = all(c.tobytes() == p.tobytes()
                            for c, p in zip(got_c, got_p))
            else:
                agree = got_c.tobytes() == got_p.tobytes()
            rows.append((name, pure, comp, pure / comp,
                         "yes" if agree else "NO"))
        else:
            rows.append((name, pure, None, None, "-"))

    import os
    backend = os.environ.get("PEFTKIT_BACKEND", "auto")
    print(f"\nkernel benchmarks (best of {args.repeats}; "
          f"PEFTKIT_BACKEND={backend})\n")
    header = f"{'workload':28s} {'pure (ms)':>10s} {'compiled (ms)':>14s} " \
             f"{'speedup':>8s} {'bit-equal':>10s}"
    print(header)
    print("-" * len(header))
    for name, pure, comp, speedup, agree in rows:
        comp_s = f"{comp * 1e3:14.3f}" if comp is not None else f"{'-':>14s}"
        speed_s = f"{speedup:8.1f}" if speedup is not None else f"{'-':>8s}"
        print(f"{name:28s} {pure * 1e3:10.3f} {comp_s} {speed_s} {agree:>10s}")

    print("\nend-to-end: one LoRA training step on the reference task")
    step = train_step_seconds(args.repeats)
    from peftkit import BACKEND_NAME
    print(f"  selected backend ({BACKEND_NAME}): {step * 1e3:.1f} ms/step")


if __name__ == "__main__":
    main()
