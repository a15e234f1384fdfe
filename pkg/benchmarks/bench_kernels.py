"""Compare the numba and numpy kernel backends.

Times im2col, col2im and the fused Adam update at the shapes a training step
uses, checks that both backends give bitwise-identical results, and times one
full training step under the backend selected by AFFORDANCE_BACKEND.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import os
import time

import numpy as np

from affordance.numerics import kernels

CONV_SHAPES = [  # (input shape, kernel, stride, pad) of the object encoder
    ((1, 1, 32, 32), 4, 2, 1),
    ((1, 16, 16, 16), 4, 2, 1),
    ((1, 32, 8, 8), 4, 2, 1),
]
ADAM_SIZE = 481_600  # parameters of the default insertability model


def best_of(fn, repeats):
    fn()  # warm-up / JIT compile
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for shape, k, s, p in CONV_SHAPES:
        x = rng.standard_normal(shape)
        a = kernels.im2col_numpy(x, k, s, p)
        b = kernels.im2col_numba(x, k, s, p)
        same = np.array_equal(a, b)
        t_np = best_of(lambda: kernels.im2col_numpy(x, k, s, p), repeats)
        t_nb = best_of(lambda: kernels.im2col_numba(x, k, s, p), repeats)
        rows.append(("im2col", shape, t_np, t_nb, same))
        a2 = kernels.col2im_numpy(a, shape, k, s, p)
        b2 = kernels.col2im_numba(a, shape, k, s, p)
        same = np.array_equal(a2, b2)
        t_np = best_of(lambda: kernels.col2im_numpy(a, shape, k, s, p), repeats)
        t_nb = best_of(lambda: kernels.col2im_numba(a, shape, k, s, p), repeats)
        rows.append(("col2im", shape, t_np, t_nb, same))
    return rows


def bench_adam(repeats):
    rng = np.random.default_rng(0)
    p0, g = rng.standard_normal(ADAM_SIZE), rng.standard_normal(ADAM_SIZE)
    m0, v0 = rng.standard_normal(ADAM_SIZE) * 0.1, rng.random(ADAM_SIZE)
    outs = []
    for fn in (kernels.adam_update_numpy, kernels.adam_update_numba):
        p, m, v = p0.copy(), m0.copy(), v0.copy()
        fn(p, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 3.0)
        outs.append((p, m, v))
    same = all(np.array_equal(a, b) for a, b in zip(*outs))
    p, m, v = p0.copy(), m0.copy(), v0.copy()
    t_np = best_of(lambda: kernels.adam_update_numpy(p, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 3.0),
                   repeats)
    t_nb = best_of(lambda: kernels.adam_update_numba(p, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 3.0),
                   repeats)
    return [("adam", (ADAM_SIZE,), t_np, t_nb, same)]


def bench_step(steps):
    from affordance import model, synthgen
    ds = synthgen.generate(synthgen.ScenarioConfig("insertability", seed=0)).split("train")
    params = model.init_params(ds.channels, seed=0, dataset=ds)
    trainer = model.Trainer(params, model.TrainConfig(seed=0))
    rng = np.random.default_rng(0)
    trainer.step(ds.samples[0], rng)
    t0 = time.perf_counter()
    for i in range(steps):
        trainer.step(ds.samples[i % len(ds.samples)], rng)
    return (time.perf_counter() - t0) / steps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50, help="timed repetitions per kernel")
    ap.add_argument("--steps", type=int, default=200, help="training steps to time")
    args = ap.parse_args()
    print(f"selected backend: {kernels.BACKEND} "
          f"(AFFORDANCE_BACKEND={os.environ.get('AFFORDANCE_BACKEND', '')!r})")
    print(f"{'kernel':8s} {'shape':18s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  bitwise")
    for name, shape, t_np, t_nb, same in bench_conv(args.repeats) + bench_adam(args.repeats):
        print(f"{name:8s} {str(shape):18s} {t_np * 1e3:10.4f} {t_nb * 1e3:10.4f} "
              f"{t_np / t_nb:8.2f}  {'yes' if same else 'NO'}")
    print(f"training step ({kernels.BACKEND}): {bench_step(args.steps) * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
