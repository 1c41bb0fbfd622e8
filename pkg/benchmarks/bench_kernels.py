"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 256] [--width 64] [--repeat 200]

Prints per-call time for each kernel in both backends, and the time of one
full training step of the desk encoder under each backend.
"""
import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np

KERNELS = ["softmax_fwd", "softmax_bwd", "layer_norm_fwd", "layer_norm_bwd", "gelu_fwd", "gelu_bwd"]


def kernel_args(name, rows, width, dtype, rng):
    x = rng.standard_normal((rows, width)).astype(dtype)
    g = rng.standard_normal((rows, width)).astype(dtype)
    out = np.empty_like(x)
    vec = np.ones(width, dtype)
    if name == "softmax_fwd":
        return (x, out)
    if name == "softmax_bwd":
        y = np.exp(x) / np.exp(x).sum(1, keepdims=True)
        return (y.astype(dtype), g, out)
    if name == "layer_norm_fwd":
        return (x, vec, np.zeros_like(vec), 1e-5, out, np.empty_like(x), np.empty(rows, dtype))
    if name == "layer_norm_bwd":
        return (g, x, np.ones(rows, dtype), vec, out, np.empty_like(vec), np.empty_like(vec))
    if name == "gelu_fwd":
        return (x, out)
    return (x, g, out)


def bench_kernels(rows, width, repeat):
    py = importlib.import_module("etcpt.tensor._kernels_py")
    try:
        cy = importlib.import_module("etcpt.tensor._kernels")
    except ImportError:
        cy = None
        print("compiled kernels not built; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'dtype':8s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for dtype in (np.float32, np.float64):
        for name in KERNELS:
            args = kernel_args(name, rows, width, dtype, rng)
            t_py = timeit.timeit(lambda: getattr(py, name)(*args), number=repeat) / repeat * 1e6
            if cy is None:
                print(f"{name:16s} {np.dtype(dtype).name:8s} {t_py:10.1f}")
                continue
            t_cy = timeit.timeit(lambda: getattr(cy, name)(*args), number=repeat) / repeat * 1e6
            print(f"{name:16s} {np.dtype(dtype).name:8s} {t_py:10.1f} {t_cy:10.1f} {t_py / t_cy:8.2f}")


STEP_SNIPPET = """
import time, numpy as np
from etcpt.encoder import EncoderConfig, init_params, encoder_forward, head_forward
from etcpt.pretrain import Optimizer
from etcpt.tensor import Tape, backward, binary_cross_entropy, BACKEND
rng = np.random.default_rng(0)
cfg = EncoderConfig(vocab_size=512)
p = init_params(cfg, 0, heads={{"disc": None}}, dtype=np.float32)
opt = Optimizer(p)
ids = rng.integers(4, 512, size=(32, 6)); mask = np.ones_like(ids, bool)
y = rng.integers(0, 2, size=ids.shape)
def step():
    opt.zero_grad()
    with Tape() as t:
        loss = binary_cross_entropy(head_forward(p, encoder_forward(p, ids, mask, rng, True), "disc"), y, mask)
    backward(loss, t); opt.step(1e-4)
for _ in range(10): step()
t0 = time.perf_counter()
for _ in range({n}): step()
print(BACKEND, (time.perf_counter() - t0) / {n} * 1e3)
"""


def bench_steps(n):
    print("\nfull discriminator training step (batch 32, len 6, encoder 2x64x256, float32)")
    for force in ("0", "1"):
        env = dict(os.environ, ETCPT_PURE_PYTHON=force)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  backend={out[0]:7s} {float(out[1]):8.2f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=256)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()
    bench_kernels(args.rows, args.width, args.repeat)
    bench_steps(args.steps)


if __name__ == "__main__":
    main()
