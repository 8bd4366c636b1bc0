"""Time the numpy and compiled kernel backends side by side.

    python benchmarks/bench_kernels.py [--repeat N] [--batch B]

Each hot kernel is timed on network-sized inputs with both backends, and
the outputs are compared. A full training step (forward + backward of the
stage-3 network) is then timed once per backend in a subprocess, since
the backend is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from jointcar.nn import kernels

STEP = """
import time, numpy as np
from jointcar import model as net
rng = np.random.default_rng(0)
p = net.init_stage1(rng)
p = net.grow_to_stage3(net.grow_to_stage2(p, rng), rng)
x = rng.standard_normal(({batch}, 3, 84, 28)).astype(np.float32)
y = (np.arange({batch}) % 2).astype(np.float64)
net.loss_and_grads(p, x, y)
t = time.perf_counter()
for _ in range({repeat}):
    net.loss_and_grads(p, x, y)
print((time.perf_counter() - t) / {repeat})
"""


def cases(batch, rng):
    x = rng.standard_normal((batch, 3, 84, 28)).astype(np.float32)
    w = rng.standard_normal((64, 3, 9, 9)).astype(np.float32)
    b = rng.standard_normal(64).astype(np.float32)
    z = rng.standard_normal((batch, 64, 76, 20)).astype(np.float32)
    m = rng.standard_normal((batch, 15, 3)).astype(np.float32)
    dp = rng.standard_normal((batch, 64, 19, 5)).astype(np.float32)

    def conv_bwd(k):
        out, cols = k.conv2d_forward(x, w, b)
        return lambda: k.conv2d_backward(out, cols, w, x.shape)

    def pool_bwd(k):
        _, act = k.tanh_avgpool_forward(z, 4)
        return lambda: k.tanh_avgpool_backward(dp, act, 4)

    return {
        "conv2d_forward": lambda k: (lambda: k.conv2d_forward(x, w, b)),
        "conv2d_backward": conv_bwd,
        "tanh_avgpool_forward": lambda k: (lambda: k.tanh_avgpool_forward(z, 4)),
        "tanh_avgpool_backward": pool_bwd,
        "deform_argmax": lambda k: (lambda: k.deform_argmax(m, (-0.1, -0.2, 0.3, -0.1), 7, 1)),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)
    backends = kernels.backends()
    names = sorted(backends)
    print(f"batch {args.batch}, {args.repeat} repeats; backends: {', '.join(names)}")
    print(f"{'kernel':<24s}" + "".join(f"{n + ' ms':>12s}" for n in names) + f"{'speedup':>10s}")
    rng = np.random.default_rng(0)
    for kernel, make in cases(args.batch, rng).items():
        times, outs = {}, {}
        for n in names:
            fn = make(backends[n])
            outs[n] = _first(fn())
            times[n] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        row = f"{kernel:<24s}" + "".join(f"{times[n]:12.3f}" for n in names)
        if len(names) > 1:
            row += f"{times['numpy'] / times['cython']:9.2f}x"
            a = np.asarray(outs["numpy"], np.float64)
            c = np.asarray(outs["cython"], np.float64)
            rel = float(np.max(np.abs(a - c)) / max(float(np.max(np.abs(a))), 1e-30))
            row += f"  rel diff {rel:.1e}"
        print(row)
    print("\nfull stage-3 training step (forward + backward):")
    for n in names:
        env = dict(os.environ, JOINTCAR_BACKEND=n)
        code = STEP.format(batch=args.batch, repeat=max(1, args.repeat // 4))
        sec = float(subprocess.run([sys.executable, "-c", code], env=env, check=True,
                                   capture_output=True, text=True).stdout)
        print(f"  {n:<8s} {sec * 1e3:9.1f} ms/batch  ({sec / args.batch * 1e3:.2f} ms/sample)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
