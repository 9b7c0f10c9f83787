"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--step]

Kernel timings call the dispatcher (numba) and the ``*_np`` reference side by
side in one process. ``--step`` also times one resnet8 search step end to end,
once normally and once in a subprocess with ``SEAM_DISABLE_NUMBA=1``.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from seam import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal((128, 16, 32, 32)).astype(np.float32)
    cols = rng.standard_normal((128 * 32 * 32, 16 * 9)).astype(np.float32)
    xd = rng.standard_normal((128, 32, 16, 16)).astype(np.float32)
    wd = rng.standard_normal((32, 1, 3, 3)).astype(np.float32)
    gd = rng.standard_normal((128, 32, 16, 16)).astype(np.float32)
    a = np.abs(x)
    g = rng.standard_normal(x.shape).astype(np.float32)
    q = np.array([3.0, 7.0, 15.0, 63.0])
    p = np.full(4, 0.25)
    return [
        ("round_half_away", lambda: K.round_half_away(x), lambda: K.round_half_away_np(x)),
        ("col2im 3x3", lambda: K.col2im(cols, x.shape, 3, 3, 1, 1), lambda: K.col2im_np(cols, x.shape, 3, 3, 1, 1)),
        ("dwconv forward", lambda: K.dwconv_forward(xd, wd, 1, 1), lambda: K.dwconv_forward_np(xd, wd, 1, 1)),
        ("dwconv backward", lambda: K.dwconv_backward(xd, wd, gd, 1, 1), lambda: K.dwconv_backward_np(xd, wd, gd, 1, 1)),
        ("mixed act quant", lambda: K.mixed_act_quant(a, 2.0, q, p), lambda: K.mixed_act_quant_np(a, 2.0, q, p)),
        ("mixed act quant dp", lambda: K.mixed_act_quant_dp(a, g, 2.0, q), lambda: K.mixed_act_quant_dp_np(a, g, 2.0, q)),
    ]


STEP_SNIPPET = """
import time, numpy as np
from seam import tensor as T
from seam.heads import GMHead, seam_total_loss
from seam.models import build_model
from seam.pipeline import attach_search_quantizers, states_for
m = build_model("resnet8", 10, rng=np.random.default_rng(0))
cands = m.default_bits
states = states_for(m, cands)
attach_search_quantizers(m, states, cands, {q.name: 4.0 for q in m.qlayers})
head = GMHead(10, m.feature_dim, rng=np.random.default_rng(1))
x = T.Tensor(np.random.default_rng(2).standard_normal((128, 3, 32, 32)).astype(np.float32))
y = np.arange(128) % 10
def step():
    T.backward(seam_total_loss(m.features(x), y, head, states, 0.1, 1e-9, cands))
step()
ts = []
for _ in range(3):
    t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
print(min(ts))
"""


def time_step(disable):
    env = dict(os.environ, SEAM_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full resnet8 search step")
    args = ap.parse_args(argv)

    if not K.HAS_NUMBA:
        print("numba unavailable or disabled; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, fast, ref in cases(rng):
        tf, tr = best_of(fast, args.repeat), best_of(ref, args.repeat)
        print(f"{name:<22}{tf:>10.4f}{tr:>10.4f}{tr / tf:>8.1f}x")
    if args.step:
        tf, tr = time_step(False), time_step(True)
        print(f"{'resnet8 search step':<22}{tf:>10.4f}{tr:>10.4f}{tr / tf:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
