"""Compare the compiled and numpy row kernels, alone and inside a training step.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import timeit
from contextlib import contextmanager

import numpy as np

from arac import kernels
from arac.data import ToyTaskSpec, generate_toy_dataset
from arac.model import AracModel
from arac.training import Adamax, bce_with_logits

NAMES = ("softmax_forward", "softmax_backward", "layer_norm_forward", "layer_norm_backward")


@contextmanager
def use_backend(impl):
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(impl, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    # unified attention logits at toy batch size, and token features at d_c=512
    logits = rng.standard_normal((64, 8, 21, 21)).astype(dtype)
    feats = rng.standard_normal((64, 115, 512)).astype(dtype)
    s = kernels.available_backends()["python"].softmax_forward(logits)
    xhat, rstd = kernels.available_backends()["python"].layer_norm_forward(feats, 1e-5)
    g_s, g_x = np.ones_like(s), np.ones_like(xhat)
    return {
        "softmax_forward": lambda k: k.softmax_forward(logits),
        "softmax_backward": lambda k: k.softmax_backward(s, g_s),
        "layer_norm_forward": lambda k: k.layer_norm_forward(feats, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_backward(xhat, rstd, g_x),
    }


def train_step_case():
    spec = ToyTaskSpec()
    data = generate_toy_dataset(spec, 64, seed=0)
    batch = data.batch()
    model = AracModel(spec.model_config(), seed=0)
    opt = Adamax(model.named_parameters())

    def step():
        logits, _ = model(batch)
        loss = bce_with_logits(logits, batch.targets)
        model.zero_grad()
        loss.backward()
        opt.step()
    return step


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is timed")
    rows = []
    for dtype in (np.float32, np.float64):
        for name, case in kernel_cases(dtype).items():
            times = {b: best_of(lambda: case(impl), args.repeat, 10) for b, impl in backends.items()}
            rows.append({"case": f"{name} {np.dtype(dtype).name}", **times})
    step = train_step_case()
    times = {}
    for b, impl in backends.items():
        with use_backend(impl):
            step()
            times[b] = best_of(step, args.repeat, 3)
    rows.append({"case": "toy train step (ARAC-2, d_c=32, B=64)", **times})

    names = list(backends)
    print(f"{'case':<40}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for r in rows:
        line = f"{r['case']:<40}" + "".join(f"{1e3 * r[n]:>14.3f}" for n in names)
        if "cython" in r:
            line += f"{r['python'] / r['cython']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
