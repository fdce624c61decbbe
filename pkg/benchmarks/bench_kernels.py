"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so one process measures both.
"""

import argparse
import timeit

import numpy as np

from fixq import _pykernels, kernels
from fixq.net import ToyAutoencoder, TrainConfig

try:
    from fixq import _ckernels
except ImportError:
    _ckernels = None


CONV = ("conv_forward", "conv_backward_input", "conv_backward_weight")


def train_step(mod, net, x, lam):
    """One forward/backward pass of the toy autoencoder on backend ``mod``."""
    saved = {k: getattr(kernels, k) for k in CONV}
    try:
        for k in CONV:
            setattr(kernels, k, getattr(mod, k))
        net.forward(x)
        net.backward(x, lam)
    finally:
        for k, f in saved.items():
            setattr(kernels, k, f)


def cases(rng):
    sw = rng.uniform(-1.99, 1.99, 1_000_000)
    q = _pykernels.nlq_quantize(sw, 6)
    codes, _ = _pykernels.nlq_encode(q, 6)
    cb = np.sort(rng.normal(0, 0.5, 64))
    x = rng.uniform(size=(8, 8, 16, 16))
    w = rng.normal(size=(8, 8, 5, 5))
    gy = rng.normal(size=(8, 8, 8, 8))
    cfg = TrainConfig()
    net = ToyAutoencoder.init(0)
    batch = cfg.train_images()[: cfg.batch]
    return [
        ("lq_quantize 1M", lambda m: m.lq_quantize(sw, 6)),
        ("nlq_quantize 1M", lambda m: m.nlq_quantize(sw, 6)),
        ("nlq_encode 1M", lambda m: m.nlq_encode(q, 6)),
        ("nlq_decode 1M", lambda m: m.nlq_decode(codes, 6)),
        ("nearest_codeword 1M/64", lambda m: m.nearest_codeword(sw, cb)),
        ("conv_forward 8x8x16x16", lambda m: m.conv_forward(x, w)),
        ("conv_backward_input", lambda m: m.conv_backward_input(gy, w, 16, 16)),
        ("conv_backward_weight", lambda m: m.conv_backward_weight(x, gy, 5)),
        ("train step (batch 8)", lambda m: train_step(m, net, batch, cfg.lam)),
    ]


def best_of(fn, mod, repeat):
    number = 1
    while timeit.timeit(lambda: fn(mod), number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(lambda: fn(mod), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>9}")
    for name, fn in cases(rng):
        tp = best_of(fn, _pykernels, args.repeat)
        if _ckernels is None:
            print(f"{name:<26}{tp * 1e3:>12.3f}{'n/a':>13}{'':>9}")
            continue
        tc = best_of(fn, _ckernels, args.repeat)
        print(f"{name:<26}{tp * 1e3:>12.3f}{tc * 1e3:>13.3f}{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
