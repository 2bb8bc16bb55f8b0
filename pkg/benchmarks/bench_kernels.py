"""Compare the compiled kernels against the pure-numpy fallback.

Times the convolution forward/backward pair, the fused class-drop
aggregation, and one full training step on each backend. Run:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from dropclass.drop import composite_loss, importance_matrix
from dropclass.graph import Graph
from dropclass.kernels import numpy_backend
from dropclass.model import ModelConfig, init_model, param_nodes

try:
    from dropclass.kernels import _conv as compiled_backend
except ImportError:
    compiled_backend = None


def timeit(fn, repeats):
    fn()  # warm
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def bench_conv(backend, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 64, 64, 16), dtype=np.float32)
    k = rng.standard_normal((3, 3, 16, 32), dtype=np.float32)
    b = np.zeros(32, dtype=np.float32)
    y, col = backend.conv2d_forward(x, k, b, (1, 1))
    gy = rng.standard_normal(y.shape, dtype=np.float32)
    fwd = timeit(lambda: backend.conv2d_forward(x, k, b, (1, 1)), repeats)
    bwd = timeit(lambda: backend.conv2d_backward(x, k, gy, (1, 1), col), repeats)
    return fwd, bwd


def bench_drop(backend, repeats):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((8, 64, 64, 32), dtype=np.float32)
    s = rng.standard_normal((32, 6), dtype=np.float32)
    gout = rng.standard_normal(a.shape, dtype=np.float32)
    fwd = timeit(lambda: backend.drop_aggregate_forward(a, s, 2, 1 / 6), repeats)
    bwd = timeit(lambda: backend.drop_aggregate_backward(a, s, 2, 1 / 6, gout), repeats)
    return fwd, bwd


def bench_step(repeats):
    cfg = ModelConfig(n_classes=6)
    model = init_model(cfg)
    rng = np.random.default_rng(2)
    x = rng.random((8, 64, 64, 3), dtype=np.float32)
    labels = rng.integers(0, 6, size=(8, 64, 64)).astype(np.int32)
    imp = importance_matrix(model.params["classifier_kernel"], 64, 64)

    def step():
        g = Graph(check_finite=False)
        nodes = composite_loss(g, param_nodes(g, model), cfg, x, labels,
                               z=2, lam=0.5, alpha=10.0, importance=imp)
        g.backward(nodes["l_total"])

    return timeit(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args()

    backends = [("numpy", numpy_backend)]
    if compiled_backend is not None:
        backends.append(("compiled", compiled_backend))
    else:
        print("compiled backend unavailable; timing the fallback only")

    print(f"{'kernel':<26}" + "".join(f"{name:>12}" for name, _ in backends))
    rows = {}
    for name, backend in backends:
        conv_f, conv_b = bench_conv(backend, args.repeats)
        drop_f, drop_b = bench_drop(backend, args.repeats)
        rows.setdefault("conv2d forward (ms)", []).append(conv_f)
        rows.setdefault("conv2d backward (ms)", []).append(conv_b)
        rows.setdefault("drop aggregate fwd (ms)", []).append(drop_f)
        rows.setdefault("drop aggregate bwd (ms)", []).append(drop_b)
    for label, values in rows.items():
        print(f"{label:<26}" + "".join(f"{v:12.2f}" for v in values))

    import dropclass.kernels as kernels

    print(f"\nfull training step on active backend ({kernels.backend_name()}): "
          f"{bench_step(args.repeats):.1f} ms")


if __name__ == "__main__":
    main()
