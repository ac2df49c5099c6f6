"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--edges 20000] [--repeat 20]

Shapes mimic a large batch of context graphs: E edges over N nodes with
d-wide messages, plus span decoding over B sequences of length n.
"""

import argparse
import time

import numpy as np

from kala.kernels import HAVE_NUMBA, numba_kernels, numpy_kernels


def timeit(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(edges, nodes, d, batch, seq):
    rng = np.random.default_rng(0)
    seg = np.sort(rng.integers(0, nodes, size=edges))
    values = rng.normal(size=(edges, d))
    scores = rng.normal(size=edges)
    mask = rng.random(edges) > 0.1
    start, end = rng.normal(size=(batch, seq)), rng.normal(size=(batch, seq))
    valid = np.ones(seq, dtype=bool)

    def scatter(k):
        out = np.zeros((nodes, d))
        return lambda: k.scatter_add_rows(out, seg, values)

    def segsum(k):
        return lambda: k.segment_sum(values, seg, nodes)

    def softmax(k):
        return lambda: k.segment_softmax(scores, seg, nodes, mask)

    def softmax_bwd(k):
        alpha = k.segment_softmax(scores, seg, nodes, mask)
        return lambda: k.segment_softmax_backward(alpha, scores, seg, nodes)

    def spans(k):
        return lambda: [k.best_span(start[b], end[b], valid, 30) for b in range(batch)]

    return {"scatter_add_rows": scatter, "segment_sum": segsum, "segment_softmax": softmax,
            "segment_softmax_backward": softmax_bwd, "best_span": spans}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--edges", type=int, default=20000)
    ap.add_argument("--nodes", type=int, default=4000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--seq", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, make in cases(args.edges, args.nodes, args.dim, args.batch, args.seq).items():
        t_np = timeit(make(numpy_kernels), args.repeat)
        t_nb = timeit(make(numba_kernels), args.repeat)
        print(f"{name:<26}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
