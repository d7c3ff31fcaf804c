"""Timing comparison of the two loss/gradient kernel backends.

The package picks its default backend at import: numba when installed,
pure numpy otherwise, and FEDNGDB_PURE_NUMPY=1 forces numpy. This script
times both implementations explicitly on an identical compiled batch and
cross-checks that they produce the same numbers.

    python3 benchmarks/bench_kernels.py --dim 64 --batch 256 --iters 20
"""

import argparse
import time

import numpy as np

from fedngdb.encoder import init_model
from fedngdb.errors import NumericError
from fedngdb.kernels import backend_name, batch_loss_grad, compile_batch
from fedngdb.queries import QUERY_TYPES, Anchor, Intersection, Projection, UnionQ


def random_query(qtype, rng, n_e, n_r):
    e = lambda: int(rng.integers(n_e))
    r = lambda: int(rng.integers(n_r))
    if qtype == "1p":
        return Projection(r(), Anchor(e()))
    if qtype == "2p":
        return Projection(r(), Projection(r(), Anchor(e())))
    if qtype == "2i":
        return Intersection((Projection(r(), Anchor(e())), Projection(r(), Anchor(e()))))
    if qtype == "3i":
        return Intersection(
            (Projection(r(), Anchor(e())), Projection(r(), Anchor(e())), Projection(r(), Anchor(e())))
        )
    if qtype == "ip":
        return Projection(r(), Intersection((Projection(r(), Anchor(e())), Projection(r(), Anchor(e())))))
    if qtype == "pi":
        return Intersection((Projection(r(), Projection(r(), Anchor(e()))), Projection(r(), Anchor(e()))))
    if qtype == "2u":
        return UnionQ((Projection(r(), Anchor(e())), Projection(r(), Anchor(e()))))
    return Projection(r(), UnionQ((Projection(r(), Anchor(e())), Projection(r(), Anchor(e())))))


def build_workload(args):
    rng = np.random.default_rng(args.seed)
    st = init_model(list(range(args.entities)), list(range(args.relations)), args.dim, args.seed)
    queries = [
        random_query(QUERY_TYPES[i % len(QUERY_TYPES)], rng, args.entities, args.relations)
        for i in range(args.batch)
    ]
    pos = rng.integers(args.entities, size=args.batch)
    negs = rng.integers(args.entities, size=(args.batch, args.negatives))
    return st, compile_batch(queries, pos, negs, st.eidx, st.ridx)


def time_backend(backend, st, batch, iters):
    run = lambda: batch_loss_grad(batch, st.E, st.R, st.W1, st.b1, st.W2, st.b2, 1.0, backend=backend)
    out = run()  # warm-up, excluded: first numba call pays JIT compilation
    started = time.perf_counter()
    for _ in range(iters):
        run()
    return (time.perf_counter() - started) / iters, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--entities", type=int, default=500)
    ap.add_argument("--relations", type=int, default=10)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--negatives", type=int, default=16)
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    st, batch = build_workload(args)
    print(f"default backend: {backend_name()}  "
          f"(batch={args.batch} dim={args.dim} entities={args.entities} negs={args.negatives})")

    results = {}
    for backend in ("numpy", "numba"):
        try:
            per_call, out = time_backend(backend, st, batch, args.iters)
        except NumericError as exc:
            print(f"{backend:>6}: skipped ({exc})")
            continue
        results[backend] = (per_call, out)
        print(f"{backend:>6}: {per_call * 1e3:8.2f} ms/call  loss={out[0]:.6f}")

    if len(results) == 2:
        t_np, out_np = results["numpy"]
        t_nb, out_nb = results["numba"]
        worst = max(float(np.max(np.abs(a - b))) for a, b in zip(out_np[1:], out_nb[1:]))
        print(f"speedup: numba is {t_np / t_nb:.1f}x vs numpy; max |grad diff| = {worst:.2e}")


if __name__ == "__main__":
    main()
