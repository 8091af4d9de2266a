"""Time the compiled and numpy interaction kernels on synthetic-lattice grids.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--sizes 128,256]
"""
import argparse
import timeit

import numpy as np

from stemrecon import kernels
from stemrecon.density import cutoff_radii
from stemrecon.scan import ScanGeometry, pixel_grid
from stemrecon.synth import SynthConfig, truth_params


def case(size: int):
    cfg = SynthConfig(n1=size, n2=size, frames=1)
    p = truth_params(cfg)
    pts = pixel_grid(ScanGeometry(size, size)).reshape(-1, 2)
    radii = cutoff_radii(p, 1e-8 * (p.heights.max() + p.offset))
    return pts, p, radii


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", default="128,256")
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    print(f"{'grid':>9} {'atoms':>6} " + " ".join(f"{b + ' [ms]':>14}" for b in backends) + "   speedup")
    for size in (int(s) for s in args.sizes.split(",")):
        pts, p, radii = case(size)
        best = {}
        for b in backends:
            fn = lambda: kernels.local_field(pts, p.centers, p.heights, p.width, p.offset, radii, backend=b)
            fn()
            best[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        ref = kernels.local_field(pts, p.centers, p.heights, p.width, p.offset, radii, backend="python")
        if "cython" in best:
            got = kernels.local_field(pts, p.centers, p.heights, p.width, p.offset, radii, backend="cython")
            assert np.allclose(got[0], ref[0], rtol=1e-12, atol=1e-12)
        speed = best["python"] / best["cython"] if "cython" in best else float("nan")
        print(f"{size:>4}x{size:<4} {p.n_atoms:>6} " + " ".join(f"{1e3 * best[b]:>14.2f}" for b in backends)
              + f"   {speed:6.1f}x")


if __name__ == "__main__":
    main()
