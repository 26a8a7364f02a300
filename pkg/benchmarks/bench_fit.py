"""Compare the compiled and numpy fitting backends on one 6 x 227 x 227 subject.

    python3 benchmarks/bench_fit.py [--threads N] [--repeat R] [--json out.json]
"""
import argparse
import json
import time

import numpy as np

from myot2.relaxometry import BACKENDS, FitConfig, MultiEchoVolume, fit_t2_volume, normalize_minmax


def make_subject(seed: int = 0, slices: int = 6, side: int = 227) -> MultiEchoVolume:
    rng = np.random.default_rng(seed)
    te = np.array([0.0, 35.0, 55.0])
    t2 = rng.uniform(20.0, 180.0, size=(slices, side, side))
    s0 = rng.uniform(0.3, 1.0, size=(slices, side, side))
    vox = s0[:, None] * np.exp(-te[None, :, None, None] / t2[:, None])
    vox += rng.normal(0.0, 0.01, size=vox.shape)
    return normalize_minmax(MultiEchoVolume(np.clip(vox, 0.0, None), tuple(te)))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()

    vol = make_subject()
    pixels = vol.slices * vol.height * vol.width
    cfg = FitConfig()
    results = {}
    maps = {}
    for backend in BACKENDS:
        best = float("inf")
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            maps[backend] = fit_t2_volume(vol, cfg, threads=args.threads, backend=backend)
            best = min(best, time.perf_counter() - t0)
        results[backend] = {"seconds": best, "pixels_per_second": pixels / best}
        print(f"{backend:>7}: {best:8.3f} s  ({pixels / best:,.0f} px/s)")
    if len(maps) == 2:
        diff = float(np.abs(maps["cython"].values - maps["python"].values).max())
        results["max_abs_diff_ms"] = diff
        results["speedup"] = results["python"]["seconds"] / results["cython"]["seconds"]
        print(f"speedup {results['speedup']:.1f}x, max |diff| {diff:.2e} ms")
    results["pixels"] = pixels
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
