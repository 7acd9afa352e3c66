"""Time the hot kernels on both backends.

    python benchmarks/bench_kernels.py [--frames 400] [--n 20] [--repeat 3]

The numba timings exclude the first (compiling) call.
"""
import argparse
import time

import numpy as np

from fragtrack import kernels
from fragtrack._accel import HAVE_NUMBA
from fragtrack.imageprep import ImagePreparer, identification_image_side
from fragtrack.synthgen import SynthConfig, generate_synthetic_video


def best_of(fn, repeat):
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return min(out)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=400)
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    video = generate_synthetic_video(SynthConfig(n_individuals=args.n, total_frames=args.frames, seed=0))
    t = video.blobs
    frame = video.render_frames(0, 1)[0]
    mask = frame < 150
    big = np.tile(mask, (4, 4))
    prep = ImagePreparer(t, backend="numpy")
    side = identification_image_side(prep.bbox_sides(np.arange(len(t))))
    ids = np.arange(len(t))
    starts = np.append(t.img_ptr[ids], 0)

    cases = {
        "label_components": lambda b: kernels.label_components(big, backend=b),
        "overlap_edges": lambda b: kernels.overlap_edges(t.frame_ptr, t.pix_ptr, t.flat_pixels,
                                                         t.width * t.height, backend=b),
        "mask_crops": lambda b: kernels.mask_crops(t.img_data, t.img_ptr, t.img_origin, t.img_shape,
                                                   t.pix_ptr, t.pix_x, t.pix_y, 2, backend=b),
        "rotate_crop": lambda b: kernels.rotate_crop(prep.masked, starts, t.img_origin, t.img_shape,
                                                     t.centroid, prep.angles, side, side, backend=b),
    }
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    print(f"{len(t)} blobs, {args.frames} frames, label mask {big.shape}")
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases.items():
        times = []
        for b in backends:
            fn(b)  # warm-up / compile
            times.append(best_of(lambda: fn(b), args.repeat))
        sp = f"{times[0] / times[1]:>9.1f}x" if len(times) == 2 else ""
        print(f"{name:<18}" + "".join(f"{x * 1e3:>10.1f}ms" for x in times) + sp)


if __name__ == "__main__":
    main()
