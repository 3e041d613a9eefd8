"""How well stack alignment recovers the per-frame magnification as the aperture grows.

A wider aperture blurs out-of-focus frames more, and the blur difference between
neighbouring frames biases the affine fit. Recorded on 128x128 scenes with 20
shapes (worst relative scale error over frames):

    aperture 0.03 mm: 0.04-0.09 %
    aperture 0.05 mm: 0.07-0.12 %
    aperture 0.15 mm: 0.9-1.4 %

The 1 % scale check therefore runs at 0.05 mm.
"""

import argparse
import dataclasses

from spectrasweep.config import toy_geometry, toy_lens
from spectrasweep.core import BandGrid
from spectrasweep.forward import simulate_stack
from spectrasweep.optics import schedule_for_bands
from spectrasweep.preprocess import align_stack
from spectrasweep.scene import SceneSpec, synth


def main():
    ap = argparse.ArgumentParser(description="Alignment scale error against aperture.")
    ap.add_argument("--apertures", type=float, nargs="+", default=[0.03, 0.05, 0.15])
    ap.add_argument("--seeds", type=int, nargs="+", default=[2, 5])
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args()

    bands = BandGrid.uniform(8)
    geom = toy_geometry(args.size)
    for a in args.apertures:
        lens = dataclasses.replace(toy_lens(), aperture_mm=a)
        sched = schedule_for_bands(lens, geom, bands)
        z_ref = sched.positions_mm[len(sched) // 2]
        for seed in args.seeds:
            cube = synth(SceneSpec(args.size, args.size, bands, n_random_shapes=20, seed=seed))
            stack = simulate_stack(cube, lens, geom, sched, emit_unaligned=True)
            _, Ts, err = align_stack(stack)
            worst = max(abs(1.0 / T.scale() / (z / z_ref) - 1.0) for T, z in zip(Ts, sched.positions_mm))
            print(f"aperture {a:.3f} mm  seed {seed}: worst scale error {100 * worst:.3f} %, "
                  f"corner RMS {err:.3f} px", flush=True)


if __name__ == "__main__":
    main()
