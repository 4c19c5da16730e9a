#!/usr/bin/env python3
"""Print a transport-regime table over log-spaced (D, speed) grids.

Each cell holds the Peclet number for the row's diffusion coefficient and
the column's speed at a fixed characteristic length, with a one-letter
regime tag (D = diffusion-dominated, M = mixed, A = advection-dominated).
Useful for eyeballing where a fitted coefficient pair sits relative to the
classification boundaries.

    python3 scripts/regime_map.py --L 0.1 --d-range 1e-5 1e-2 --v-range 1e-3 1e-1
"""

from __future__ import annotations

import argparse

import numpy as np

from adepinn.physics import DEFAULT_L_C_MM, make_peclet_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=float, default=DEFAULT_L_C_MM,
                    help="characteristic length, mm")
    ap.add_argument("--d-range", type=float, nargs=2, default=(1e-5, 1e-2),
                    metavar=("LO", "HI"), help="diffusion range, mm^2/s")
    ap.add_argument("--v-range", type=float, nargs=2, default=(1e-3, 1e-1),
                    metavar=("LO", "HI"), help="speed range, mm/s")
    ap.add_argument("--n", type=int, default=7, help="grid points per axis")
    args = ap.parse_args()

    ds = np.geomspace(args.d_range[0], args.d_range[1], args.n)
    vs = np.geomspace(args.v_range[0], args.v_range[1], args.n)

    print(f"Pe = speed * L / D at L = {args.L:g} mm "
          "(tag: D diffusion, M mixed, A advection)")
    header = "D [mm^2/s] \\ v [mm/s]"
    print(f"{header:>22}" + "".join(f"{v:>12.3g}" for v in vs))
    for d in ds:
        cells = []
        for v in vs:
            rep = make_peclet_report(d, v, args.L)
            cells.append(f"{rep.Pe:>10.3g} {rep.regime[0]}")
        print(f"{d:>22.3g}" + "".join(cells))


if __name__ == "__main__":
    main()
