#!/usr/bin/env python3
"""Regenerate the frozen Bessel audit table bundled with the package.

Draws a seeded sample of (order, argument) points across the supported
accuracy domain, evaluates log K and the upward ratio with the
arbitrary-precision quadrature oracle from tests/oracles.py, and writes
src/polar_denoise/data/bessel_audit.json.  Rerun after any change to the
sampling scheme; the output is committed so audits stay fast and offline.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from oracles import oracle_log_k, oracle_ratio  # noqa: E402

SEED = 20240817
N_POINTS = 50


def main() -> None:
    rng = np.random.default_rng(SEED)
    rows = []
    for _ in range(N_POINTS):
        twice = int(rng.integers(0, 2 * 10**4 + 1))  # nu = twice/2 in [0, 1e4]
        nu = twice / 2.0
        z = float(math.exp(rng.uniform(math.log(1e-8), math.log(1e5))))
        rows.append(
            {
                "order": nu,
                "argument": z,
                "log_k": oracle_log_k(nu, z),
                "ratio_up": oracle_ratio(nu, z),
            }
        )
    named = {
        "log_k_nu500_z10": oracle_log_k(500.0, 10.0),
        "ratio_nu0_z1": oracle_ratio(0.0, 1.0),
        "ratio_nu199_z1": oracle_ratio(199.0, 1.0),
        "log_green_d100_sigma05_rho1": None,  # filled below
    }
    from oracles import oracle_log_green

    named["log_green_d100_sigma05_rho1"] = oracle_log_green(100, 0.5, 1.0)

    out = {
        "seed": SEED,
        "points": rows,
        "named": named,
    }
    dest = ROOT / "src" / "polar_denoise" / "data" / "bessel_audit.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(f"wrote {dest} ({len(rows)} points)")


if __name__ == "__main__":
    main()
