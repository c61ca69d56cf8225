"""Time the numba and numpy kernel paths on the same workload.

Each path runs in its own interpreter because the backend is chosen at
import time from FDEPR_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py [--packets 2000] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, math, sys, time
import numpy as np
from fdepr import _kernels
from fdepr.bloch_dynamics import Pulse, cavity_response
from fdepr.resonator_mode import ResonatorParams

n, repeat = int(sys.argv[1]), int(sys.argv[2])
res = ResonatorParams(2 * math.pi * 7e9, 8.2e5, 6.3e5)
pulse = Pulse.from_strength(1e4, 4e-6)
field = cavity_response(pulse, res)
rng = np.random.default_rng(0)
two_g = 2 * 2 * math.pi * rng.uniform(1.0, 200.0, n)
delta = rng.normal(0.0, 1e5, n)
g1 = np.full(n, 1.0)
g2 = g1 / 2
s0 = np.tile([0.0, 0.0, -0.5], (n, 1))
h = 2 * field.step
amp = rng.random(n)
t = np.geomspace(1e-6, 10.0, 4000)

def timed(fn):
    fn()  # warm-up, includes compilation
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out

t_bloch, s = timed(lambda: _kernels.bloch_rk4(field.alpha.real, field.alpha.imag, two_g, delta, g1, g2, s0, h))
t_emit, r = timed(lambda: _kernels.emission_sum(amp, g1 * rng.uniform(0.1, 10.0, n), t))
print(json.dumps({"backend": _kernels.backend(), "bloch_rk4_s": t_bloch, "emission_sum_s": t_emit,
                  "steps": (len(field.t) - 1) // 2, "checksum": float(np.sum(s))}))
"""


def run(disable: bool, packets: int, repeat: int) -> dict:
    env = dict(os.environ, FDEPR_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(packets), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--packets", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    fast = run(False, args.packets, args.repeat)
    slow = run(True, args.packets, args.repeat)
    print(f"{args.packets} packets, {fast['steps']} RK4 steps")
    print(f"{'kernel':<14}{'numba (s)':>12}{'numpy (s)':>12}{'speed-up':>10}")
    for key, label in (("bloch_rk4_s", "bloch_rk4"), ("emission_sum_s", "emission_sum")):
        print(f"{label:<14}{fast[key]:>12.4f}{slow[key]:>12.4f}{slow[key] / fast[key]:>10.1f}")
    drift = abs(fast["checksum"] - slow["checksum"])
    print(f"checksum difference between paths: {drift:.3g}")


if __name__ == "__main__":
    main()
