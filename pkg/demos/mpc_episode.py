"""One MPC episode with live progress, then the executed nozzle path.

    python demos/mpc_episode.py [case1|case2] [seed] [steps_after_warmup]

At desk scale a full 1000-step episode takes a few minutes on one core.
The first part is the start-point search: ten sampled particle positions,
each tried for 100 steps.
"""
import sys
import time

import numpy as np

from suction_mpc.control import Policy
from suction_mpc.experiment import episode_result, run_episode
from suction_mpc.scenes import desk_scale, preset

case = sys.argv[1] if len(sys.argv) > 1 else "case1"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
after = int(sys.argv[3]) if len(sys.argv) > 3 else 1000
scene = desk_scale(preset(case))
t = time.perf_counter()

ep = run_episode(scene, Policy("mpc"), seed, scene.warmup_steps + after,
                 progress=lambda msg: print(f"[{time.perf_counter() - t:6.1f}s] {msg}", flush=True))
r = episode_result(ep, Policy("mpc"), seed)

print("start candidates left below goal:", ep.start_counts, "-> chose", np.round(ep.initial_point, 2))
print(f"residual {r.residual:.3f}  tau50 {r.tau50}  tau90 {r.tau90}  path {r.trajectory_length:.2f} cm")
iters = [len(l) for l in ep.mpc_losses]
print(f"gradient iterations per step: mean {np.mean(iters):.1f}, max {max(iters)}")
for k in range(0, len(ep.controls), max(1, len(ep.controls) // 10)):
    x, y, z = ep.controls[k]
    print(f"  step {ep.t0 + k:5d}  nozzle ({x:6.2f}, {y:5.2f}, {z:6.2f})  fraction {r.curve.fractions[k]:.3f}")
