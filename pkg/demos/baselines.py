"""Run the four hand-crafted nozzle policies on a desk-scale case and print their metrics.

    python demos/baselines.py [case1|case2] [seed]

A few seconds per policy. Residual is the fraction of the fluid present at
suction start that is still below the goal height after 1000 steps.
"""
import sys

from suction_mpc.control import Policy
from suction_mpc.experiment import episode_result, run_episode
from suction_mpc.scenes import desk_scale, preset

case = sys.argv[1] if len(sys.argv) > 1 else "case1"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
scene = desk_scale(preset(case))

specs = ["fixed_emission"]
for k in range(len(scene.flow_paths)):
    specs += [f"fixed_end:{k}", f"fixed_middle:{k}", f"end_to_emit:{k}"]

print(f"{case}, seed {seed}, {scene.max_particles} particles max, {scene.emission.rate} per step")
print(f"{'policy':16s} {'residual':>8s} {'tau50':>6s} {'tau90':>6s} {'path cm':>8s}")
for spec in specs:
    policy = Policy.parse(spec)
    r = episode_result(run_episode(scene, policy, seed), policy, seed)
    print(f"{policy.label:16s} {r.residual:8.3f} {str(r.tau50):>6s} {str(r.tau90):>6s} {r.trajectory_length:8.2f}")
