"""Compare tape gradients with central differences on a few random toy scenes.

    python demos/gradient_check.py

Each scene has 50-100 particles and a 3-5 step nozzle trajectory.
"""
from suction_mpc.experiment import run_gradcheck, toy_problem

for seed in range(3):
    system, controls, _ = toy_problem(seed)
    rep = run_gradcheck(seed)
    step, axis = rep.worst
    print(f"seed {seed}: {system.n_active} particles, horizon {len(controls)}, "
          f"max rel err {rep.max_relative_error:.2e} (step {step}, {'xyz'[axis]}) "
          f"{'ok' if rep.passed else 'FAIL'}")
