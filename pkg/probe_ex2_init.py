"""Trace Example-2 seed initialization to its stall and save the seed."""
import pickle
import time
import numpy as np
from scmpc.models import example2, example2_initial_state
from scmpc.nominal import (build_init_program, seed_from_reference, roll_out,
                           seed_feasibility_report)
from scmpc.solver import solve

prob, _ = example2()
x_init = example2_initial_state()
seed = seed_from_reference(prob)
gap = float(np.linalg.norm(x_init - seed.states[0]))
print(f"round 0: gap={gap:.8f}")
t0 = time.time()
gaps = [gap]
for rnd in range(1, 121):
    prog, layout = build_init_program(prob, seed, x_init, None)
    sol = solve(prog)
    if not sol.usable():
        print(f"round {rnd}: UNUSABLE status={sol.status} kkt={sol.kkt}")
        break
    s_star = sol.z[layout.s_up(0)]
    c_star = np.stack([sol.z[layout.c(k)] for k in range(prob.N)])
    seed = roll_out(prob, seed, c_star, None, x_init=seed.states[0] + s_star)
    gap = float(np.linalg.norm(x_init - seed.states[0]))
    gaps.append(gap)
    if rnd % 10 == 0 or rnd <= 3:
        print(f"round {rnd}: gap={gap:.8f}  it={sol.iterations}  "
              f"status={sol.status}  elapsed={time.time()-t0:.1f}s",
              flush=True)
    # same stall rule as the library: relative decrease < 1e-6 over 5 rounds
    if len(gaps) > 5:
        rel = [(gaps[-6 + i] - gaps[-5 + i]) / max(gaps[-6 + i], 1e-30)
               for i in range(5)]
        if all(r < 1e-6 for r in rel):
            print(f"STALL at round {rnd}: gap={gap:.8f} "
                  f"(elapsed {time.time()-t0:.1f}s)")
            break
print(f"final gap={gap:.8f}")
rep = seed_feasibility_report(prob, seed)
print("stalled seed feasible:", rep.feasible)
print("stalled x0:", repr(seed.states[0]))
with open("/tmp/ex2_stalled_seed.pkl", "wb") as fh:
    pickle.dump(seed, fh)
print("saved /tmp/ex2_stalled_seed.pkl")
