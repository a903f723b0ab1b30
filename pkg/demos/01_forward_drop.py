"""Forward simulation only: drop an elastic ball onto the floor.

Runs 600 timesteps under gravity with velocity damping and prints the
ball's centroid height every 50 steps, so you can watch it fall, squash
against the sticky floor nodes and settle. No optimization involved.
"""

import numpy as np

import morphmpm as mm

params = mm.SimParams(dim=2, grid_res=32, mu=2e4, lam=2e4,
                      zeta=1.5, f_ext=(0.0, -100.0))
ball = mm.seed_particles(mm.Sphere((16.0, 12.0), 3.0), params, seed=0)
print(f"{ball.n} particles, total mass {ball.m.sum():.1f}")

state = ball.copy()
for step in range(0, 600, 50):
    state = mm.advance(state, {}, 50, params)
    height = state.x[:, 1].mean()
    squash = state.x[:, 1].min()
    print(f"step {step + 50:4d}  centroid {height:5.2f}  lowest {squash:5.2f}  "
          f"max speed {np.linalg.norm(state.v, axis=1).max():5.2f}")

# the floor is sticky: the ball rests a cell or two above y=0, at rest
assert state.x[:, 1].min() > 1.0 and state.x[:, 1].mean() < 6.0
print("settled.")
