"""
Particle swarm on textbook test functions
=========================================

Before spending hours of CPU on network training it is worth seeing the
optimizer work on functions whose minimum we know. Both runs use the same
inertia and acceleration coefficients as the U-Net search.
"""

import numpy as np

from swseg.pso import SearchSpace, SwarmConfig, VectorObjective, optimize, rastrigin, sphere

box = SearchSpace.box([-5.0] * 3, [5.0] * 3)
cfg = SwarmConfig(n_particles=10, iters=50, w=0.9, c1=0.5, c2=0.3, seed=0)

#%%
# The sphere is convex, so the only question is how fast the swarm
# contracts onto the origin.

res = optimize(box, VectorObjective(sphere, box.names), cfg)
g = res.trace.gbest_f
for it in (0, 5, 10, 20, 30, 40, 50):
    print(f"sphere  generation {it:2d}: gbest = {g[it]:.3e}")
print("best position:", np.round(res.best_x, 4))

#%%
# Over many seeds the final value is small and the best-so-far curve never
# goes up.

finals = [optimize(box, VectorObjective(sphere, box.names),
                   SwarmConfig(n_particles=10, iters=50, seed=s)).best_f for s in range(20)]
print(f"\nmedian over 20 seeds: {np.median(finals):.2e}, worst {max(finals):.2e}")

#%%
# Rastrigin has a local minimum at every integer lattice point. With
# w = 0.9 and small pull coefficients the swarm keeps exploring for a
# while, but it may still settle in a nearby basin.

res = optimize(box, VectorObjective(rastrigin, box.names), cfg)
print(f"\nrastrigin: gbest = {res.best_f:.3f} at {np.round(res.best_x, 3)}")
