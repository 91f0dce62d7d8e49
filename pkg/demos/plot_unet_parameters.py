"""
How big is each U-Net in the search grid?
=========================================

The swarm searches over filter width and kernel size, and both change the
model size by a lot. This script builds every grid point at a fixed depth
and prints the parameter tally, split into learnable weights and the
batch-norm running statistics that are stored but never trained.
"""

import numpy as np

from swseg import UNetConfig, build, param_count

#%%
# The reference configuration: depth 5, 32 base filters, 3x3 kernels,
# RGB input and a single-channel sigmoid head.

model = build(UNetConfig(filters=32, kernel_size=3, depth=5))
total = param_count(model)
trainable = param_count(model, trainable_only=True)
print(f"reference U-Net: {total:,} parameters, {trainable:,} trainable")
print(f"normalized channels: {model.normalized_channels()}  (2 running stats each)")

#%%
# Every grid point at depth 3, the desk-scale setting. Convolution weights
# scale with k^2 and with the square of the width, so going from 8 filters
# at 3x3 to 64 filters at 5x5 multiplies the size by well over a hundred.

filters = (8, 16, 32, 64)
kernels = (3, 4, 5)
table = np.array([[param_count(build(UNetConfig(f, k, depth=3))) for k in kernels] for f in filters])

print("\ndepth 3       " + "".join(f"k={k:<10d}" for k in kernels))
for f, row in zip(filters, table):
    print(f"filters {f:<4d}  " + "".join(f"{n:<12,d}" for n in row))
print(f"\nlargest / smallest = {table.max() / table.min():.1f}")

#%%
# Adding a level roughly quadruples the count, since the new bottleneck has
# twice the channels of the previous one.

for depth in range(2, 6):
    print(f"depth {depth}: {param_count(build(UNetConfig(16, 3, depth=depth))):,}")
