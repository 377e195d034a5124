"""Averaging in the mirror space versus plain averaging, on two scalar models."""

import numpy as np

from mirror_gossip import MirrorMap, aggregate_row, forward, inverse

models = [[3.0], [11.0]]          # device 1 is behind, device 2 is ahead
skewed = [0.4, 0.6]               # device 2 gets more weight
flipped = [0.6, 0.4]              # ... or less

for p in (1, 3, 5, 15):
    mm = MirrorMap(p)
    a = aggregate_row(skewed, models, mm)[0]
    b = aggregate_row(flipped, models, mm)[0]
    print(f"p={p:>2}  0.4/0.6 -> {a:8.4f}   0.6/0.4 -> {b:8.4f}   spread {a - b:.4f}")

# larger p pulls the aggregate toward the larger model and makes it
# less sensitive to how the weights are skewed

# the mirror map is an odd power, so signs survive the round trip
mm = MirrorMap(5)
x = np.array([-2.0, -0.5, 0.0, 0.25, 3.0])
print("h(x)      ", forward(mm, x))
print("h^-1(h(x))", inverse(mm, forward(mm, x)))

# a fixed point: equal models aggregate to themselves for any weights
print(aggregate_row(np.random.default_rng(0).dirichlet(np.ones(4)), [[7.0]] * 4, mm))
