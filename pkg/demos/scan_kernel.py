"""
The selective scan
==================

A token-dependent linear recurrence, discretized with zero-order hold.
"""

import numpy as np

from dvmsr import ssm

# scalar ZOH: A = -1, step 0.1
a_bar, b_bar = ssm.zoh_discretize(-1.0, 1.0, 0.1)
print("A_bar", a_bar, "=", np.exp(-0.1))
print("B_bar", b_bar, "=", 1 - np.exp(-0.1))

# a small selective SSM over 8 channels and 16 state dimensions
rng = np.random.default_rng(0)
params = ssm.init_ssm_params(8, 16, 1, rng)
tokens = rng.normal(size=(1, 64, 8))
disc = ssm.selectivize(tokens, params)
y = ssm.selective_scan(disc, tokens, params.D_skip)
print("output", y.shape, "step range", disc.delta.min(), disc.delta.max())

# after an impulse the hidden state decays; the readout C is token-dependent,
# so with zero tokens it is the state, not y, that shows the memory
impulse = np.zeros((1, 200, 8))
impulse[0, 0] = 1.0
disc = ssm.selectivize(impulse, params)
states, _ = ssm.scan_recurrence(disc.A_bar, disc.B_bar_x)
for t in (0, 10, 50, 199):
    print(f"t={t:3d}  |h| = {np.abs(states[0, t]).max():.3e}")

# bidirectional: forward scan plus the re-reversed backward scan
both = ssm.selective_scan_bidirectional(tokens, params, ssm.init_ssm_params(8, 16, 1, rng))
print("bidirectional", both.shape)
