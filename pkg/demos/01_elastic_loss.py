"""
The elastic constraint as label smoothing
=========================================

Cross entropy plus ``alpha * KL(history || current)`` is the same objective as
``(1 + alpha)`` times cross entropy against a smoothed target, plus a term
that does not depend on the current model. This script checks that numerically
and shows what the smoothed target looks like.
"""
# %%
import numpy as np

from fedec.nncore import cross_entropy, kl_divergence, smoothed_target, soft_cross_entropy

rng = np.random.default_rng(0)
current = rng.dirichlet(np.ones(4), size=5)
history = rng.dirichlet(np.ones(4), size=5)
labels = rng.integers(0, 4, size=5)

# %%
# Both forms of the loss for a few constraint weights.

for alpha in (0.0, 0.5, 1.0, 4.0):
    direct = cross_entropy(current, labels) + alpha * kl_divergence(history, current)
    target = smoothed_target(labels, history, alpha)
    const = alpha * np.mean(np.sum(history * np.log(history), axis=1))
    smoothed = (1 + alpha) * soft_cross_entropy(target, current) + const
    print(f"alpha={alpha:<4} direct={direct:.10f} smoothed={smoothed:.10f} "
          f"diff={abs(direct - smoothed):.1e}")

# %%
# The smoothed target for the first example: the one-hot label is blended with
# the history model's prediction, so a confident but wrong history pulls mass
# away from the true class.

print("label        ", labels[0])
print("history      ", np.round(history[0], 3))
for alpha in (0.5, 2.0):
    print(f"target a={alpha:<3}", np.round(smoothed_target(labels[:1], history[:1], alpha)[0], 3))
