# %% [markdown]
# # Why routing removes gradient conflict
#
# Two phases whose losses pull a shared adapter in opposite directions score
# a conflict of 1. Give each phase its own adapter and the per-phase gradients
# have disjoint support, so the score drops to zero. Surgery methods only
# reshape the combined direction.

# %%
import numpy as np

from pamoe.baselines import cagrad_combine, pcgrad_combine
from pamoe.metrics import gradient_conflict_score

g_nav = np.array([1.0, 0.5, 0.0, 0.0])
g_man = np.array([-1.0, -0.4, 0.0, 0.0])
print("shared adapter  ", gradient_conflict_score([g_nav, g_man]))

# separate experts: same directions, different parameter blocks
sep_nav = np.concatenate([g_nav[:2], np.zeros(2)])
sep_man = np.concatenate([np.zeros(2), g_man[:2]])
print("separate experts", gradient_conflict_score([sep_nav, sep_man]))

# %%
print("sum    ", g_nav + g_man)
print("pcgrad ", pcgrad_combine([g_nav, g_man]))
print("cagrad ", cagrad_combine([g_nav, g_man], c=0.5))
