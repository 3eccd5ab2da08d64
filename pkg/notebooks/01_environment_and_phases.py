# %% [markdown]
# # The grid room and its phases
#
# Walk one episode with the scripted teacher and look at the oracle phase
# labels the metrics are scored against. Runs in a second or two.

# %%
import numpy as np

from pamoe.envs import PHASES, PhasedGridWorld
from pamoe.metrics import count_switches, extract_phases
from pamoe.warmup import scripted_distribution

env = PhasedGridWorld()
rng = np.random.default_rng(0)
obs, goal = env.reset(seed=4)
print("category", goal.task_category, "targets", goal.target_objects)

# %%
phases, rewards = [], []
while not env.done:
    phases.append(int(env.oracle_phase()))
    res = env.step(int(rng.choice(env.n_actions, p=scripted_distribution(env))))
    rewards.append(res.reward)
print("steps", len(phases), "return", sum(rewards))

# %% [markdown]
# Oracle phases come out as contiguous segments. The same segmentation is
# applied to router decisions when phases are extracted from a trained run.

# %%
for seg in extract_phases(phases):
    print(f"{PHASES[seg.expert]:<10} steps {seg.start}-{seg.end}")
print("phase changes:", count_switches(phases))
