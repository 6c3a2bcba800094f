"""
Walking the section-control environment by hand
===============================================

Draw a few insecure scenarios, then take masked random actions and
watch the section flow and the reward.
"""

import numpy as np

from powerformer import SectionEnv, builtin_case, builtin_sections, generate_scenarios

case = builtin_case("case30")
sections = builtin_sections(case, "case30")
scenarios = generate_scenarios(case, sections, seed=3, count=6)
print([(s.id, s.section, s.split, round(s.initial_flow, 2)) for s in scenarios])

env = SectionEnv(case, sections)
rng = np.random.default_rng(0)
obs = env.reset(scenarios[0])
print("node features", obs.H.shape, "section code", obs.z.shape, "legal actions", int(obs.mask.sum()))

done = False
while not done:
    a = int(rng.choice(np.flatnonzero(obs.mask)))
    res = env.step(a)
    obs, done = res.observation, res.done
    print(f"step {obs.step:2d} action {a:2d} flow {res.flow:8.2f} reward {res.reward:7.3f}")
print("outcome:", res.outcome)
