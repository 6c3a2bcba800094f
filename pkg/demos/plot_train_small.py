"""
A short Dueling DQN run on the 30-bus benchmark
===============================================

Train a narrow network for a few thousand steps and compare greedy
test success with a random policy. Takes about a minute on one core.
"""

from powerformer import (SectionEnv, TrainConfig, builtin_case, builtin_sections, evaluate,
                         evaluate_random, generate_scenarios, train)
from powerformer.agent import build_network
from powerformer.env import fit_scaler

case = builtin_case("case30")
sections = builtin_sections(case, "case30")
scenarios = generate_scenarios(case, sections, seed=0, count=200)
train_set = [s for s in scenarios if s.split == "train"]
test_set = [s for s in scenarios if s.split == "test"]
scaler = fit_scaler(case, sections, train_set)


def factory():
    return SectionEnv(case, sections, scaler=scaler)


env = factory()
net = build_network(env, "powerformer", seed=0, d=16)
cfg = TrainConfig(total_steps=3000, update_every=4, eval_interval=500, seed=0)
net, rows = train(env, train_set, cfg, net=net)
for r in rows:
    print(f"step {r.step:5d}  trailing success {r.trailing_success_rate:5.1f}%  loss {r.loss:.3f}")

print(f"greedy test success {evaluate(net, factory, test_set).success_rate:.1f}%")
print(f"random test success {evaluate_random(factory, test_set, seed=0).success_rate:.1f}%")
