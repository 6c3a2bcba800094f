import numpy as np
import pytest

from powerformer.env import (
    DOWN,
    UP,
    EnvConfig,
    Scenario,
    SectionEnv,
    apply_perturbations,
    dump_scenarios,
    generate_scenarios,
    parse_scenarios,
    perturbable_elements,
)
from powerformer.errors import ExhaustedAttempts, MaskedAction, NonConvergence
from powerformer.grid import builtin_sections, ceil_quarter, make_section
from powerformer.powerflow import generation_cost, section_flow, solve_ac


@pytest.fixture(scope="module")
def scenarios30(case30, sections30):
    return generate_scenarios(case30, sections30, seed=3, count=30)


def test_scenarios_are_insecure_and_well_formed(case30, sections30, scenarios30):
    n_pick = ceil_quarter(len(perturbable_elements(case30)))
    by_id = {s.id: s for s in sections30}
    for sc in scenarios30:
        assert len(sc.perturbations) == n_pick
        assert len({(k, i) for k, i, _ in sc.perturbations}) == n_pick
        for _, _, f in sc.perturbations:
            assert round(f * 10) == f * 10 and 0.1 <= f <= 2.0
        sol = solve_ac(apply_perturbations(case30, sc.perturbations))
        flow = section_flow(sol, by_id[sc.section])
        assert not flow.within_p_bounds
        assert flow.p == pytest.approx(sc.initial_flow, abs=1e-9)


def test_generation_is_deterministic(case30, sections30, scenarios30):
    again = generate_scenarios(case30, sections30, seed=3, count=30)
    assert again == scenarios30
    other = generate_scenarios(case30, sections30, seed=4, count=30)
    assert other != scenarios30


def test_split_is_roughly_ninety_ten(case30, sections30):
    scen = generate_scenarios(case30, sections30, seed=0, count=200)
    n_test = sum(s.split == "test" for s in scen)
    assert 8 <= n_test <= 35
    assert {s.section for s in scen} == {1, 2}


def test_count_one(case30, sections30):
    assert len(generate_scenarios(case30, sections30, seed=0, count=1)) == 1
    with pytest.raises(ValueError):
        generate_scenarios(case30, sections30, seed=0, count=0)


def test_loose_bounds_exhaust(case30):
    loose = make_section(case30, 9, [(4, 12)], -1e6, 1e6)
    with pytest.raises(ExhaustedAttempts):
        generate_scenarios(case30, [loose], seed=0, count=1, max_attempts=20)


def test_serialization_round_trip(scenarios30):
    text = dump_scenarios(scenarios30, "case30", 3)
    assert parse_scenarios(text) == scenarios30
    assert dump_scenarios(parse_scenarios(text), "case30", 3) == text
    with pytest.raises(ValueError, match="line 2"):
        parse_scenarios(text.splitlines()[0] + "\nid=oops\n")


def test_perturbation_scales_loads_at_constant_power_factor(case30):
    j = int(case30.load_buses[0])
    pert = apply_perturbations(case30, [("load", j, 1.5)])
    assert pert.pd[j] == pytest.approx(1.5 * case30.pd[j])
    assert pert.qd[j] == pytest.approx(1.5 * case30.qd[j])
    g = apply_perturbations(case30, [("gen", 1, 2.0)])
    assert g.pg[1] == min(2 * case30.pg[1], case30.pmax[1])


def test_reset_observation(case30, sections30, scenarios30):
    env = SectionEnv(case30, sections30)
    sc = scenarios30[0]
    obs = env.reset(sc)
    assert obs.H.shape == (30, 4)
    assert obs.z.shape == (4 * case30.n_branch,)
    sec = env.sections[sc.section]
    z = obs.z.reshape(4, -1)
    outside = np.setdiff1d(np.arange(case30.n_branch), sec.branches)
    assert np.all(z[:, outside] == 0)
    assert np.any(z[:, list(sec.branches)] != 0)
    assert obs.mask.shape == (2 * case30.n_gen,)
    assert obs.mask.any()
    env1 = SectionEnv(case30, sections30, EnvConfig(z_mode="1m"))
    assert env1.reset(sc).z.shape == (case30.n_branch,)


def test_mask_rules(case30, sections30):
    env = SectionEnv(case30, sections30)
    env.reset_case(case30, 1)
    pg = case30.pg.copy()
    pg[1] = case30.pmax[1]  # at the cap
    pg[2] = 0.0  # Pmin = 0, so 0.9 * 0 = 0 stays allowed
    mask = env.action_mask(pg)
    assert not mask[2] and mask[3]
    assert mask[4] and mask[5]
    slack_unit = int(np.flatnonzero(case30.gen_idx == case30.slack)[0])
    assert not mask[2 * slack_unit] and not mask[2 * slack_unit + 1]
    off = case30.replace(gen_status=np.where(np.arange(case30.n_gen) == 3, 0, case30.gen_status))
    env_off = SectionEnv(off, sections30)
    env_off.reset_case(off, 1)
    assert not env_off.action_mask()[6] and not env_off.action_mask()[7]


def test_step_dynamics_and_reward(case30, sections30, scenarios30):
    env = SectionEnv(case30, sections30)
    sc = scenarios30[1]
    env.reset(sc)
    start_pg = env.current.pg.copy()
    c_ref = env.cost_ref
    a = int(np.flatnonzero(env.action_mask())[0])
    res = env.step(a)
    gen, down = divmod(a, 2)
    assert env.current.pg[gen] == pytest.approx(start_pg[gen] * (DOWN if down else UP))
    # independent recomputation of the reward from a fresh solve
    sol = solve_ac(env.current)
    sec = env.sections[sc.section]
    p = section_flow(sol, sec).p
    r_pf = -abs(p - sec.midpoint) / sec.half_range
    r_ed = -generation_cost(env.current, sol.pg) / c_ref
    bonus = 10.0 if sec.contains_p(p) else 0.0
    # both solves stop at a 1e-8 p.u. mismatch, so flows agree to ~1e-6 MW
    assert res.reward == pytest.approx(r_pf + 0.1 * r_ed + bonus, abs=1e-6)
    assert res.done == (res.outcome != "running")


def test_masked_action_is_an_error(case30, sections30):
    env = SectionEnv(case30, sections30)
    env.reset_case(case30, 1)
    blocked = int(np.flatnonzero(~env.action_mask())[0])
    with pytest.raises(MaskedAction):
        env.step(blocked)


def test_step_limit(case30, sections30, scenarios30):
    env = SectionEnv(case30, sections30, EnvConfig(step_limit=2, success_bonus=0.0))
    sc = next(s for s in scenarios30 if abs(s.initial_flow) > 0)
    env.reset(sc)
    outcomes = []
    while not env.done:
        a = int(np.flatnonzero(env.action_mask())[0])
        outcomes.append(env.step(a).outcome)
    assert outcomes[-1] in ("success", "step_limit")
    assert len(outcomes) <= 2


def test_episode_determinism(case30, sections30, scenarios30):
    def run():
        env = SectionEnv(case30, sections30)
        rng = np.random.default_rng(11)
        obs = env.reset(scenarios30[2])
        trace = []
        while not env.done:
            a = int(rng.choice(np.flatnonzero(obs.mask)))
            res = env.step(a)
            obs = res.observation
            trace.append((a, res.reward, res.flow, obs.H.tobytes(), obs.z.tobytes()))
        return trace

    assert run() == run()


def test_divergence_ends_episode(case30, sections30, monkeypatch):
    env = SectionEnv(case30, sections30)
    env.reset_case(case30, 1)

    def blow_up(case):
        raise NonConvergence("diverged", 20, 1e3)

    monkeypatch.setattr(env, "_solve", blow_up)
    a = int(np.flatnonzero(env.action_mask())[0])
    res = env.step(a)
    assert res.done and res.outcome == "diverged" and res.reward == -10.0


def test_builtin_sections_on_case9(case9):
    secs = builtin_sections(case9, "case9")
    assert len(secs) == 1
    scen = generate_scenarios(case9, secs, seed=0, count=5)
    assert all(s.section == 1 for s in scen)
    assert isinstance(scen[0], Scenario)
