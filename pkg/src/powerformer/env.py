"""Section power-flow adjustment environment.

An episode starts from an insecure operating point (a perturbed copy of the
base case whose target-section flow sits outside its band). Each action
scales one generator's active output by 1.1 or 0.9; the slack bus absorbs the
difference and the AC power flow is re-solved.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ExhaustedAttempts, MaskedAction, PowerFlowError
from .grid import build_graph, ceil_quarter
from .powerflow import (
    FeatureScaler,
    generation_cost,
    make_ybus,
    raw_branch_state,
    raw_state,
    section_flow,
    solve_ac,
)

FACTORS = tuple(round(0.1 * i, 1) for i in range(1, 21))
PERTURB_SHARE = 0.25
UP, DOWN = 1.1, 0.9
SCENARIO_HEADER = "# powerformer-scenarios v1"


@dataclass(frozen=True)
class Scenario:
    id: int
    section: int
    perturbations: tuple  # ((kind, index, factor), ...); kind in {"gen", "load"}
    initial_flow: float
    split: str = "train"


@dataclass
class EnvConfig:
    step_limit: int = 50
    w_ed: float = 0.1
    success_bonus: float = 10.0
    diverge_penalty: float = -10.0
    strict_q: bool = False
    z_mode: str = "4m"  # "4m": P, Q, Vm, Va per branch; "1m": active flow only
    tol: float = 1e-8
    max_iter: int = 20


@dataclass
class Observation:
    H: np.ndarray  # (n, 4), rows in graph node order
    z: np.ndarray  # (zdim,)
    graph: object
    mask: np.ndarray  # (2 * n_gen,) bool, True = allowed
    step: int
    section: int


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    outcome: str  # "success" | "step_limit" | "diverged" | "running"
    cost: float
    flow: float
    info: dict = field(default_factory=dict)


def apply_perturbations(case, perturbations):
    """Scale generator Pg / bus loads by the recorded factors.

    Loads keep their power factor. Generator output is clipped to its limits
    so every episode starts from a dispatch the action mask can reason about.
    """
    pg = case.pg.copy()
    pd = case.pd.copy()
    qd = case.qd.copy()
    for kind, idx, factor in perturbations:
        if kind == "gen":
            pg[idx] = np.clip(pg[idx] * factor, case.pmin[idx], case.pmax[idx])
        elif kind == "load":
            pd[idx] *= factor
            qd[idx] *= factor
        else:
            raise ValueError(f"unknown perturbation kind {kind!r}")
    return case.replace(pg=pg, pd=pd, qd=qd)


def split_of(seed, scenario_id, test_share=10):
    digest = hashlib.sha256(f"{seed}:{scenario_id}".encode()).digest()
    return "test" if int.from_bytes(digest[:8], "little") % 100 < test_share else "train"


def perturbable_elements(case):
    gens = [("gen", int(i)) for i in np.flatnonzero(case.gen_status != 0)]
    loads = [("load", int(j)) for j in case.load_buses]
    return gens + loads


def generate_scenarios(case, sections, seed, count, max_attempts=500, section_ids=None):
    """Draw ``count`` insecure scenarios, cycling over the target sections.

    Each draw perturbs a random quarter of all generators and loads by a
    factor from {0.1, ..., 2.0}; draws whose AC solve fails or whose target
    flow is already inside its band are discarded.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    pool = [s for s in sections if section_ids is None or s.id in section_ids]
    if not pool:
        raise ValueError("no sections to target")
    rng = np.random.default_rng(seed)
    elements = perturbable_elements(case)
    n_pick = ceil_quarter(len(elements))
    network = make_ybus(case)
    out = []
    for sid in range(count):
        section = pool[sid % len(pool)]
        for _ in range(max_attempts):
            picks = rng.choice(len(elements), size=n_pick, replace=False)
            factors = rng.integers(1, 21, size=n_pick) / 10.0
            perturb = tuple((elements[p][0], elements[p][1], float(f)) for p, f in zip(sorted(picks), factors[np.argsort(picks)]))
            try:
                sol = solve_ac(apply_perturbations(case, perturb), network=network)
            except PowerFlowError:
                continue
            flow = section_flow(sol, section)
            if not flow.within_p_bounds:
                out.append(Scenario(sid, section.id, perturb, flow.p, split_of(seed, sid)))
                break
        else:
            raise ExhaustedAttempts(
                f"no insecure scenario for section {section.id} after {max_attempts} draws; "
                "bounds may be too loose")
    return out


def dump_scenarios(scenarios, case_name="case", seed=0):
    lines = [f"{SCENARIO_HEADER} case={case_name} seed={seed} count={len(scenarios)}"]
    for s in scenarios:
        pert = ",".join(f"{k}:{i}:{f!r}" for k, i, f in s.perturbations)
        lines.append(f"id={s.id} section={s.section} split={s.split} flow={s.initial_flow!r} perturb={pert}")
    return "\n".join(lines) + "\n"


def parse_scenarios(text):
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            fields = dict(tok.split("=", 1) for tok in line.split())
            pert = []
            if fields.get("perturb"):
                for item in fields["perturb"].split(","):
                    kind, idx, fac = item.split(":")
                    pert.append((kind, int(idx), float(fac)))
            out.append(Scenario(int(fields["id"]), int(fields["section"]), tuple(pert),
                                float(fields["flow"]), fields.get("split", "train")))
        except (KeyError, ValueError) as err:
            raise ValueError(f"scenario file line {lineno}: {err}") from None
    return out


class SectionEnv:
    """Generator re-dispatch environment over one grid and a set of sections."""

    def __init__(self, case, sections, config=None, scaler=None):
        self.case = case
        self.sections = {s.id: s for s in sections}
        self.config = config or EnvConfig()
        self.scaler = scaler or FeatureScaler.identity()
        self.graph = build_graph(case)
        self.network = make_ybus(case)
        # rows of the bus table -> graph node order
        self._node_order = np.array([self.graph.node_index[int(b)] for b in case.bus_id])
        self.n_actions = 2 * case.n_gen
        self._controllable = (case.gen_status != 0) & (case.gen_idx != case.slack)
        self._v = None
        self.current = None
        self.solution = None
        self.section = None
        self.step_count = 0
        self.cost_ref = None
        self.done = True

    @property
    def zdim(self):
        return (4 if self.config.z_mode == "4m" else 1) * self.case.n_branch

    # -- episode control ---------------------------------------------------------

    def reset(self, scenario):
        return self.reset_case(apply_perturbations(self.case, scenario.perturbations), scenario.section)

    def reset_case(self, case, section_id):
        """Start an episode from an arbitrary dispatch of the same network."""
        self.section = self.sections[section_id]
        self.current = case
        self._v = None
        self.solution = self._solve(case)
        self.step_count = 0
        self.cost_ref = generation_cost(case, self.solution.pg)
        self.done = False
        return self.observe()

    def _solve(self, case):
        sol = solve_ac(case, self.config.tol, self.config.max_iter, v0=self._v, network=self.network)
        self._v = sol.vm * np.exp(1j * sol.va)
        return sol

    def action_mask(self, pg=None):
        """True where the action keeps the generator inside its limits.

        Action ``2 i`` raises generator ``i`` by 10 %, ``2 i + 1`` lowers it by
        10 %. Out-of-service units and the slack unit (whose output the solver
        sets) are never dispatchable.
        """
        case = self.case
        pg = self.current.pg if pg is None else pg
        up = self._controllable & (UP * pg <= case.pmax)
        down = self._controllable & (DOWN * pg >= case.pmin)
        mask = np.empty(self.n_actions, dtype=bool)
        mask[0::2] = up
        mask[1::2] = down
        return mask

    def observe(self):
        sol = self.solution
        H = np.empty((self.case.n_bus, 4))
        H[self._node_order] = self.scaler.bus(raw_state(sol))
        return Observation(H, self.encode_section(sol, self.section), self.graph,
                           self.action_mask(), self.step_count, self.section.id)

    def encode_section(self, sol, section):
        """Section encoding: branch features inside ``section``, zeros elsewhere."""
        raw = raw_branch_state(sol, self.case)
        idx = np.asarray(section.branches)
        sign = np.asarray(section.signs, dtype=float)
        oriented = raw[idx].copy()
        oriented[:, :2] *= sign[:, None]
        scaled = self.scaler.branch(oriented)
        z = np.zeros((4, self.case.n_branch))
        z[:, idx] = scaled.T
        if self.config.z_mode == "1m":
            z = z[:1]
        return z.reshape(-1)

    def flow(self):
        return section_flow(self.solution, self.section, self.config.strict_q)

    def cost(self):
        return generation_cost(self.current, self.solution.pg)

    def step(self, action):
        if self.done:
            raise RuntimeError("step() on a finished episode; call reset() first")
        action = int(action)
        mask = self.action_mask()
        if not 0 <= action < self.n_actions or not mask[action]:
            raise MaskedAction(f"action {action} is masked in the current state")
        gen, direction = divmod(action, 2)
        pg = self.current.pg.copy()
        pg[gen] *= DOWN if direction else UP
        case = self.current.replace(pg=pg)
        self.step_count += 1
        cfg = self.config
        try:
            sol = self._solve(case)
        except PowerFlowError as err:
            self.done = True
            self.current = case
            obs = self.observe()
            return StepResult(obs, cfg.diverge_penalty, True, "diverged", float("nan"), float("nan"),
                              {"error": str(err)})
        self.current, self.solution = case, sol
        flow = self.flow()
        cost = self.cost()
        sec = self.section
        r_pf = -abs(flow.p - sec.midpoint) / sec.half_range
        r_ed = -cost / self.cost_ref if self.cost_ref else 0.0
        success = flow.within_p_bounds and flow.within_q_bounds
        reward = r_pf + cfg.w_ed * r_ed + (cfg.success_bonus if success else 0.0)
        if success:
            outcome = "success"
        elif self.step_count >= cfg.step_limit:
            outcome = "step_limit"
        else:
            outcome = "running"
        obs = self.observe()
        if outcome == "running" and not obs.mask.any():
            # no dispatch left to try; close the episode like a timeout
            outcome = "step_limit"
        self.done = outcome != "running"
        return StepResult(obs, float(reward), self.done, outcome, cost, flow.p,
                          {"r_pf": r_pf, "r_ed": r_ed})


def fit_scaler(case, sections, scenarios):
    """Freeze feature statistics from the initial states of ``scenarios``."""
    network = make_ybus(case)
    bus_rows, branch_rows = [], []
    for sc in scenarios:
        try:
            sol = solve_ac(apply_perturbations(case, sc.perturbations), network=network)
        except PowerFlowError:
            continue
        bus_rows.append(raw_state(sol))
        branch_rows.append(raw_branch_state(sol, case))
    if not bus_rows:
        return FeatureScaler.identity()
    return FeatureScaler.fit(bus_rows, branch_rows)
