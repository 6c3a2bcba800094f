"""Section-adaptive graph attention for transmission-section power-flow adjustment."""

from .errors import PowerformerError
from .grid import GridCase, PowerGraph, Section, build_graph, builtin_case, builtin_sections, load_case
from .powerflow import solve_ac, solve_dc, section_flow
from .nn import KINDS, PowerformerConfig, QNetwork
from .env import EnvConfig, Scenario, SectionEnv, generate_scenarios
from .agent import TrainConfig, evaluate, evaluate_random, train

__version__ = "0.1.0"
