import numpy as np
import pytest

from powerformer.grid import builtin_case, builtin_sections, parse_matpower_case


@pytest.fixture(scope="session")
def case9():
    return builtin_case("case9")


@pytest.fixture(scope="session")
def case30():
    return builtin_case("case30")


@pytest.fixture(scope="session")
def case118():
    return builtin_case("case118")


@pytest.fixture(scope="session")
def sections30(case30):
    return builtin_sections(case30, "case30")


def matpower_text(buses, gens, branches, gencost=None, base_mva=100.0):
    """Assemble MATPOWER text from short row tuples.

    buses: (id, type, pd, qd[, gs, bs]); gens: (bus, pg, pmax, pmin[, vg]);
    branches: (f, t, r, x[, b, tap, shift]).
    """
    lines = ["function mpc = synthetic", "mpc.version = '2';", f"mpc.baseMVA = {base_mva};", "mpc.bus = ["]
    for row in buses:
        bid, btype, pd, qd, *rest = row
        gs, bs = (rest + [0.0, 0.0])[:2]
        lines.append(f"\t{bid}\t{btype}\t{pd}\t{qd}\t{gs}\t{bs}\t1\t1\t0\t345\t1\t1.1\t0.9;")
    lines += ["];", "mpc.gen = ["]
    for row in gens:
        bus, pg, pmax, pmin, *rest = row
        vg = rest[0] if rest else 1.0
        lines.append(f"\t{bus}\t{pg}\t0\t300\t-300\t{vg}\t100\t1\t{pmax}\t{pmin}\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;")
    lines += ["];", "mpc.branch = ["]
    for row in branches:
        f, t, r, x, *rest = row
        b, tap, shift = (list(rest) + [0.0, 0.0, 0.0])[:3]
        lines.append(f"\t{f}\t{t}\t{r}\t{x}\t{b}\t250\t250\t250\t{tap}\t{shift}\t1\t-360\t360;")
    lines.append("];")
    if gencost is not None:
        lines.append("mpc.gencost = [")
        for a, b, c in gencost:
            lines.append(f"\t2\t0\t0\t3\t{a}\t{b}\t{c};")
        lines.append("];")
    return "\n".join(lines) + "\n"


def synthetic_case(buses, gens, branches, gencost=None, name="synthetic"):
    return parse_matpower_case(matpower_text(buses, gens, branches, gencost), name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
