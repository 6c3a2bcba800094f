import json

import numpy as np
import pytest

from conftest import matpower_text, synthetic_case
from powerformer.errors import (
    AmbiguousBranch,
    DanglingReference,
    EmptySection,
    InvertedBounds,
    MalformedRow,
    MissingBlock,
    NoSlackBus,
    SectionConfigError,
    UnknownBranch,
)
from powerformer.grid import (
    build_graph,
    builtin_sections,
    ceil_quarter,
    dump_section_config,
    load_section_config,
    make_section,
    parse_matpower_case,
    to_matpower,
)

TRIANGLE = dict(
    buses=[(1, 3, 0, 0), (2, 1, 50, 10), (3, 2, 30, 5)],
    gens=[(1, 0, 200, 0), (3, 40, 100, 10)],
    branches=[(1, 2, 0.01, 0.1), (2, 3, 0.01, 0.1), (1, 3, 0.01, 0.1)],
)


def test_case118_inventory(case118):
    assert case118.n_bus == 118
    assert case118.n_gen == 54
    assert case118.n_branch == 186
    assert len(case118.load_buses) == 99
    assert ceil_quarter(case118.n_gen + len(case118.load_buses)) == 39


def test_case118_figure_lines_present_once(case118):
    for f, t in [(33, 37), (19, 34), (30, 38), (23, 24)]:
        hits = np.flatnonzero((case118.f_bus == f) & (case118.t_bus == t))
        rev = np.flatnonzero((case118.f_bus == t) & (case118.t_bus == f))
        assert len(hits) == 1 and len(rev) == 0


def test_columns_are_read_only(case9):
    with pytest.raises(ValueError):
        case9.pd[0] = 1.0


def test_round_trip(case118):
    again = parse_matpower_case(to_matpower(case118), "again")
    assert again.equals(case118)


def test_missing_gencost_defaults_to_linear():
    case = synthetic_case(**TRIANGLE)
    np.testing.assert_array_equal(case.cost_b, [1.0, 1.0])
    np.testing.assert_array_equal(case.cost_a, [0.0, 0.0])


def test_linear_gencost_padded():
    text = matpower_text(**TRIANGLE)
    text += "mpc.gencost = [\n\t2\t0\t0\t2\t3.5\t7;\n\t2\t0\t0\t2\t1\t0;\n];\n"
    case = parse_matpower_case(text)
    np.testing.assert_array_equal(case.cost_b, [3.5, 1.0])
    np.testing.assert_array_equal(case.cost_c, [7.0, 0.0])


def test_malformed_row_reports_line():
    text = matpower_text(**TRIANGLE)
    lines = text.splitlines()
    idx = next(i for i, l in enumerate(lines) if l.startswith("\t2\t1\t50"))
    lines[idx] = lines[idx].replace("50", "5x0", 1)
    with pytest.raises(MalformedRow) as err:
        parse_matpower_case("\n".join(lines))
    assert err.value.lineno == idx + 1


def test_short_row_rejected():
    lines = matpower_text(**TRIANGLE).splitlines()
    idx = next(i for i, l in enumerate(lines) if l.startswith("\t2\t1\t50"))
    lines[idx] = "\t2\t1\t50;"
    with pytest.raises(MalformedRow, match="columns"):
        parse_matpower_case("\n".join(lines))


def test_missing_block():
    text = matpower_text(**TRIANGLE)
    start = text.index("mpc.branch")
    with pytest.raises(MissingBlock):
        parse_matpower_case(text[:start])


def test_dangling_reference():
    bad = dict(TRIANGLE, branches=[(1, 2, 0.01, 0.1), (2, 7, 0.01, 0.1)])
    with pytest.raises(DanglingReference):
        synthetic_case(**bad)


def test_no_slack():
    bad = dict(TRIANGLE, buses=[(1, 2, 0, 0), (2, 1, 50, 10), (3, 2, 30, 5)])
    with pytest.raises(NoSlackBus):
        synthetic_case(**bad)


def test_section_orientation_and_errors(case118):
    s = make_section(case118, 7, [(33, 37), (19, 34), (30, 38), (23, 24)], 130, 880)
    assert s.signs == (1, 1, 1, 1)
    assert s.midpoint == 505.0 and s.half_range == 375.0
    rev = make_section(case118, 7, [(37, 33)], 130, 880)
    assert rev.signs == (-1,)
    with pytest.raises(UnknownBranch, match="section 3"):
        make_section(case118, 3, [(1, 118)], 0, 10)
    with pytest.raises(AmbiguousBranch):
        make_section(case118, 1, [(42, 49)], 0, 10)
    a = make_section(case118, 1, [(42, 49, 1)], 0, 10)
    b = make_section(case118, 1, [(42, 49, 2)], 0, 10)
    assert a.branches != b.branches
    with pytest.raises(EmptySection):
        make_section(case118, 1, [], 0, 10)
    with pytest.raises(InvertedBounds):
        make_section(case118, 1, [(33, 37)], 10, 10)


def test_section_config_round_trip(case118):
    sections = builtin_sections(case118, "case118")
    assert [s.id for s in sections] == list(range(1, 11))
    bounds = [(s.p_min, s.p_max) for s in sections]
    assert bounds == [(90, 640), (50, 360), (40, 290), (90, 640), (70, 480),
                      (45, 300), (130, 880), (55, 390), (130, 880), (90, 615)]
    again = load_section_config(dump_section_config(sections), case118)
    assert again == sections


def test_section_config_rejects_duplicates(case9):
    doc = {"sections": [{"id": 1, "lines": [[8, 9]], "p_min": 0, "p_max": 1}] * 2}
    with pytest.raises(SectionConfigError, match="duplicate"):
        load_section_config(json.dumps(doc), case9)
    with pytest.raises(SectionConfigError):
        load_section_config("{not json", case9)


def test_graph_shape(case9, case30, case118):
    for case, m in ((case9, 9), (case30, 41), (case118, 186)):
        g = build_graph(case)
        assert g.n == case.n_bus and g.m == m
        adj = g.adjacency
        assert (adj != adj.T).nnz == 0
        assert adj.sum() == 2 * m


def test_graph_permutation_equality(case30, rng):
    g = build_graph(case30)
    perm = rng.permutation(g.n)
    p = g.permuted(perm)
    assert p != g
    inv = np.argsort(perm)
    assert p.permuted(inv) == g
