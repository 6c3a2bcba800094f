"""Grid case model, MATPOWER ingestion, transmission sections and graph view.

A :class:`GridCase` keeps every table as a read-only numpy column so that the
power-flow code can vectorize over buses, branches and generators directly.
Quantities stay in MATPOWER units (MW, MVAr, p.u., degrees); conversion to
per-unit happens inside the solvers.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np
import scipy.sparse as sp

from .errors import (
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

PQ, PV, REF = 1, 2, 3

# minimum column counts of the MATPOWER v2 tables we consume
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}

SECTION_FORMAT = "powerformer-sections"
SECTION_FORMAT_VERSION = 1


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridCase:
    """Static description of a transmission grid.

    Bus columns: ``bus_id, bus_type, pd, qd, gs, bs, vm, va, vmin, vmax``
    (``va`` in degrees, ``bus_type`` 1=PQ, 2=PV, 3=slack).
    Branch columns: ``f_bus, t_bus, r, x, b, rate, tap, shift, br_status``.
    Generator columns: ``gen_bus, pg, qg, qmax, qmin, vg, gen_status, pmax, pmin``.
    Cost columns: ``cost_a, cost_b, cost_c`` so that a unit producing ``P`` MW
    costs ``a*P**2 + b*P + c``.
    """

    base_mva: float
    bus_id: np.ndarray
    bus_type: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    vm: np.ndarray
    va: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    rate: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    br_status: np.ndarray
    gen_bus: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    qmax: np.ndarray
    qmin: np.ndarray
    vg: np.ndarray
    gen_status: np.ndarray
    pmax: np.ndarray
    pmin: np.ndarray
    cost_a: np.ndarray
    cost_b: np.ndarray
    cost_c: np.ndarray
    name: str = field(default="case")

    _INT_FIELDS = ("bus_id", "bus_type", "f_bus", "t_bus", "br_status", "gen_bus", "gen_status")

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name in ("base_mva", "name"):
                continue
            dtype = np.int64 if f.name in self._INT_FIELDS else float
            object.__setattr__(self, f.name, _frozen(getattr(self, f.name), dtype))
        self._validate()

    def _validate(self):
        if not self.base_mva > 0:
            raise MalformedRow(f"baseMVA must be positive, got {self.base_mva}")
        if len(np.unique(self.bus_id)) != len(self.bus_id):
            raise MalformedRow("duplicate bus ids")
        bad = set(self.bus_type.tolist()) - {PQ, PV, REF}
        if bad:
            raise MalformedRow(f"unsupported bus type(s) {sorted(bad)}")
        n_ref = int(np.sum(self.bus_type == REF))
        if n_ref == 0:
            raise NoSlackBus("case has no slack (type 3) bus")
        if n_ref > 1:
            raise MalformedRow(f"case has {n_ref} slack buses; exactly one is supported")
        known = set(self.bus_id.tolist())
        for label, ids in (("branch from-bus", self.f_bus), ("branch to-bus", self.t_bus),
                           ("generator bus", self.gen_bus)):
            missing = sorted(set(ids.tolist()) - known)
            if missing:
                raise DanglingReference(f"{label} refers to unknown bus id(s) {missing}")
        if np.any(self.f_bus == self.t_bus):
            raise MalformedRow("branch connects a bus to itself")
        lens = {len(self.gen_bus), len(self.pg), len(self.cost_a), len(self.cost_b), len(self.cost_c)}
        if len(lens) != 1:
            raise MalformedRow("generator and gencost tables disagree in length")

    # -- derived views -------------------------------------------------------

    @property
    def n_bus(self):
        return len(self.bus_id)

    @property
    def n_branch(self):
        return len(self.f_bus)

    @property
    def n_gen(self):
        return len(self.gen_bus)

    @cached_property
    def bus_index(self):
        """Map bus id -> row position in the bus table."""
        return {int(b): i for i, b in enumerate(self.bus_id)}

    @cached_property
    def slack(self):
        return int(np.flatnonzero(self.bus_type == REF)[0])

    @cached_property
    def f_idx(self):
        return _frozen([self.bus_index[int(b)] for b in self.f_bus], np.int64)

    @cached_property
    def t_idx(self):
        return _frozen([self.bus_index[int(b)] for b in self.t_bus], np.int64)

    @cached_property
    def gen_idx(self):
        return _frozen([self.bus_index[int(b)] for b in self.gen_bus], np.int64)

    @cached_property
    def load_buses(self):
        """Row positions of buses that carry a nonzero load."""
        return _frozen(np.flatnonzero((self.pd != 0) | (self.qd != 0)), np.int64)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def equals(self, other):
        """Field-for-field equality (exact, including float bits)."""
        if not isinstance(other, GridCase) or self.base_mva != other.base_mva:
            return False
        for f in dataclasses.fields(self):
            if f.name in ("base_mva", "name"):
                continue
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a.shape != b.shape or not np.array_equal(a, b):
                return False
        return True

    def __repr__(self):
        return (f"GridCase({self.name!r}, buses={self.n_bus}, branches={self.n_branch}, "
                f"gens={self.n_gen}, base_mva={self.base_mva})")


# -- MATPOWER parsing ---------------------------------------------------------

_BLOCK_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([\[{])(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[{'\"][^;]*);")


def _strip_comment(line):
    i = line.find("%")
    return line if i < 0 else line[:i]


def _scan_blocks(text):
    """Return ``{name: [(lineno, [tokens...]), ...]}`` plus scalar assignments."""
    blocks, scalars = {}, {}
    current, closer, rows = None, None, None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            m = _BLOCK_START.match(line)
            if m:
                current, closer, rows = m.group(1), "]" if m.group(2) == "[" else "}", []
                line = m.group(3)
            else:
                m = _SCALAR.match(line)
                if m:
                    scalars[m.group(1)] = (lineno, m.group(2).strip())
                continue
        end = line.find(closer)
        body = line if end < 0 else line[:end]
        for chunk in body.split(";"):
            toks = chunk.replace(",", " ").split()
            if toks:
                rows.append((lineno, toks))
        if end >= 0:
            if closer == "]":
                blocks[current] = rows
            current = None
    return blocks, scalars


def _numeric_table(rows, name, min_cols):
    out = []
    width = None
    for lineno, toks in rows:
        if len(toks) < min_cols:
            raise MalformedRow(f"mpc.{name} row has {len(toks)} columns, need >= {min_cols}", lineno)
        if width is not None and len(toks) != width and name != "gencost":
            raise MalformedRow(f"mpc.{name} row has {len(toks)} columns, expected {width}", lineno)
        width = len(toks)
        try:
            out.append([float(t) for t in toks])
        except ValueError:
            bad = next(t for t in toks if not _is_float(t))
            raise MalformedRow(f"non-numeric token {bad!r} in mpc.{name}", lineno) from None
    return out


def _table(blocks, name):
    rows = _numeric_table(blocks[name], name, _MIN_COLS[name])
    if not rows:
        return np.zeros((0, _MIN_COLS[name]))
    return np.array(rows, dtype=float)


def _is_float(tok):
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _gencost_columns(rows, n_gen):
    a, b, c = [], [], []
    if not rows:
        return [0.0] * n_gen, [1.0] * n_gen, [0.0] * n_gen
    if len(rows) < n_gen:
        raise MalformedRow(f"mpc.gencost has {len(rows)} rows for {n_gen} generators", rows[-1][0])
    for lineno, toks in rows[:n_gen]:
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            raise MalformedRow("non-numeric token in mpc.gencost", lineno) from None
        if len(vals) < 4:
            raise MalformedRow("mpc.gencost row too short", lineno)
        model, ncoef = int(vals[0]), int(vals[3])
        if model != 2:
            raise MalformedRow(f"gencost model {model} unsupported (polynomial model 2 only)", lineno)
        coefs = vals[4:4 + ncoef]
        if len(coefs) != ncoef:
            raise MalformedRow(f"gencost declares {ncoef} coefficients, row has {len(coefs)}", lineno)
        if ncoef > 3 and any(coefs[:ncoef - 3]):
            raise MalformedRow("gencost polynomial above quadratic order", lineno)
        coefs = [0.0] * max(0, 3 - ncoef) + coefs[-3:]
        a.append(coefs[0])
        b.append(coefs[1])
        c.append(coefs[2])
    return a, b, c


def parse_matpower_case(text, name="case"):
    """Parse MATPOWER v2 case-file text into a :class:`GridCase`.

    Only the columns the package consumes are kept; trailing columns (areas,
    ramp rates, OPF multipliers, ...) are accepted and dropped. A missing
    ``mpc.gencost`` block gives every generator the linear cost ``1 * P``.
    """
    blocks, scalars = _scan_blocks(text)
    if "baseMVA" not in scalars:
        raise MissingBlock("mpc.baseMVA not found")
    lineno, raw = scalars["baseMVA"]
    try:
        base_mva = float(raw)
    except ValueError:
        raise MalformedRow(f"mpc.baseMVA is not numeric: {raw!r}", lineno) from None
    for req in ("bus", "gen", "branch"):
        if req not in blocks:
            raise MissingBlock(f"mpc.{req} block not found")
    bus = _table(blocks, "bus")
    gen = _table(blocks, "gen")
    br = _table(blocks, "branch")
    if len(bus) == 0:
        raise MalformedRow("mpc.bus has no rows")
    ca, cb, cc = _gencost_columns(blocks.get("gencost", []), len(gen))
    for tab, label, idcols in ((bus, "bus", (0, 1)), (gen, "gen", (0, 7)), (br, "branch", (0, 1, 10))):
        for col in idcols:
            if len(tab) and np.any(tab[:, col] != np.round(tab[:, col])):
                raise MalformedRow(f"mpc.{label} column {col + 1} must hold integers")
    return GridCase(
        base_mva=base_mva,
        bus_id=bus[:, 0], bus_type=bus[:, 1], pd=bus[:, 2], qd=bus[:, 3],
        gs=bus[:, 4], bs=bus[:, 5], vm=bus[:, 7], va=bus[:, 8],
        vmax=bus[:, 11], vmin=bus[:, 12],
        f_bus=br[:, 0], t_bus=br[:, 1], r=br[:, 2], x=br[:, 3], b=br[:, 4],
        rate=br[:, 5], tap=br[:, 8], shift=br[:, 9], br_status=br[:, 10],
        gen_bus=gen[:, 0], pg=gen[:, 1], qg=gen[:, 2], qmax=gen[:, 3], qmin=gen[:, 4],
        vg=gen[:, 5], gen_status=gen[:, 7], pmax=gen[:, 8], pmin=gen[:, 9],
        cost_a=ca, cost_b=cb, cost_c=cc, name=name,
    )


def load_case(path):
    with open(path) as fh:
        text = fh.read()
    stem = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return parse_matpower_case(text, name=stem)


def builtin_case(name):
    """Load one of the bundled MATPOWER cases (``case9``, ``case30``, ``case118``)."""
    text = resources.files("powerformer.data").joinpath(f"{name}.m").read_text()
    return parse_matpower_case(text, name=name)


def _fmt(v):
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_matpower(case):
    """Serialize a :class:`GridCase` back to MATPOWER v2 text."""
    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(case.base_mva)};", ""]
    out.append("%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin")
    out.append("mpc.bus = [")
    for i in range(case.n_bus):
        row = [case.bus_id[i], case.bus_type[i], case.pd[i], case.qd[i], case.gs[i], case.bs[i], 1,
               case.vm[i], case.va[i], 0, 1, case.vmax[i], case.vmin[i]]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for i in range(case.n_gen):
        row = [case.gen_bus[i], case.pg[i], case.qg[i], case.qmax[i], case.qmin[i], case.vg[i],
               case.base_mva, case.gen_status[i], case.pmax[i], case.pmin[i]]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax",
            "mpc.branch = ["]
    for k in range(case.n_branch):
        row = [case.f_bus[k], case.t_bus[k], case.r[k], case.x[k], case.b[k], case.rate[k], case.rate[k],
               case.rate[k], case.tap[k], case.shift[k], case.br_status[k], -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.gencost = ["]
    for i in range(case.n_gen):
        row = [2, 0, 0, 3, case.cost_a[i], case.cost_b[i], case.cost_c[i]]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", ""]
    return "\n".join(out)


# -- sections ----------------------------------------------------------------


@dataclass(frozen=True)
class Section:
    """A monitored corridor: a set of branches with an active-power band.

    ``lines`` are the declared ``(from_bus, to_bus)`` pairs; ``branches`` the
    matching branch rows and ``signs`` is +1 where the declared orientation
    agrees with the branch's own from/to order and -1 where it is reversed.
    """

    id: int
    lines: tuple
    p_min: float
    p_max: float
    branches: tuple
    signs: tuple
    q_min: float | None = None
    q_max: float | None = None

    def contains_p(self, p):
        return self.p_min <= p <= self.p_max

    @property
    def midpoint(self):
        return 0.5 * (self.p_min + self.p_max)

    @property
    def half_range(self):
        return 0.5 * (self.p_max - self.p_min)


def resolve_line(case, f, t, circuit=None):
    """Find the branch row for a declared line and its orientation sign."""
    fwd = np.flatnonzero((case.f_bus == f) & (case.t_bus == t))
    rev = np.flatnonzero((case.f_bus == t) & (case.t_bus == f))
    hits = [(int(k), 1) for k in fwd] + [(int(k), -1) for k in rev]
    if not hits:
        raise UnknownBranch(f"no branch between buses {f} and {t}")
    if circuit is None:
        if len(hits) > 1:
            raise AmbiguousBranch(
                f"{len(hits)} parallel branches between buses {f} and {t}; "
                "give a third element [from, to, circuit] to pick one")
        return hits[0]
    hits.sort()
    if not 1 <= circuit <= len(hits):
        raise UnknownBranch(f"circuit {circuit} out of range for buses {f}-{t} ({len(hits)} present)")
    return hits[circuit - 1]


def make_section(case, sid, lines, p_min, p_max, q_min=None, q_max=None):
    if not lines:
        raise EmptySection(f"section {sid} declares no lines")
    if not p_min < p_max:
        raise InvertedBounds(f"section {sid}: p_min={p_min} must be below p_max={p_max}")
    branches, signs, pairs = [], [], []
    for line in lines:
        if len(line) not in (2, 3):
            raise SectionConfigError(f"section {sid}: line entry {line!r} is not [from, to] or [from, to, circuit]")
        f, t = int(line[0]), int(line[1])
        try:
            k, s = resolve_line(case, f, t, int(line[2]) if len(line) == 3 else None)
        except (UnknownBranch, AmbiguousBranch) as err:
            raise type(err)(f"section {sid}: {err}") from None
        if k in branches:
            raise SectionConfigError(f"section {sid}: line {f}-{t} listed twice")
        if case.br_status[k] == 0:
            raise UnknownBranch(f"section {sid}: branch {f}-{t} is out of service")
        branches.append(k)
        signs.append(s)
        pairs.append((f, t) if len(line) == 2 else (f, t, int(line[2])))
    return Section(int(sid), tuple(pairs), float(p_min), float(p_max), tuple(branches), tuple(signs),
                   None if q_min is None else float(q_min), None if q_max is None else float(q_max))


def load_section_config(text, case):
    """Parse a JSON section document and resolve it against ``case``.

    Format (version 1)::

        {"format": "powerformer-sections", "version": 1,
         "sections": [{"id": 7, "lines": [[33, 37], [19, 34]],
                       "p_min": 130, "p_max": 880}]}

    ``q_min``/``q_max`` are optional. A line may carry a third element, the
    1-based circuit number, to choose among parallel branches.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise SectionConfigError(f"section config is not valid JSON: {err}") from None
    if isinstance(doc, list):
        doc = {"sections": doc}
    version = doc.get("version", SECTION_FORMAT_VERSION)
    if version != SECTION_FORMAT_VERSION:
        raise SectionConfigError(f"unsupported section config version {version}")
    out, seen = [], set()
    for entry in doc.get("sections", []):
        try:
            sid = entry["id"]
            lines, p_min, p_max = entry["lines"], entry["p_min"], entry["p_max"]
        except KeyError as err:
            raise SectionConfigError(f"section entry missing field {err}") from None
        if sid in seen:
            raise SectionConfigError(f"duplicate section id {sid}")
        seen.add(sid)
        out.append(make_section(case, sid, lines, p_min, p_max, entry.get("q_min"), entry.get("q_max")))
    return out


def dump_section_config(sections):
    doc = {"format": SECTION_FORMAT, "version": SECTION_FORMAT_VERSION, "sections": []}
    for s in sections:
        entry = {"id": s.id, "lines": [list(p) for p in s.lines], "p_min": s.p_min, "p_max": s.p_max}
        if s.q_min is not None:
            entry["q_min"] = s.q_min
        if s.q_max is not None:
            entry["q_max"] = s.q_max
        doc["sections"].append(entry)
    return json.dumps(doc, indent=2)


def builtin_sections(case, name):
    text = resources.files("powerformer.data").joinpath(f"{name}.json").read_text()
    return load_section_config(text, case)


# -- graph ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PowerGraph:
    """Bus/branch topology with dense node indices ordered by ascending bus id.

    ``edge_list`` holds one ``(u, v)`` pair (``u < v``) per in-service branch,
    sorted; parallel branches give repeated pairs. ``edge_branches`` aligns
    each edge with its branch row in the source case.
    """

    n: int
    edge_list: tuple
    node_index: dict
    edge_branches: tuple = ()

    def __eq__(self, other):
        return (isinstance(other, PowerGraph) and self.n == other.n
                and self.edge_list == other.edge_list and self.node_index == other.node_index)

    def __hash__(self):
        return hash((self.n, self.edge_list))

    @property
    def m(self):
        return len(self.edge_list)

    @cached_property
    def adjacency(self):
        """Symmetric sparse adjacency (CSR); parallel edges add up."""
        if not self.edge_list:
            return sp.csr_matrix((self.n, self.n))
        u, v = np.array(self.edge_list).T
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))

    def permuted(self, perm):
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        edges = sorted((min(perm[u], perm[v]), max(perm[u], perm[v])) for u, v in self.edge_list)
        edges = tuple((int(a), int(b)) for a, b in edges)
        return PowerGraph(self.n, edges, {k: int(perm[i]) for k, i in self.node_index.items()})


def build_graph(case):
    order = np.argsort(case.bus_id, kind="stable")
    node_index = {int(case.bus_id[i]): rank for rank, i in enumerate(order)}
    keyed = []
    for k in range(case.n_branch):
        if case.br_status[k] == 0:
            continue
        a, b = node_index[int(case.f_bus[k])], node_index[int(case.t_bus[k])]
        keyed.append(((min(a, b), max(a, b)), k))
    keyed.sort(key=lambda item: item[0])
    return PowerGraph(case.n_bus, tuple(e for e, _ in keyed), node_index, tuple(k for _, k in keyed))


def random_regular_graph(n, degree, seed):
    """Random ``degree``-regular graph on ``n`` nodes (benchmark helper)."""
    import networkx as nx

    g = nx.random_regular_graph(degree, n, seed=seed)
    edges = tuple(sorted((min(u, v), max(u, v)) for u, v in g.edges()))
    return PowerGraph(n, edges, {i: i for i in range(n)})


def ceil_quarter(count):
    return int(math.ceil(0.25 * count))
