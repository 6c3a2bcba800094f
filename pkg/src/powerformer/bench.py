"""Forward-pass wall time as a function of graph size."""

from __future__ import annotations

import time

import numpy as np

from .grid import random_regular_graph
from .nn import PowerformerConfig, QNetwork

DEFAULT_SIZES = (50, 100, 200, 400, 800)


def forward_time(n, kind="powerformer", d=64, degree=3, batch=1, repeats=5, seed=0):
    """Best-of-``repeats`` forward time (seconds) on a random ``degree``-regular graph.

    The section encoding is sized like a real grid's, ``4 m`` with ``m`` the
    edge count, so the query encoder grows with the graph as well.
    """
    graph = random_regular_graph(n, degree, seed)
    zdim = 4 * graph.m
    net = QNetwork(PowerformerConfig(n_actions=8, zdim=zdim, n_nodes=n, kind=kind, d=d, seed=seed))
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((batch, n, 4))
    z = rng.standard_normal((batch, zdim))
    net.forward(H, z, graph)  # warm the operator cache
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        net.forward(H, z, graph)
        best = min(best, time.perf_counter() - t)
    return best


def fit_power_law(ns, times):
    """Least-squares ``(exponent, prefactor)`` of ``t = c n^e`` in log-log space."""
    e, logc = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)
    return float(e), float(np.exp(logc))


def scaling_run(sizes=DEFAULT_SIZES, **kwargs):
    times = [forward_time(n, **kwargs) for n in sizes]
    exponent, prefactor = fit_power_law(sizes, times)
    return list(sizes), times, exponent, prefactor
