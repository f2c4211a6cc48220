import itertools

import numpy as np
import pytest

from scout.graphs import (
    DirectedGraph,
    ancestors,
    count_simple_cycles,
    d_separated,
    descendants,
    er_sample,
    er_sample_with_cycle_count,
    sigma_separated,
    tarjan_scc,
)
from scout.rng import Rng


def graph_from_edges(d, edges):
    adj = np.zeros((d, d), dtype=np.int8)
    for i, j in edges:
        adj[i, j] = 1
    return DirectedGraph(adj)


# --- independent oracles ----------------------------------------------------


def brute_has_cycle(adj: np.ndarray) -> bool:
    d = adj.shape[0]
    color = [0] * d

    def dfs(v):
        color[v] = 1
        for w in range(d):
            if adj[v, w]:
                if color[w] == 1 or (color[w] == 0 and dfs(w)):
                    return True
        color[v] = 2
        return False

    return any(color[v] == 0 and dfs(v) for v in range(d))


def floyd_warshall_reach(adj: np.ndarray) -> np.ndarray:
    d = adj.shape[0]
    reach = adj.astype(bool) | np.eye(d, dtype=bool)
    for k in range(d):
        reach |= np.outer(reach[:, k], reach[k, :])
    return reach


def brute_simple_paths(adj, a, b):
    """All simple paths between a and b as (nodes, edge directions)."""
    d = adj.shape[0]
    out = []

    def extend(nodes, dirs):
        v = nodes[-1]
        if v == b:
            out.append((list(nodes), list(dirs)))
            return
        for w in range(d):
            if w in nodes:
                continue
            if adj[v, w]:
                extend(nodes + [w], dirs + [1])
            if adj[w, v]:
                extend(nodes + [w], dirs + [-1])

    extend([a], [])
    return out


def brute_separated(adj, A, B, C, sigma):
    d = adj.shape[0]
    reach = floyd_warshall_reach(adj)
    an_c = {v for v in range(d) if any(reach[v, c] for c in C)}
    scc = [
        frozenset(w for w in range(d) if reach[v, w] and reach[w, v]) for v in range(d)
    ]
    for a in A:
        for b in B:
            for nodes, dirs in brute_simple_paths(adj, a, b):
                blocked = False
                if sigma and (nodes[0] in C or nodes[-1] in C):
                    blocked = True
                for k in range(1, len(nodes) - 1):
                    v = nodes[k]
                    collider = dirs[k - 1] == 1 and dirs[k] == -1
                    if collider:
                        if v not in an_c:
                            blocked = True
                    elif v in C:
                        if not sigma:
                            blocked = True
                        else:
                            if dirs[k - 1] == -1 and nodes[k - 1] not in scc[v]:
                                blocked = True
                            if dirs[k] == 1 and nodes[k + 1] not in scc[v]:
                                blocked = True
                if not blocked:
                    return False
    return True


def brute_count_cycles(adj) -> int:
    d = adj.shape[0]
    count = 0
    for length in range(2, d + 1):
        for nodes in itertools.permutations(range(d), length):
            if nodes[0] != min(nodes):
                continue
            edges = list(zip(nodes, nodes[1:] + (nodes[0],)))
            if all(adj[i, j] for i, j in edges):
                count += 1
    return count


def all_set_triples(d, require_c=False):
    for assign in itertools.product(range(4), repeat=d):
        A = [v for v in range(d) if assign[v] == 0]
        B = [v for v in range(d) if assign[v] == 1]
        C = [v for v in range(d) if assign[v] == 2]
        if A and B and (C or not require_c):
            yield A, B, C


# --- construction & sampling ---------------------------------------------------


def test_self_loops_rejected():
    with pytest.raises(ValueError):
        DirectedGraph(np.eye(2))


def test_er_mean_out_degree():
    rng = Rng(0).substream("er")
    degs = [er_sample(10, 2.0, rng).n_edges() / 10 for _ in range(1000)]
    assert 1.9 <= np.mean(degs) <= 2.1


def test_er_zero_density_is_empty():
    g = er_sample(2, 0.0, Rng(1))
    assert g.n_edges() == 0


def test_er_rejects_bad_density():
    with pytest.raises(ValueError):
        er_sample(10, -0.5, Rng(0))
    with pytest.raises(ValueError):
        er_sample(10, 9.5, Rng(0))
    with pytest.raises(ValueError):
        er_sample(1, 0.5, Rng(0))


def test_er_cycle_fraction_matches_brute_force():
    rng = Rng(3).substream("cycles")
    graphs = [er_sample(10, 2.0, rng) for _ in range(200)]
    ours = [g.has_cycle() for g in graphs]
    brute = [brute_has_cycle(g.adjacency) for g in graphs]
    assert ours == brute
    assert 0.5 < np.mean(ours) <= 1.0  # density 2 graphs are usually cyclic


def test_er_with_cycle_count():
    rng = Rng(5).substream("k-cycles")
    g = er_sample_with_cycle_count(6, 1.5, 2, rng)
    assert count_simple_cycles(g) == 2


# --- sccs ------------------------------------------------------------------------


def test_scc_chain_is_singletons():
    g = graph_from_edges(3, [(0, 1), (1, 2)])
    assert tarjan_scc(g) == [frozenset({0}), frozenset({1}), frozenset({2})]


def test_scc_two_cycle_plus_isolated():
    g = graph_from_edges(3, [(1, 2), (2, 1)])
    assert tarjan_scc(g) == [frozenset({0}), frozenset({1, 2})]


def test_scc_matches_reachability_intersection():
    rng = Rng(7).substream("scc")
    for _ in range(50):
        g = er_sample(10, 2.5, rng)
        reach = floyd_warshall_reach(g.adjacency)
        comps = tarjan_scc(g)
        lookup = {}
        for comp in comps:
            for v in comp:
                lookup[v] = comp
        for v in range(10):
            expected = frozenset(
                w for w in range(10) if reach[v, w] and reach[w, v]
            )
            assert lookup[v] == expected


def test_ancestors_descendants_reflexive():
    g = graph_from_edges(3, [(0, 1), (1, 2)])
    assert ancestors(g, [2]) == {0, 1, 2}
    assert descendants(g, [0]) == {0, 1, 2}
    assert ancestors(g, [0]) == {0}


# --- separation ---------------------------------------------------------------------


def test_chain_sigma_separation():
    g = graph_from_edges(3, [(0, 1), (1, 2)])
    assert sigma_separated(g, [0], [2], [1])
    assert d_separated(g, [0], [2], [1])
    assert not sigma_separated(g, [0], [2], [])


def test_collider():
    g = graph_from_edges(3, [(0, 2), (1, 2)])
    assert d_separated(g, [0], [1], [])
    assert not d_separated(g, [0], [1], [2])
    assert sigma_separated(g, [0], [1], [])
    assert not sigma_separated(g, [0], [1], [2])


def test_fork_not_separated():
    g = graph_from_edges(3, [(0, 1), (0, 2)])
    assert not d_separated(g, [1], [2], [])
    assert d_separated(g, [1], [2], [0])


def test_two_cycle_figure_graph_matches_brute_force():
    # nodes 0,1 exogenous; 2 <-> 3 two-cycle; 0 -> 2, 1 -> 3
    g = graph_from_edges(4, [(0, 2), (1, 3), (2, 3), (3, 2)])
    for A, B, C in all_set_triples(4):
        assert sigma_separated(g, A, B, C) == brute_separated(
            g.adjacency, A, B, C, sigma=True
        )
        assert d_separated(g, A, B, C) == brute_separated(
            g.adjacency, A, B, C, sigma=False
        )


def test_overlapping_sets_rejected():
    g = graph_from_edges(3, [(0, 1)])
    with pytest.raises(ValueError):
        sigma_separated(g, [0], [0], [1])
    with pytest.raises(ValueError):
        d_separated(g, [0], [1], [1])


def _all_dags(d):
    pairs = [(i, j) for i in range(d) for j in range(d) if i != j]
    for bits in range(2 ** len(pairs)):
        adj = np.zeros((d, d), dtype=np.int8)
        for idx, (i, j) in enumerate(pairs):
            if bits >> idx & 1:
                adj[i, j] = 1
        if not brute_has_cycle(adj):
            yield DirectedGraph(adj)


@pytest.mark.slow
def test_sigma_equals_d_on_all_dags_up_to_four_nodes():
    for d in (3, 4):
        for g in _all_dags(d):
            for A, B, C in all_set_triples(d):
                assert sigma_separated(g, A, B, C) == d_separated(g, A, B, C)


def test_sigma_symmetric_in_a_and_b():
    rng = Rng(13).substream("sym")
    for _ in range(30):
        g = er_sample(5, 1.5, rng)
        for A, B, C in [([0], [1], [2]), ([0, 2], [3], [4]), ([1], [4], [])]:
            assert sigma_separated(g, A, B, C) == sigma_separated(g, B, A, C)


def test_adding_edge_never_creates_separation():
    rng = Rng(17).substream("mono")
    for _ in range(20):
        g = er_sample(4, 1.0, rng)
        adj = g.adjacency.copy()
        free = [(i, j) for i in range(4) for j in range(4) if i != j and not adj[i, j]]
        if not free:
            continue
        i, j = free[int(rng.integers(0, len(free)))]
        adj2 = adj.copy()
        adj2[i, j] = 1
        g2 = DirectedGraph(adj2)
        for A, B, C in all_set_triples(4):
            if sigma_separated(g2, A, B, C):
                assert sigma_separated(g, A, B, C)
            if d_separated(g2, A, B, C):
                assert d_separated(g, A, B, C)


# --- cycle counting -----------------------------------------------------------------


def test_cycle_count_matches_brute_force():
    rng = Rng(23).substream("count")
    for _ in range(40):
        g = er_sample(6, 2.0, rng)
        assert count_simple_cycles(g) == brute_count_cycles(g.adjacency)


def test_cycle_count_cap():
    g = graph_from_edges(4, [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)])
    assert count_simple_cycles(g) == 3
    assert count_simple_cycles(g, cap=2) == 2


# --- serialization --------------------------------------------------------------------


def test_json_round_trip():
    g = er_sample(8, 2.0, Rng(29))
    assert DirectedGraph.from_json(g.to_json()).adjacency.tolist() == g.adjacency.tolist()


def test_csv_round_trip():
    g = er_sample(5, 1.5, Rng(31))
    assert DirectedGraph.from_csv(g.to_csv()).adjacency.tolist() == g.adjacency.tolist()
