"""Directed graphs: random generation, SCCs, and separation queries.

Adjacency convention: ``adjacency[i, j] == 1`` means the edge i -> j.
Self-loops are excluded. The sigma-/d-separation checkers enumerate
simple paths and apply the blocking clauses directly; they are
verification utilities for small graphs (d <= 12), not scalable
algorithms.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass

import numpy as np

from .rng import Rng

__all__ = [
    "DirectedGraph",
    "er_sample",
    "er_sample_with_cycle_count",
    "tarjan_scc",
    "ancestors",
    "descendants",
    "sigma_separated",
    "d_separated",
    "count_simple_cycles",
]


@dataclass(frozen=True)
class DirectedGraph:
    """Immutable binary adjacency over d nodes, zero diagonal."""

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        if adj.shape[0] < 1:
            raise ValueError("graph needs at least one node")
        adj = (adj != 0).astype(np.int8)
        if np.any(np.diag(adj)):
            raise ValueError("self-loops are not allowed")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(self.adjacency)
        return list(zip(i.tolist(), j.tolist()))

    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def parents(self, i: int) -> np.ndarray:
        return np.nonzero(self.adjacency[:, i])[0]

    def children(self, i: int) -> np.ndarray:
        return np.nonzero(self.adjacency[i, :])[0]

    def has_cycle(self) -> bool:
        return any(len(c) > 1 for c in tarjan_scc(self))

    # --- serialization -------------------------------------------------
    def to_json_obj(self) -> dict:
        return {"d": self.d, "edges": [[int(i), int(j)] for i, j in self.edges()]}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "DirectedGraph":
        adj = np.zeros((obj["d"], obj["d"]), dtype=np.int8)
        for i, j in obj["edges"]:
            adj[i, j] = 1
        return cls(adj)

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj())

    @classmethod
    def from_json(cls, s: str) -> "DirectedGraph":
        return cls.from_json_obj(json.loads(s))

    def to_csv(self) -> str:
        return "\n".join(",".join(str(int(v)) for v in row) for row in self.adjacency) + "\n"

    @classmethod
    def from_csv(cls, s: str) -> "DirectedGraph":
        rows = [r for r in s.strip().splitlines() if r.strip()]
        adj = np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int8)
        return cls(adj)


def er_sample(d: int, density: float, rng: Rng) -> DirectedGraph:
    """Erdős–Rényi directed graph with expected out-degree ``density``.

    Every off-diagonal edge is present independently with probability
    density / (d - 1).
    """
    if d < 2:
        raise ValueError(f"need d >= 2, got {d}")
    if density < 0 or density > d - 1:
        raise ValueError(f"density must lie in [0, d-1], got {density}")
    p = density / (d - 1)
    adj = (rng.random((d, d)) < p).astype(np.int8)
    np.fill_diagonal(adj, 0)
    return DirectedGraph(adj)


def er_sample_with_cycle_count(
    d: int, density: float, n_cycles: int, rng: Rng, max_tries: int = 100_000
) -> DirectedGraph:
    """Rejection-sample an ER graph with exactly ``n_cycles`` simple cycles."""
    for _ in range(max_tries):
        g = er_sample(d, density, rng)
        if count_simple_cycles(g, cap=n_cycles + 1) == n_cycles:
            return g
    raise RuntimeError(
        f"no ER(d={d}, density={density}) graph with {n_cycles} cycles in {max_tries} tries"
    )


def tarjan_scc(g: DirectedGraph) -> list[frozenset[int]]:
    """Strongly connected components (iterative Tarjan).

    Components are returned sorted by their smallest node.
    """
    d = g.d
    adj = [g.children(i).tolist() for i in range(d)]
    index = [-1] * d
    lowlink = [0] * d
    on_stack = [False] * d
    stack: list[int] = []
    comps: list[frozenset[int]] = []
    counter = 0

    for root in range(d):
        if index[root] != -1:
            continue
        work = [(root, iter(adj[root]))]
        index[root] = lowlink[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if index[w] == -1:
                    index[w] = lowlink[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = True
                    work.append((w, iter(adj[w])))
                    advanced = True
                    break
                if on_stack[w]:
                    lowlink[v] = min(lowlink[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[v])
            if lowlink[v] == index[v]:
                comp = set()
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.add(w)
                    if w == v:
                        break
                comps.append(frozenset(comp))
    return sorted(comps, key=min)


def _reach_from(adj: np.ndarray, seeds: set[int]) -> set[int]:
    out = set(seeds)
    frontier = list(seeds)
    while frontier:
        v = frontier.pop()
        for w in np.nonzero(adj[v])[0]:
            if w not in out:
                out.add(int(w))
                frontier.append(int(w))
    return out


def ancestors(g: DirectedGraph, nodes) -> set[int]:
    """Nodes with a directed path (length >= 0) into ``nodes``."""
    return _reach_from(g.adjacency.T, set(int(v) for v in nodes))


def descendants(g: DirectedGraph, nodes) -> set[int]:
    return _reach_from(g.adjacency, set(int(v) for v in nodes))


def _scc_lookup(g: DirectedGraph) -> list[frozenset[int]]:
    comps = tarjan_scc(g)
    lookup: list[frozenset[int]] = [frozenset()] * g.d
    for comp in comps:
        for v in comp:
            lookup[v] = comp
    return lookup


def _simple_paths(g: DirectedGraph, a: int, b: int):
    """Yield (nodes, dirs) for every simple path between a and b.

    dirs[k] is +1 when the k-th edge is traversed head-forward
    (nodes[k] -> nodes[k+1]) and -1 otherwise. When both orientations
    of an edge pair exist, both traversals are emitted: collider status
    depends on the choice.
    """
    adj = g.adjacency
    path = [a]
    dirs: list[int] = []

    def step(v: int):
        if v == b:
            yield list(path), list(dirs)
            return
        for w in range(g.d):
            if w in path or w == v:
                continue
            for dirn, present in ((+1, adj[v, w]), (-1, adj[w, v])):
                if not present:
                    continue
                path.append(w)
                dirs.append(dirn)
                yield from step(w)
                path.pop()
                dirs.pop()

    yield from step(a)


def _path_blocked(nodes, dirs, C: set[int], an_C: set[int], scc, sigma: bool) -> bool:
    if sigma and (nodes[0] in C or nodes[-1] in C):
        return True
    for k in range(1, len(nodes) - 1):
        v = nodes[k]
        is_collider = dirs[k - 1] == +1 and dirs[k] == -1
        if is_collider:
            if v not in an_C:
                return True
        elif v in C:
            if not sigma:
                return True
            # blocked only when the edge out of v leaves v's SCC
            if dirs[k - 1] == -1 and nodes[k - 1] not in scc[v]:
                return True
            if dirs[k] == +1 and nodes[k + 1] not in scc[v]:
                return True
    return False


def _separated(g: DirectedGraph, A, B, C, sigma: bool) -> bool:
    A, B, C = set(map(int, A)), set(map(int, B)), set(map(int, C))
    if A & B or A & C or B & C:
        raise ValueError("A, B, C must be disjoint")
    an_C = ancestors(g, C) if C else set()
    scc = _scc_lookup(g) if sigma else None
    for a in A:
        for b in B:
            for nodes, dirs in _simple_paths(g, a, b):
                if not _path_blocked(nodes, dirs, C, an_C, scc, sigma):
                    return False
    return True


def sigma_separated(g: DirectedGraph, A, B, C) -> bool:
    """True iff every simple path between A and B is sigma-blocked by C."""
    return _separated(g, A, B, C, sigma=True)


def d_separated(g: DirectedGraph, A, B, C) -> bool:
    """True iff every simple path between A and B is d-blocked by C."""
    return _separated(g, A, B, C, sigma=False)


def count_simple_cycles(g: DirectedGraph, cap: int | None = None) -> int:
    """Number of simple directed cycles (Johnson's algorithm).

    Counting stops once ``cap`` is reached; callers treat the returned
    value as a lower bound in that case.
    """
    d = g.d
    adj_full = [set(g.children(i).tolist()) for i in range(d)]
    count = 0

    for s in range(d):
        # restrict to nodes >= s and the SCC containing s
        allowed = [v for v in range(d) if v >= s]
        sub = _induced(adj_full, allowed)
        comp = _scc_of(sub, s)
        if len(comp) == 0:
            continue
        adj = {v: [w for w in sub[v] if w in comp] for v in comp}

        blocked = {v: False for v in comp}
        b_map: dict[int, set[int]] = {v: set() for v in comp}
        stack: list[int] = []

        def unblock(v: int):
            pend = [v]
            while pend:
                u = pend.pop()
                if blocked[u]:
                    blocked[u] = False
                    pend.extend(b_map[u])
                    b_map[u].clear()

        def circuit(v: int) -> bool:
            nonlocal count
            found = False
            stack.append(v)
            blocked[v] = True
            for w in adj[v]:
                if w == s:
                    count += 1
                    found = True
                    if cap is not None and count >= cap:
                        stack.pop()
                        return True
                elif not blocked[w]:
                    if circuit(w):
                        found = True
                        if cap is not None and count >= cap:
                            stack.pop()
                            return True
            if found:
                unblock(v)
            else:
                for w in adj[v]:
                    b_map[w].add(v)
            stack.pop()
            return found

        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, 10 * d + 1000))
        try:
            circuit(s)
        finally:
            sys.setrecursionlimit(old_limit)
        if cap is not None and count >= cap:
            return cap
    return count


def _induced(adj_full: list[set[int]], allowed: list[int]) -> dict[int, set[int]]:
    allow = set(allowed)
    return {v: {w for w in adj_full[v] if w in allow} for v in allow}


def _scc_of(adj: dict[int, set[int]], s: int) -> frozenset[int]:
    """SCC containing s in the subgraph, empty if it is a singleton without a loop."""
    fwd = _reach_dict(adj, s)
    rev: dict[int, set[int]] = {v: set() for v in adj}
    for v, ws in adj.items():
        for w in ws:
            rev[w].add(v)
    bwd = _reach_dict(rev, s)
    comp = fwd & bwd
    if len(comp) == 1 and s not in adj[s]:
        # singleton with no self-loop: no cycle through s
        return frozenset()
    return frozenset(comp)


def _reach_dict(adj: dict[int, set[int]], s: int) -> set[int]:
    seen = {s}
    frontier = [s]
    while frontier:
        v = frontier.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                frontier.append(w)
    return seen
