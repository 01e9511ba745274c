"""Device graph generation: coordinates, connectivity, degrees, scaling.

Graphs are undirected, connected, without self-loops.  When built from a
target edge density, the generator prefers the shortest pairwise links
(geometric-graph flavour) and repairs connectivity by swapping the longest
chosen links for the shortest bridging ones, so the result is deterministic
given coordinates and seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Default 12-device deployment (metres) and the non-iid label group each
# device draws from.  Device IDs are 1-based in configs, 0-based internally.
DEFAULT_COORDS: list[tuple[float, float]] = [
    (2196.0, 1351.0),
    (3637.0, 3127.0),
    (2642.0, 284.0),
    (2884.0, 848.0),
    (5254.0, 596.0),
    (1730.0, 1923.0),
    (3572.0, 2668.0),
    (4546.0, 5326.0),
    (4328.0, 4001.0),
    (2534.0, 5171.0),
    (173.0, 575.0),
    (2050.0, 3676.0),
]
DEFAULT_GROUPS: list[int] = [1, 2, 3, 4, 5, 6, 7, 8, 2, 8, 4, 6]


class InfeasibleDensityError(ValueError):
    """Requested edge count cannot form a connected graph."""


def round_half_up(x: float) -> int:
    """Round with ties away from zero (0.5 -> 1), not banker's rounding."""
    return int(math.floor(x + 0.5))


@dataclass
class Topology:
    """Immutable-by-convention device graph.

    coords are (x, y) in metres; edges are unordered 0-based index pairs
    stored as sorted tuples.
    """

    n_devices: int
    coords: list[tuple[float, float]]
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)
    density: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.n_devices < 1:
            raise ValueError(f"n_devices must be >= 1, got {self.n_devices}")
        if len(self.coords) != self.n_devices:
            raise ValueError("coords length must equal n_devices")
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop ({a},{a}) not allowed")
            if not (0 <= a < b < self.n_devices):
                raise ValueError(f"edge ({a},{b}) out of range or unordered")

    @property
    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n_devices, dtype=int)
        for a, b in self.edges:
            d[a] += 1
            d[b] += 1
        return d

    def neighbors(self, n: int) -> list[int]:
        out = [b if a == n else a for a, b in self.edges if n in (a, b)]
        return sorted(out)

    def distance(self, a: int, b: int) -> float:
        (xa, ya), (xb, yb) = self.coords[a], self.coords[b]
        return math.hypot(xa - xb, ya - yb)

    def distance_matrix(self) -> np.ndarray:
        pts = np.asarray(self.coords)
        diff = pts[:, None, :] - pts[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=2))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_devices, self.n_devices))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a


def from_table(n: int) -> Topology:
    """First n devices of the default deployment, edges unset."""
    if not 1 <= n <= len(DEFAULT_COORDS):
        raise ValueError(f"n must be in [1, {len(DEFAULT_COORDS)}], got {n}")
    return Topology(n_devices=n, coords=list(DEFAULT_COORDS[:n]))


def _is_connected(n: int, edges: set[tuple[int, int]]) -> bool:
    if n == 1:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(v)
    return count == n


def is_connected(topo: Topology) -> bool:
    """BFS connectivity check over the topology's edge set."""
    return _is_connected(topo.n_devices, set(topo.edges))


def _components(n: int, edges: set[tuple[int, int]]) -> list[int]:
    """Component label per vertex (union-find)."""
    parent = list(range(n))

    def find(u: int) -> int:
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return [find(u) for u in range(n)]


def build_edges_by_density(topo: Topology, rho: float,
                           rng: np.random.Generator) -> Topology:
    """Select round(rho*N(N-1)/2) edges, shortest pairs first, connected.

    Ties in pairwise distance are broken by a seeded shuffle.  If the
    shortest selection is disconnected, the longest chosen non-bridge edges
    are swapped for the shortest edges that bridge components.
    """
    n = topo.n_devices
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {rho}")
    target = round_half_up(rho * n * (n - 1) / 2.0)
    if n == 1:
        if target != 0:
            raise InfeasibleDensityError("single device admits no edges")
        return Topology(n, list(topo.coords), frozenset(), rho, topo.scale)
    if target < n - 1:
        raise InfeasibleDensityError(
            f"{target} edges cannot connect {n} devices (need >= {n - 1})")

    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    pairs.sort(key=lambda e: topo.distance(*e))

    chosen = set(pairs[:target])
    rest = pairs[target:]

    while not _is_connected(n, chosen):
        comp = _components(n, chosen)
        bridge = next(e for e in rest if comp[e[0]] != comp[e[1]])
        rest.remove(bridge)
        chosen.add(bridge)
        # Drop the longest chosen edge whose removal keeps connectivity
        # structure intact (a cycle edge always exists: |chosen| > n - #comp).
        for victim in sorted(chosen, key=lambda e: topo.distance(*e),
                             reverse=True):
            trial = set(chosen)
            trial.remove(victim)
            if len(_set_components(n, trial)) == len(_set_components(n, chosen)):
                chosen.remove(victim)
                rest.append(victim)
                break

    return Topology(n, list(topo.coords), frozenset(chosen), rho, topo.scale)


def _set_components(n: int, edges: set[tuple[int, int]]) -> set[int]:
    return set(_components(n, edges))


def scale(topo: Topology, kappa: float) -> Topology:
    """Multiply all coordinates by kappa; edges are unchanged."""
    if kappa <= 0:
        raise ValueError(f"scale factor must be positive, got {kappa}")
    coords = [(x * kappa, y * kappa) for x, y in topo.coords]
    return Topology(topo.n_devices, coords, topo.edges, topo.density,
                    topo.scale * kappa)


def export_adjacency_csv(topo: Topology) -> str:
    """Adjacency list as CSV text: src,dst,distance_m (0-based ids)."""
    lines = ["src,dst,distance_m"]
    for a, b in sorted(topo.edges):
        lines.append(f"{a},{b},{topo.distance(a, b)!r}")
    return "\n".join(lines) + "\n"
