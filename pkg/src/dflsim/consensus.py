"""Mixing-matrix construction and spectral utilities for gossip averaging.

Two designs are supported: the channel-unaware matrix with a single weight
alpha on every edge, and the channel-aware matrix that inflates each edge
weight by 1/(success probability) so the expected mixing matrix stays doubly
stochastic under erasures.  Negative diagonal entries are permitted: double
stochasticity, not nonnegativity, is what the consensus limit requires.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelMatrix, DegenerateLinkError
from .topology import Topology

MODE_UNAWARE = "unaware"
MODE_AWARE = "aware"


class SpectralConvergenceError(RuntimeError):
    """The singular value iteration failed to converge."""


@dataclass
class ConsensusMatrix:
    c: np.ndarray
    mode: str
    alpha: float

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def effective(self, t: ChannelMatrix | None = None) -> np.ndarray:
        """Expected mixing matrix: C for perfect links, C*T elementwise else."""
        if t is None:
            return self.c
        return self.c * t.succ


def laplacian(topo: Topology) -> np.ndarray:
    a = topo.adjacency()
    return np.diag(a.sum(axis=1)) - a


def laplacian_eigenvalues(topo: Topology) -> np.ndarray:
    """Ascending eigenvalues of the unweighted graph Laplacian."""
    return np.linalg.eigvalsh(laplacian(topo))


def optimal_alpha(topo: Topology) -> float:
    """Edge weight minimizing || C - ones/N || for C = I - alpha*L.

    Equals 2 / (lambda_max + lambda_2) of the Laplacian; requires a
    connected graph (lambda_2 > 0).
    """
    if topo.n_devices == 1:
        return 1.0
    lam = laplacian_eigenvalues(topo)
    lam2, lam_max = lam[1], lam[-1]
    if lam2 <= 1e-12:
        raise ValueError("graph is disconnected (lambda_2 = 0): no consensus")
    return 2.0 / (lam_max + lam2)


def optimal_alpha_search(topo: Topology, samples: int = 200) -> float:
    """Golden-section fallback minimizing the consensus gap over alpha.

    Searches (0, 1/d_max]; used for regression checks against the
    eigenvalue closed form, not in the main pipeline.
    """
    if topo.n_devices == 1:
        return 1.0
    d_max = int(topo.degrees.max())
    lo, hi = 1e-9, 1.0 / d_max

    def gap(a: float) -> float:
        return consensus_gap(build_unaware(topo, a).c)

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = gap(x1), gap(x2)
    for _ in range(samples):
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = gap(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = gap(x2)
    return 0.5 * (lo + hi)


def _alpha_stability_bound(topo: Topology) -> float:
    if topo.n_devices == 1:
        return np.inf
    lam = laplacian_eigenvalues(topo)
    return 2.0 / lam[-1]


def build_unaware(topo: Topology, alpha: float) -> ConsensusMatrix:
    """Weight alpha on edges, 1 - d_n*alpha on the diagonal, 0 elsewhere."""
    bound = _alpha_stability_bound(topo)
    if not 0.0 < alpha < bound:
        raise ValueError(
            f"alpha={alpha} outside stability range (0, {bound})")
    n = topo.n_devices
    c = np.zeros((n, n))
    for a, b in topo.edges:
        c[a, b] = c[b, a] = alpha
    np.fill_diagonal(c, 1.0 - topo.degrees * alpha)
    return ConsensusMatrix(c=c, mode=MODE_UNAWARE, alpha=alpha)


def build_aware(topo: Topology, t: ChannelMatrix, alpha: float) -> ConsensusMatrix:
    """Edge weights alpha / (success probability); C*T is doubly stochastic.

    Because T is 1 on the diagonal and the inflation cancels on edges, C*T
    reproduces the unaware matrix built with the same alpha, so the same
    optimal alpha applies.
    """
    bound = _alpha_stability_bound(topo)
    if not 0.0 < alpha < bound:
        raise ValueError(
            f"alpha={alpha} outside stability range (0, {bound})")
    n = topo.n_devices
    c = np.zeros((n, n))
    for a, b in topo.edges:
        s = t.succ[a, b]
        if s <= 0.0:
            raise DegenerateLinkError(
                f"edge ({a},{b}) has zero success probability")
        c[a, b] = c[b, a] = alpha / s
    np.fill_diagonal(c, 1.0 - topo.degrees * alpha)
    return ConsensusMatrix(c=c, mode=MODE_AWARE, alpha=alpha)


def matrix_power(a: np.ndarray, j: int) -> np.ndarray:
    """j-th matrix power (binary exponentiation), j >= 0."""
    if j < 0:
        raise ValueError("power must be nonnegative")
    return np.linalg.matrix_power(a, j)


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value.

    Computed by LAPACK SVD: bespoke power iteration on A^T A stalls past
    its iteration budget whenever the two leading singular values nearly
    coincide, which the matrices C - C*T routinely produce.  Failures of
    the LAPACK iteration surface as SpectralConvergenceError.
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    if not np.any(a):
        return 0.0
    try:
        return float(np.linalg.svd(a, compute_uv=False)[0])
    except np.linalg.LinAlgError as exc:
        raise SpectralConvergenceError(f"SVD did not converge: {exc}") from exc


def averaging_matrix(n: int) -> np.ndarray:
    """The rank-one uniform averaging matrix ones(n, n) / n."""
    return np.full((n, n), 1.0 / n)


def consensus_gap(c: np.ndarray) -> float:
    """Spectral distance of a mixing matrix from uniform averaging."""
    return spectral_norm(c - averaging_matrix(c.shape[0]))
