"""Monte Carlo oracles: simulation vs the closed-form moment matrices.

The aggregation simulator is the same routine the protocol uses, so these
checks tie the analysis (expected bias M1 W0, per-entry variance
M2 (W0 o W0), one-round bound) to the code that actually runs.  Every
comparison is seeded and reports (seed, replication count, max z, max
relative error) so regressions are reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis, channel, consensus, flcore, topology
from .channel import ChannelMatrix, LinkBudget, PacketPlan
from .flcore import TrainingSetup, simulate_lossy_aggregations

# Oracle problems stay small: the packet-block structure is exercised
# while replication counts remain cheap.
ORACLE_MODEL_DIM = 64
ORACLE_ELEMS_PER_PACKET = 8

_EXACT_TOL = 1e-9


@dataclass
class RandomInstance:
    seed: int
    topo: topology.Topology
    chan: ChannelMatrix
    plan: PacketPlan
    alpha: float
    cmat_unaware: consensus.ConsensusMatrix
    cmat_aware: consensus.ConsensusMatrix | None

    @property
    def tau_eps(self) -> float:
        return self.chan.mean_edge_per(self.topo)


def random_instance(seed: int, n_min: int = 3, n_max: int = 20,
                    plan: PacketPlan | None = None) -> RandomInstance:
    """Random connected deployment with physically derived link qualities.

    Coordinates are uniform over a 6 x 6 km square, density and scale are
    drawn so per-link packet error rates span the interesting range.
    """
    rng = np.random.default_rng([seed, 0x1257A7CE])
    n = int(rng.integers(n_min, n_max + 1))
    coords = [(float(x), float(y)) for x, y in rng.uniform(0.0, 6000.0, (n, 2))]
    topo = topology.Topology(n_devices=n, coords=coords)
    rho = float(rng.uniform(0.35, 1.0))
    topo = topology.build_edges_by_density(topo, rho, rng)
    kappa = float(math.exp(rng.uniform(math.log(0.5), math.log(1.5))))
    topo = topology.scale(topo, kappa)

    if plan is None:
        plan = PacketPlan(ORACLE_MODEL_DIM, ORACLE_ELEMS_PER_PACKET)
    chan = channel.build_channel_matrix(topo, LinkBudget(), plan)
    alpha = consensus.optimal_alpha(topo)
    unaware = consensus.build_unaware(topo, alpha)
    aware = None
    if all(chan.succ[a, b] > 0.0 for a, b in topo.edges):
        aware = consensus.build_aware(topo, chan, alpha)
    return RandomInstance(seed, topo, chan, plan, alpha, unaware, aware)


def block_constant_state(n_devices: int, plan: PacketPlan,
                         rng: np.random.Generator) -> np.ndarray:
    """Initial model matrix constant within each packet block.

    Keeps the number of statistically distinct entries equal to
    n_devices * n_packets, which makes familywise z gates meaningful.
    """
    blocks = rng.normal(0.0, 1.0, size=(n_devices, plan.n_packets))
    return np.repeat(blocks, plan.elems_per_packet, axis=1)[:, : plan.model_dim]


# ------------------------------------------------------------ expectation


@dataclass
class ExpectationBiasReport:
    j: int
    replications: int
    seed: int
    max_abs_z: float
    exact_mismatch: float  # worst |emp - pred| on zero-variance entries
    passed: bool
    empirical: np.ndarray = field(repr=False, default=None)
    predicted: np.ndarray = field(repr=False, default=None)
    z_scores: np.ndarray = field(repr=False, default=None)


def mc_expectation_bias(c: np.ndarray, succ: np.ndarray, w0: np.ndarray,
                        plan: PacketPlan, j: int, replications: int,
                        seed: int, z_gate: float = 4.0) -> ExpectationBiasReport:
    """Empirical mean bias over replications against M1 W0.

    z-scores use the closed-form per-entry variance (M2 applied to the
    squared initial models) rather than the sample variance, so a wrong
    M2 also surfaces here as inflated z values.
    """
    if replications < 1_000:
        raise ValueError("need at least 1000 replications")
    rng = np.random.default_rng([seed, 0xB1A5])
    n = c.shape[0]
    batch = np.broadcast_to(w0, (replications, *w0.shape)).copy()
    w_final = simulate_lossy_aggregations(batch, c, succ, plan, j, rng)

    target = consensus.averaging_matrix(n) @ w0
    emp_bias = target[None, :, :] - w_final
    emp_mean = emp_bias.mean(axis=0)

    m1 = analysis.compute_m1(c, succ, j)
    predicted = m1 @ w0
    var = analysis.compute_m2(c, succ, j) @ (w0 * w0)
    se = np.sqrt(np.maximum(var, 0.0) / replications)

    resolved = se > 0.0
    z = np.zeros_like(emp_mean)
    z[resolved] = (emp_mean[resolved] - predicted[resolved]) / se[resolved]
    scale = max(float(np.abs(w0).max()), 1.0)
    exact_mismatch = float(np.abs(emp_mean - predicted)[~resolved].max()) \
        if (~resolved).any() else 0.0

    max_z = float(np.abs(z).max()) if resolved.any() else 0.0
    passed = max_z < z_gate and exact_mismatch < _EXACT_TOL * scale
    return ExpectationBiasReport(j, replications, seed, max_z, exact_mismatch,
                                 passed, emp_mean, predicted, z)


# --------------------------------------------------------------- variance


@dataclass
class VarianceReport:
    j: int
    replications: int
    seed: int
    literal_indexing: bool
    max_rel_error: float
    resolved_entries: int
    passed: bool
    empirical: np.ndarray = field(repr=False, default=None)
    predicted: np.ndarray = field(repr=False, default=None)


def mc_variance(c: np.ndarray, succ: np.ndarray, w0: np.ndarray,
                plan: PacketPlan, j: int, replications: int, seed: int,
                rel_gate: float = 0.05,
                literal_indexing: bool = False) -> VarianceReport:
    """Empirical per-entry variance against the variance-transfer matrix.

    Relative error is reported on entries whose prediction exceeds
    1e-8 of the largest predicted variance.  Setting literal_indexing
    swaps in the printed-index variant, which demonstrably disagrees
    with simulation for J >= 2.
    """
    if replications < 10_000:
        raise ValueError("need at least 10000 replications")
    rng = np.random.default_rng([seed, 0x7A12])
    batch = np.broadcast_to(w0, (replications, *w0.shape)).copy()
    w_final = simulate_lossy_aggregations(batch, c, succ, plan, j, rng)
    emp_var = w_final.var(axis=0, ddof=1)

    if literal_indexing:
        m2 = analysis.compute_m2_literal(c, succ, j)
    else:
        m2 = analysis.compute_m2(c, succ, j)
    predicted = m2 @ (w0 * w0)

    floor = 1e-8 * max(float(predicted.max()), 1e-300)
    resolved = predicted > floor
    if resolved.any():
        rel = np.abs(emp_var[resolved] - predicted[resolved]) / predicted[resolved]
        max_rel = float(rel.max())
    else:
        max_rel = 0.0
    passed = max_rel <= rel_gate
    return VarianceReport(j, replications, seed, literal_indexing, max_rel,
                          int(resolved.sum()), passed, emp_var, predicted)


# ----------------------------------------------------------- bound check


@dataclass
class OneRoundBoundReport:
    replications: int
    seed: int
    zeta1: float
    diverging: bool
    empirical: float
    bound: float
    slack_ratio: float
    passed: bool


def mc_one_round_bound(setup: TrainingSetup,
                       est: flcore.SmoothnessEstimate,
                       replications: int, seed: int,
                       warmup_rounds: int = 2) -> OneRoundBoundReport:
    """Empirical one-round distance against the closed-form bound.

    The state after the previous round's local training is fixed; the
    replicated randomness is that round's J lossy aggregations plus the
    next round's mini-batch draws.  A slack ratio >= 1 means the bound
    held.
    """
    if setup.topo is None:
        raise ValueError("bound check needs the topology for the average PER")
    if setup.omega_star is None:
        raise ValueError("bound check needs the global optimum oracle")
    tau = setup.chan.mean_edge_per(setup.topo)
    zetas = analysis.compute_zetas(est.mu, est.lipschitz, setup.eta,
                                   setup.local_iters, tau)
    diverging = zetas.zeta1 >= 1.0

    n_dev = len(setup.devices)
    fleet = flcore.initial_fleet(n_dev, setup.p, setup.model_dim)
    for _ in range(warmup_rounds):
        fleet, _ = flcore.run_round(fleet, setup, eval_accuracy=False)

    # Fix the training output of round t-1.
    round_prev = fleet.t + 1
    omega_prev = flcore._train_all(fleet, setup, round_prev)
    omega_bar_prev = setup.p @ omega_prev
    delta_prev = float(np.sum((omega_bar_prev - setup.omega_star) ** 2))
    w0 = (n_dev * setup.p)[:, None] * omega_prev

    mode = setup.cmat.mode
    j = setup.local_aggs
    c, succ = setup.cmat.c, setup.chan.succ
    m1 = analysis.compute_m1(c, succ, j)
    m2 = analysis.compute_m2(c, succ, j)
    m3 = analysis.compute_m3(c, succ, j, mode)
    m4 = analysis.compute_m4(c, succ, j, mode)
    p_max = float(setup.p.max())
    phi_val = analysis.phi(m1, m2, m3, m4, zetas, p_max)
    w0_norm_sq = consensus.spectral_norm(w0) ** 2
    bound = (zetas.zeta1 * delta_prev
             + zetas.zeta2 * est.grad_bound ** 2
             + zetas.zeta6 * setup.eta * float((setup.p ** 2) @ (est.sigma ** 2))
             + zetas.zeta5 * phi_val * p_max * w0_norm_sq)

    rng = np.random.default_rng([seed, 0xB0D])
    deltas = np.empty(replications)
    round_next = round_prev + 1
    for r in range(replications):
        w_j = simulate_lossy_aggregations(w0, c, succ, setup.plan, j, rng)
        omega_next = np.empty_like(w_j)
        for n_idx, dev in enumerate(setup.devices):
            dev_rng = np.random.default_rng([seed, r, round_next, n_idx])
            omega_next[n_idx] = flcore.local_train(
                dev, w_j[n_idx], setup.eta, setup.local_iters,
                setup.batch_size, setup.lambda_reg, dev_rng, setup.n_classes)
        omega_bar = setup.p @ omega_next
        deltas[r] = float(np.sum((omega_bar - setup.omega_star) ** 2))

    empirical = float(deltas.mean())
    slack = bound / empirical if empirical > 0 else math.inf
    return OneRoundBoundReport(replications, seed, zetas.zeta1, diverging,
                               empirical, bound, slack, slack >= 1.0)
