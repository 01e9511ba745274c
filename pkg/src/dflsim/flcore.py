"""Desk-scale training core: local SGD plus lossy gossip aggregation.

The learning task is multinomial logistic regression with an L2 term on
synthetic Gaussian-blob data, partitioned non-iid by label groups.  The
task is honestly strongly convex and smooth, which keeps the rate
coefficients meaningful and admits a global-optimum oracle by
deterministic full-batch descent on the pooled data.

Erased packets contribute zeros with no renormalization during gossip;
re-assigning the weights of dropped senders to the receiver is exactly
what distinguishes the unsegmented baseline, so that behaviour is
confined to `run_udfl_round`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelMatrix, PacketPlan, sample_mask_batch
from .consensus import ConsensusMatrix
from .topology import DEFAULT_GROUPS, Topology

N_CLASSES = 10
FEATURE_DIM = 32
N_LABEL_GROUPS = 8
DEFAULT_LAMBDA_REG = 1e-3
_CLASS_RADIUS = 1.0
_CLASS_SIGMA = 0.7


# ------------------------------------------------------------------ data


@dataclass
class DeviceDataset:
    features: np.ndarray  # (D_n, dim)
    labels: np.ndarray    # (D_n,) int class ids
    group: int

    @property
    def size(self) -> int:
        return self.features.shape[0]


def group_labels(group: int, n_classes: int = N_CLASSES) -> list[int]:
    """Classes visible to a label group (1-based group id)."""
    g = group - 1
    return sorted({g % n_classes, (g + 1) % n_classes, (g + 4) % n_classes})


def _class_centers(rng: np.random.Generator, n_classes: int,
                   dim: int) -> np.ndarray:
    centers = rng.standard_normal((n_classes, dim))
    centers *= _CLASS_RADIUS / np.linalg.norm(centers, axis=1, keepdims=True)
    return centers


def make_fleet_data(n_devices: int, data_seed: int,
                    n_classes: int = N_CLASSES, dim: int = FEATURE_DIM,
                    test_per_class: int = 40,
                    ) -> tuple[list[DeviceDataset], np.ndarray,
                               np.ndarray, np.ndarray]:
    """Non-iid device datasets plus a pooled held-out set.

    Device n draws 20..70 samples from the classes of its label group
    (group assignment follows the default deployment row).  Returns
    (devices, p, test_features, test_labels) with p the data-size weights.
    """
    rng = np.random.default_rng([data_seed, 0xDA7A])
    centers = _class_centers(rng, n_classes, dim)

    devices: list[DeviceDataset] = []
    for n in range(n_devices):
        group = DEFAULT_GROUPS[n % len(DEFAULT_GROUPS)]
        labels_pool = group_labels(group, n_classes)
        size = int(rng.integers(20, 71))
        labels = rng.choice(labels_pool, size=size)
        feats = centers[labels] + _CLASS_SIGMA * rng.standard_normal((size, dim))
        devices.append(DeviceDataset(feats, labels.astype(int), group))

    sizes = np.array([d.size for d in devices], dtype=float)
    p = sizes / sizes.sum()

    test_labels = np.repeat(np.arange(n_classes), test_per_class)
    test_feats = centers[test_labels] + _CLASS_SIGMA * rng.standard_normal(
        (test_labels.size, dim))
    return devices, p, test_feats, test_labels.astype(int)


# ----------------------------------------------------------------- model


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_value(w_flat: np.ndarray, features: np.ndarray, labels: np.ndarray,
               lambda_reg: float, n_classes: int = N_CLASSES) -> float:
    w = w_flat.reshape(n_classes, -1)
    logits = features @ w.T
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -log_probs[np.arange(labels.size), labels].mean()
    return float(nll + 0.5 * lambda_reg * (w_flat @ w_flat))


def loss_gradient(w_flat: np.ndarray, features: np.ndarray,
                  labels: np.ndarray, lambda_reg: float,
                  n_classes: int = N_CLASSES) -> np.ndarray:
    w = w_flat.reshape(n_classes, -1)
    probs = _softmax(features @ w.T)
    probs[np.arange(labels.size), labels] -= 1.0
    grad = (probs.T @ features) / labels.size
    return grad.reshape(-1) + lambda_reg * w_flat


def accuracy(w_flat: np.ndarray, features: np.ndarray, labels: np.ndarray,
             n_classes: int = N_CLASSES) -> float:
    w = w_flat.reshape(n_classes, -1)
    pred = (features @ w.T).argmax(axis=1)
    return float((pred == labels).mean())


def pooled_gradient(w_flat: np.ndarray, devices: list[DeviceDataset],
                    p: np.ndarray, lambda_reg: float,
                    n_classes: int = N_CLASSES) -> np.ndarray:
    """Gradient of the p-weighted global objective."""
    grad = np.zeros_like(w_flat)
    for weight, dev in zip(p, devices):
        grad += weight * loss_gradient(w_flat, dev.features, dev.labels,
                                       0.0, n_classes)
    return grad + lambda_reg * w_flat


def _gradient_step_size(devices: list[DeviceDataset], p: np.ndarray,
                        lambda_reg: float) -> float:
    """1 / (upper bound on the pooled Hessian norm)."""
    dim = devices[0].features.shape[1]
    gram = np.zeros((dim, dim))
    for weight, dev in zip(p, devices):
        gram += weight * (dev.features.T @ dev.features) / dev.size
    lip = 0.5 * float(np.linalg.eigvalsh(gram)[-1]) + lambda_reg
    return 1.0 / lip


def solve_global_optimum(devices: list[DeviceDataset], p: np.ndarray,
                         lambda_reg: float, n_classes: int = N_CLASSES,
                         tol: float = 1e-10,
                         max_iters: int = 500_000) -> np.ndarray:
    """Pooled-objective minimizer by deterministic full-batch descent.

    Accelerated constant-momentum iteration with the strong-convexity
    parameter lambda_reg; stops when the gradient norm drops below tol.
    """
    dim = devices[0].features.shape[1]
    step = _gradient_step_size(devices, p, lambda_reg)
    kappa = 1.0 / (step * lambda_reg)
    momentum = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)

    w = np.zeros(n_classes * dim)
    lookahead = w.copy()
    for _ in range(max_iters):
        grad = pooled_gradient(lookahead, devices, p, lambda_reg, n_classes)
        if np.linalg.norm(grad) <= tol:
            return lookahead
        w_next = lookahead - step * grad
        lookahead = w_next + momentum * (w_next - w)
        w = w_next
    raise RuntimeError(
        f"optimum solver did not reach gradient norm {tol} in {max_iters} steps")


# ------------------------------------------------------------- fleet state


@dataclass
class FleetState:
    omega: np.ndarray  # (N, M) post-training models
    w: np.ndarray      # (N, M) lossy aggregates
    x: np.ndarray      # (N, M) perfect-channel shadow
    p: np.ndarray      # (N,) data-size weights
    t: int = 0


@dataclass
class RoundMetrics:
    t: int
    delta_omega: float
    bias_norms: np.ndarray
    accuracy: np.ndarray | None = None

    def mean_accuracy(self, p: np.ndarray) -> float:
        if self.accuracy is None:
            return math.nan
        return float(p @ self.accuracy)


@dataclass
class SmoothnessEstimate:
    lipschitz: float
    mu: float
    grad_bound: float
    sigma: np.ndarray  # per-device stochastic-gradient std bound


def initial_fleet(n_devices: int, p: np.ndarray, model_dim: int) -> FleetState:
    zeros = np.zeros((n_devices, model_dim))
    return FleetState(zeros.copy(), zeros.copy(), zeros.copy(), p, t=0)


def device_rng(master_seed: int, round_idx: int, device: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, round_idx, device])


def aggregation_rng(master_seed: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, round_idx, 0x6055])


# ------------------------------------------------------- protocol pieces


def local_train(device: DeviceDataset, omega_start: np.ndarray, eta: float,
                local_iters: int, batch_size: int, lambda_reg: float,
                rng: np.random.Generator,
                n_classes: int = N_CLASSES) -> np.ndarray:
    """I steps of mini-batch SGD on the device objective.

    Mini-batches are drawn uniformly with replacement.
    """
    if device.size == 0:
        raise ValueError("device has no data")
    if local_iters < 1 or eta <= 0:
        raise ValueError("need local_iters >= 1 and eta > 0")
    w = omega_start.copy()
    for _ in range(local_iters):
        idx = rng.integers(0, device.size, size=batch_size)
        grad = loss_gradient(w, device.features[idx], device.labels[idx],
                             lambda_reg, n_classes)
        w -= eta * grad
    return w


def init_aggregation(fleet: FleetState) -> FleetState:
    """Scale each trained model by N * p_n before gossip starts.

    Under this initialization the gossip fixed point is the p-weighted
    global model at every device; without it, the limit is the plain
    average, which differs whenever p is non-uniform.
    """
    n = fleet.omega.shape[0]
    w0 = (n * fleet.p)[:, None] * fleet.omega
    return replace(fleet, w=w0.copy(), x=w0.copy())


def lossy_gossip_step(w: np.ndarray, c: np.ndarray, succ: np.ndarray,
                      plan: PacketPlan, rng: np.random.Generator) -> np.ndarray:
    """One synchronous exchange with per-packet erasures.

    Accepts (N, M) or a replication batch (R, N, M).  The self term is
    never masked; each neighbour contribution is masked by an independent
    packet-block erasure pattern drawn at the receiver.
    """
    squeeze = w.ndim == 2
    if squeeze:
        w = w[None, :, :]
    reps, n, _ = w.shape
    out = np.zeros_like(w)
    for recv in range(n):
        acc = c[recv, recv] * w[:, recv, :]
        for send in range(n):
            if send == recv or c[recv, send] == 0.0:
                continue
            mask = sample_mask_batch(succ[recv, send], plan, reps, rng)
            acc = acc + c[recv, send] * (mask * w[:, send, :])
        out[:, recv, :] = acc
    return out[0] if squeeze else out


def simulate_lossy_aggregations(w0: np.ndarray, c: np.ndarray,
                                succ: np.ndarray, plan: PacketPlan, j: int,
                                rng: np.random.Generator) -> np.ndarray:
    w = w0
    for _ in range(j):
        w = lossy_gossip_step(w, c, succ, plan, rng)
    return w


def aggregate_once(fleet: FleetState, cmat: ConsensusMatrix,
                   chan: ChannelMatrix, plan: PacketPlan,
                   rng: np.random.Generator) -> FleetState:
    """One lossy aggregation slot; the error-free shadow advances in step."""
    w = lossy_gossip_step(fleet.w, cmat.c, chan.succ, plan, rng)
    x = cmat.c @ fleet.x
    return replace(fleet, w=w, x=x)


# ---------------------------------------------------------------- rounds


@dataclass
class TrainingSetup:
    """Static inputs shared by every round of one experiment."""

    devices: list[DeviceDataset]
    p: np.ndarray
    cmat: ConsensusMatrix
    chan: ChannelMatrix
    plan: PacketPlan
    eta: float
    local_iters: int
    local_aggs: int
    batch_size: int
    lambda_reg: float
    master_seed: int
    omega_star: np.ndarray | None = None
    test_features: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    n_classes: int = N_CLASSES
    topo: Topology | None = None
    center_device: int = 0
    cfl_lossless_downlink: bool = False
    chan_whole: ChannelMatrix | None = None  # single-packet links (U-D-FL)

    @property
    def model_dim(self) -> int:
        return self.n_classes * self.devices[0].features.shape[1]


def _train_all(fleet: FleetState, setup: TrainingSetup,
               round_idx: int) -> np.ndarray:
    omega = np.empty_like(fleet.omega)
    for n, dev in enumerate(setup.devices):
        rng = device_rng(setup.master_seed, round_idx, n)
        omega[n] = local_train(dev, fleet.omega[n], setup.eta,
                               setup.local_iters, setup.batch_size,
                               setup.lambda_reg, rng, setup.n_classes)
    return omega


def _metrics(fleet: FleetState, omega_trained: np.ndarray,
             setup: TrainingSetup, round_idx: int,
             eval_accuracy: bool) -> RoundMetrics:
    omega_bar = setup.p @ omega_trained
    if setup.omega_star is not None:
        delta = float(np.sum((omega_bar - setup.omega_star) ** 2))
    else:
        delta = math.nan
    bias = np.linalg.norm(omega_bar[None, :] - fleet.w, axis=1)
    acc = None
    if eval_accuracy and setup.test_features is not None:
        acc = np.array([accuracy(fleet.w[n], setup.test_features,
                                 setup.test_labels, setup.n_classes)
                        for n in range(fleet.w.shape[0])])
    return RoundMetrics(round_idx, delta, bias, acc)


def run_round(fleet: FleetState, setup: TrainingSetup,
              eval_accuracy: bool = True) -> tuple[FleetState, RoundMetrics]:
    """One full protocol round: train, scale-init, J lossy aggregations."""
    if setup.local_aggs < 1:
        raise ValueError("protocol requires at least one aggregation per round")
    round_idx = fleet.t + 1
    omega = _train_all(fleet, setup, round_idx)
    state = replace(fleet, omega=omega, t=round_idx)
    state = init_aggregation(state)
    agg_rng = aggregation_rng(setup.master_seed, round_idx)
    for _ in range(setup.local_aggs):
        state = aggregate_once(state, setup.cmat, setup.chan, setup.plan,
                               agg_rng)
    metrics = _metrics(state, omega, setup, round_idx, eval_accuracy)
    state = replace(state, omega=state.w.copy())
    return state, metrics


def _bfs_parents(topo: Topology, center: int) -> list[int]:
    """Parent pointer per node on shortest hop paths toward the center."""
    parents = [-1] * topo.n_devices
    seen = [False] * topo.n_devices
    seen[center] = True
    frontier = [center]
    while frontier:
        nxt: list[int] = []
        for u in frontier:
            for v in topo.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    parents[v] = u
                    nxt.append(v)
        frontier = sorted(nxt)
    if not all(seen):
        raise ValueError("topology is disconnected; no path to the center")
    return parents


def _path_to_center(parents: list[int], node: int) -> list[tuple[int, int]]:
    hops = []
    u = node
    while parents[u] != -1:
        hops.append((u, parents[u]))
        u = parents[u]
    return hops


def run_cfl_round(fleet: FleetState, setup: TrainingSetup,
                  eval_accuracy: bool = True) -> tuple[FleetState, RoundMetrics]:
    """Centralized baseline: hop-by-hop uplink, aggregate, hop-by-hop return.

    Every hop applies an independent per-packet erasure mask; erased
    blocks contribute zeros at the center.
    """
    if setup.topo is None:
        raise ValueError("centralized rounds need the topology for routing")
    round_idx = fleet.t + 1
    omega = _train_all(fleet, setup, round_idx)
    parents = _bfs_parents(setup.topo, setup.center_device)
    rng = aggregation_rng(setup.master_seed, round_idx)

    succ = setup.chan.succ
    global_model = np.zeros(setup.model_dim)
    for n in range(fleet.omega.shape[0]):
        model = omega[n].copy()
        for u, v in _path_to_center(parents, n):
            mask = sample_mask_batch(succ[v, u], setup.plan, 1, rng)[0]
            model = mask * model
        global_model += setup.p[n] * model

    received = np.empty_like(omega)
    for n in range(fleet.omega.shape[0]):
        model = global_model.copy()
        if not setup.cfl_lossless_downlink:
            for u, v in reversed(_path_to_center(parents, n)):
                mask = sample_mask_batch(succ[u, v], setup.plan, 1, rng)[0]
                model = mask * model
        received[n] = model

    state = replace(fleet, omega=omega, t=round_idx, w=received,
                    x=np.tile(setup.p @ omega, (fleet.omega.shape[0], 1)))
    metrics = _metrics(state, omega, setup, round_idx, eval_accuracy)
    state = replace(state, omega=state.w.copy())
    return state, metrics


def run_udfl_round(fleet: FleetState, setup: TrainingSetup,
                   eval_accuracy: bool = True) -> tuple[FleetState, RoundMetrics]:
    """Unsegmented baseline: whole-model packets, drop-on-error, J = 1.

    A dropped sender's consensus weight is re-assigned to the receiver's
    own model so each row still sums to one.
    """
    if setup.chan_whole is None:
        raise ValueError("unsegmented rounds need whole-model link qualities")
    round_idx = fleet.t + 1
    omega = _train_all(fleet, setup, round_idx)
    state = replace(fleet, omega=omega, t=round_idx)
    state = init_aggregation(state)
    rng = aggregation_rng(setup.master_seed, round_idx)

    c = setup.cmat.c
    succ = setup.chan_whole.succ
    n_dev = c.shape[0]
    w = np.zeros_like(state.w)
    for recv in range(n_dev):
        self_weight = c[recv, recv]
        acc = np.zeros(setup.model_dim)
        for send in range(n_dev):
            if send == recv or c[recv, send] == 0.0:
                continue
            if rng.random() < succ[recv, send]:
                acc += c[recv, send] * state.w[send]
            else:
                self_weight += c[recv, send]
        w[recv] = acc + self_weight * state.w[recv]
    x = c @ state.x
    state = replace(state, w=w, x=x)
    metrics = _metrics(state, omega, setup, round_idx, eval_accuracy)
    state = replace(state, omega=state.w.copy())
    return state, metrics


ALGORITHMS = ("dfl_unaware", "dfl_aware", "cfl", "udfl")


def run_algorithm_round(fleet: FleetState, setup: TrainingSetup,
                        algorithm: str, eval_accuracy: bool = True
                        ) -> tuple[FleetState, RoundMetrics]:
    if algorithm in ("dfl_unaware", "dfl_aware"):
        return run_round(fleet, setup, eval_accuracy)
    if algorithm == "cfl":
        return run_cfl_round(fleet, setup, eval_accuracy)
    if algorithm == "udfl":
        return run_udfl_round(fleet, setup, eval_accuracy)
    raise ValueError(f"unknown algorithm {algorithm!r}")


# ------------------------------------------------------ constant estimation


def pairwise_gradient_ratios(grad_fn, dim: int, n_pairs: int, radius: float,
                             rng: np.random.Generator) -> np.ndarray:
    """||grad(w1) - grad(w2)|| / ||w1 - w2|| over sampled parameter pairs."""
    ratios = np.empty(n_pairs)
    for k in range(n_pairs):
        w1 = radius * rng.standard_normal(dim)
        w2 = radius * rng.standard_normal(dim)
        denom = np.linalg.norm(w1 - w2)
        ratios[k] = np.linalg.norm(grad_fn(w1) - grad_fn(w2)) / denom
    return ratios


def estimate_smoothness(devices: list[DeviceDataset], p: np.ndarray,
                        lambda_reg: float, n_pairs: int,
                        rng: np.random.Generator, radius: float = 1.0,
                        batch_size: int = 20,
                        n_classes: int = N_CLASSES) -> SmoothnessEstimate:
    """Empirical (L, mu, G, sigma) for the pooled objective.

    Ratio extremes over parameter pairs drawn from a ball around the
    origin at trajectory scale; G is the largest observed stochastic
    gradient norm; sigma_n bounds the per-device minibatch-gradient std.
    """
    if n_pairs < 100:
        raise ValueError("need at least 100 parameter pairs")
    dim = devices[0].features.shape[1]
    m = n_classes * dim

    grad_fn = lambda w: pooled_gradient(w, devices, p, lambda_reg, n_classes)
    ratios = pairwise_gradient_ratios(grad_fn, m, n_pairs, radius, rng)
    per_dev_ratios = []
    for dev in devices:
        g = lambda w: loss_gradient(w, dev.features, dev.labels, lambda_reg,
                                    n_classes)
        per_dev_ratios.append(
            pairwise_gradient_ratios(g, m, max(20, n_pairs // 10), radius, rng))
    all_ratios = np.concatenate([ratios, *per_dev_ratios])

    grad_bound = 0.0
    sigma = np.zeros(len(devices))
    n_probe = 20
    for n, dev in enumerate(devices):
        worst = 0.0
        for _ in range(n_probe):
            w = radius * rng.standard_normal(m)
            full = loss_gradient(w, dev.features, dev.labels, lambda_reg,
                                 n_classes)
            sq_dev = 0.0
            for _ in range(8):
                idx = rng.integers(0, dev.size, size=batch_size)
                g = loss_gradient(w, dev.features[idx], dev.labels[idx],
                                  lambda_reg, n_classes)
                grad_bound = max(grad_bound, float(np.linalg.norm(g)))
                sq_dev += float(np.sum((g - full) ** 2))
            worst = max(worst, sq_dev / 8.0)
        sigma[n] = math.sqrt(worst)

    return SmoothnessEstimate(
        lipschitz=float(all_ratios.max()),
        mu=float(all_ratios.min()),
        grad_bound=grad_bound,
        sigma=sigma,
    )
