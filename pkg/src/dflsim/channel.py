"""Link budget -> per-link packet error rates -> success-probability matrix.

Path loss uses the log-distance form 20*log10(fc) + 20*log10(d) + 32.4 with
fc in MHz and d in km; the constant 32.4 corresponds to that unit pair.
Models are float32-serialized, split into packets of `elems_per_packet`
elements, and a whole packet is either received intact or dropped (CRC
semantics), which the erasure masks reproduce block-wise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .topology import Topology, round_half_up

BITS_PER_ELEMENT = 32
MIN_DISTANCE_M = 1.0  # clamp to avoid log(0) for co-located devices


class DegenerateLinkError(ValueError):
    """A required link has zero success probability."""


@dataclass(frozen=True)
class LinkBudget:
    fc_mhz: float = 2500.0
    bandwidth_hz: float = 30e6
    tx_power_dbm: float = 20.0
    noise_psd_dbm_hz: float = -174.0
    modulation: str = "bpsk"

    def __post_init__(self) -> None:
        if self.fc_mhz <= 0:
            raise ValueError("carrier frequency must be positive")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if self.modulation.lower() not in ("bpsk", "qpsk"):
            raise ValueError(f"unsupported modulation {self.modulation!r}")


@dataclass(frozen=True)
class PacketPlan:
    """Segmentation of an M-element float32 model into fixed-size packets."""

    model_dim: int
    elems_per_packet: int

    def __post_init__(self) -> None:
        if self.model_dim < 1:
            raise ValueError("model_dim must be >= 1")
        if self.elems_per_packet < 1:
            raise ValueError("elems_per_packet must be >= 1")

    @property
    def n_packets(self) -> int:
        return -(-self.model_dim // self.elems_per_packet)

    @property
    def bits_per_packet(self) -> int:
        return BITS_PER_ELEMENT * self.elems_per_packet

    @classmethod
    def from_packet_count(cls, model_dim: int, n_packets: int) -> "PacketPlan":
        """Plan targeting roughly n_packets packets.

        elems_per_packet = round(model_dim / n_packets); the realized packet
        count is then ceil(model_dim / elems_per_packet), which can differ
        from the request by a packet when the division is not exact.
        """
        if n_packets < 1:
            raise ValueError("n_packets must be >= 1")
        lp = max(1, round_half_up(model_dim / n_packets))
        return cls(model_dim=model_dim, elems_per_packet=lp)


@dataclass
class ChannelMatrix:
    """N x N per-link success probabilities (1 - PER).

    Diagonal is exactly 1 (a device never transmits to itself); non-edge
    entries are 0 and irrelevant because the consensus matrix masks them.
    """

    succ: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.succ, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError("success matrix must be square")
        self.succ = s

    @property
    def n(self) -> int:
        return self.succ.shape[0]

    def mean_edge_per(self, topo: Topology) -> float:
        """Average PER over the topology's edges (0 if no edges)."""
        if not topo.edges:
            return 0.0
        pers = [1.0 - self.succ[a, b] for a, b in topo.edges]
        return float(np.mean(pers))


def path_loss_db(distance_m: float, fc_mhz: float) -> float:
    """Log-distance path loss in dB (fc in MHz, distance in metres)."""
    if distance_m <= 0:
        raise ValueError(f"distance must be positive, got {distance_m}")
    return 20.0 * math.log10(fc_mhz) + 20.0 * math.log10(distance_m / 1000.0) + 32.4


def snr_linear(budget: LinkBudget, pl_db: float) -> float:
    """Received SNR as a linear ratio for the given path loss."""
    noise_dbm = budget.noise_psd_dbm_hz + 10.0 * math.log10(budget.bandwidth_hz)
    snr_db = budget.tx_power_dbm - pl_db - noise_dbm
    return 10.0 ** (snr_db / 10.0)

def ber(snr: float, modulation: str = "bpsk") -> float:
    """Bit error probability Q(sqrt(2*snr)) on the AWGN channel.

    Gray-coded QPSK has the same per-bit error rate as BPSK, so both
    modulations share the expression.
    """
    if snr < 0:
        raise ValueError("snr must be nonnegative")
    if modulation.lower() not in ("bpsk", "qpsk"):
        raise ValueError(f"unsupported modulation {modulation!r}")
    # Q(sqrt(2*g)) = erfc(sqrt(g)) / 2
    return 0.5 * math.erfc(math.sqrt(snr))


def per(bit_error_rate: float, elems_per_packet: int) -> float:
    """Packet error probability for 32*elems_per_packet bits.

    Evaluated in log space so tiny bit error rates do not cancel out.
    """
    if not 0.0 <= bit_error_rate <= 1.0:
        raise ValueError("bit error rate must be in [0, 1]")
    if elems_per_packet < 1:
        raise ValueError("elems_per_packet must be >= 1")
    if bit_error_rate == 0.0:
        return 0.0
    if bit_error_rate == 1.0:
        return 1.0
    bits = BITS_PER_ELEMENT * elems_per_packet
    return -math.expm1(bits * math.log1p(-bit_error_rate))


def link_success(distance_m: float, budget: LinkBudget, plan: PacketPlan) -> float:
    """Per-packet success probability 1 - PER for a single link."""
    d = max(distance_m, MIN_DISTANCE_M)
    pl = path_loss_db(d, budget.fc_mhz)
    snr = snr_linear(budget, pl)
    eps_b = ber(snr, budget.modulation)
    return 1.0 - per(eps_b, plan.elems_per_packet)


def build_channel_matrix(topo: Topology, budget: LinkBudget,
                         plan: PacketPlan) -> ChannelMatrix:
    """Success probabilities for every edge; identity diagonal; 0 off-graph."""
    n = topo.n_devices
    succ = np.zeros((n, n))
    np.fill_diagonal(succ, 1.0)
    for a, b in topo.edges:
        s = link_success(topo.distance(a, b), budget, plan)
        succ[a, b] = succ[b, a] = s
    return ChannelMatrix(succ=succ)


def sample_mask(succ_prob: float, plan: PacketPlan,
                rng: np.random.Generator) -> np.ndarray:
    """Packet-block erasure mask of length model_dim.

    Each packet survives independently with probability succ_prob; its whole
    element range is ones on success and zeros on loss.
    """
    if not 0.0 <= succ_prob <= 1.0:
        raise ValueError("success probability must be in [0, 1]")
    blocks = (rng.random(plan.n_packets) < succ_prob).astype(float)
    return np.repeat(blocks, plan.elems_per_packet)[: plan.model_dim]


def sample_mask_batch(succ_prob: float, plan: PacketPlan, batch: int,
                      rng: np.random.Generator) -> np.ndarray:
    """(batch, model_dim) stack of independent erasure masks."""
    blocks = (rng.random((batch, plan.n_packets)) < succ_prob).astype(float)
    return np.repeat(blocks, plan.elems_per_packet, axis=1)[:, : plan.model_dim]
