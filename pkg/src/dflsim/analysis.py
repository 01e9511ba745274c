"""Convergence-bound machinery for the lossy gossip schedule.

Everything here is closed-form linear algebra on the mixing matrix C and
the link success matrix T:

* zeta1..zeta7 - scalar rate coefficients from the smoothness/convexity
  constants (mu, L), the learning rate eta, the local iteration count I,
  and the network-average packet error rate tau_eps;
* M1..M4      - N x N matrices capturing, after J lossy aggregations, the
  expected bias (M1), the per-entry variance transfer (M2), the gap between
  lossy and lossless aggregation (M3), and the residual distance from
  uniform averaging (M4);
* phi(J)      - the per-round bound functional combining the five norms;
* phi_lower / phi_upper - analytic envelopes of phi over real J built from
  the scalar norms beta1..beta8, used to cap the search range;
* j_threshold / j_star  - the search-cap computation and the integer
  one-dimensional search for the best aggregation count.

The variance matrix M2 is accumulated by unrolling the one-step recursion
D_j = A1 D_{j-1} + A2 ((C*T)^{j-1} o (C*T)^{j-1}) with D_0 = 0, which
reproduces the single-step Bernoulli variance at J = 1.  A "literal"
variant with the off-by-one exponent in the last factor is kept only so
the Monte Carlo verifier can demonstrate that it disagrees with
simulation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .consensus import MODE_AWARE, MODE_UNAWARE, averaging_matrix, spectral_norm

# Floor applied to tau_eps inside zeta3 (and hence zeta5) so the perfect
# channel limit keeps phi's coefficient ratios finite; the zeta3/zeta5
# ratio itself is independent of the floor.
TAU_EPS_FLOOR = 1e-12

J_SEARCH_CAP = 1000.0
_REAL_J_TOL = 1e-6


@dataclass(frozen=True)
class ZetaCoefficients:
    zeta1: float
    zeta2: float
    zeta3: float
    zeta4: float
    zeta5: float
    zeta6: float
    zeta7: float
    tau_eps: float
    tau_eta: float
    mu: float
    lipschitz: float
    eta: float
    local_iters: int

    @property
    def ratio35(self) -> float:
        """zeta3 / zeta5 == tau_eta / (eta*L)^2, independent of tau_eps."""
        return self.tau_eta / (self.eta * self.lipschitz) ** 2

    @property
    def ratio45(self) -> float:
        return self.zeta4 / self.zeta5

    @property
    def ratio75(self) -> float:
        return self.zeta7 / self.zeta5


def compute_zetas(mu: float, lipschitz: float, eta: float, local_iters: int,
                  tau_eps: float) -> ZetaCoefficients:
    """Evaluate the seven rate coefficients.

    Requires 0 < eta < 1/(2L) (the admissible learning-rate range),
    mu > 0, L >= mu, I >= 1 and tau_eps >= 0.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    if lipschitz < mu:
        raise ValueError("lipschitz constant must be >= mu")
    if not 0.0 < eta < 1.0 / (2.0 * lipschitz):
        raise ValueError(
            f"eta={eta} outside admissible range (0, {1.0 / (2.0 * lipschitz)})")
    if local_iters < 1:
        raise ValueError("local_iters must be >= 1")
    if tau_eps < 0:
        raise ValueError("tau_eps must be nonnegative")

    i = local_iters
    tau = tau_eps
    tau_eta = eta * lipschitz / mu
    contraction = 1.0 - mu * eta / 2.0
    curvature = 2.0 * eta * lipschitz ** 2 + lipschitz + mu

    zeta1 = (1.0 + tau) * contraction ** i
    zeta2 = curvature * (1.0 + eta) * (
        ((1.0 + eta) ** (i + 1) - (1.0 + eta) ** 2 * contraction ** (i - 1))
        / (1.0 + mu / 2.0)
        - (2.0 - 2.0 * contraction ** (i - 1)) / mu)
    tau_f = max(tau, TAU_EPS_FLOOR)
    zeta3 = (1.0 + 1.0 / tau_f) * (1.0 + tau_eta) * contraction ** (i - 1)
    zeta4 = curvature * (1.0 + eta) ** 3 * (
        (1.0 + eta) ** (i - 1) - contraction ** (i - 1)) / (1.0 + mu / 2.0)
    zeta5 = zeta3 * (eta * lipschitz) ** 2 / tau_eta
    zeta6 = (2.0 + ((1.0 + tau) * mu * eta - 2.0) * contraction ** (i - 1)) / mu
    zeta7 = (1.0 + tau) * contraction ** (i - 1) * (
        2.0 * (eta * lipschitz) ** 2 + (lipschitz + mu) * eta)

    return ZetaCoefficients(zeta1, zeta2, zeta3, zeta4, zeta5, zeta6, zeta7,
                            tau, tau_eta, mu, lipschitz, eta, i)


@dataclass(frozen=True)
class BetaCoefficients:
    beta1: float  # ||C * T||
    beta2: float  # ||C||
    beta3: float  # ||C - C * T||
    beta4: float  # ||ones/N - C||
    beta5: float  # ||ones/N - C * T||
    beta6: float  # min column sum of C * T
    beta7: float  # min entry of T
    beta8: float  # max entry of T


def compute_betas(c: np.ndarray, t: np.ndarray) -> BetaCoefficients:
    n = c.shape[0]
    ct = c * t
    avg = averaging_matrix(n)
    return BetaCoefficients(
        beta1=spectral_norm(ct),
        beta2=spectral_norm(c),
        beta3=spectral_norm(c - ct),
        beta4=spectral_norm(avg - c),
        beta5=spectral_norm(avg - ct),
        beta6=float(ct.sum(axis=0).min()),
        beta7=float(t.min()),
        beta8=float(t.max()),
    )


# ---------------------------------------------------------------- moments


def compute_m1(c: np.ndarray, t: np.ndarray, j: int) -> np.ndarray:
    """Expected-bias coefficients: ones/N - (C*T)^J."""
    if j < 1:
        raise ValueError("aggregation count must be >= 1")
    n = c.shape[0]
    return averaging_matrix(n) - np.linalg.matrix_power(c * t, j)


def _variance_step_matrices(c: np.ndarray, t: np.ndarray):
    a1 = c * c * t
    a2 = c * c * t * (1.0 - t)
    return a1, a2


def compute_m2(c: np.ndarray, t: np.ndarray, j: int) -> np.ndarray:
    """Variance-transfer coefficients accumulated over J aggregations.

    Unrolls D_k = A1 D_{k-1} + A2 ((C*T)^{k-1} o (C*T)^{k-1}), D_0 = 0,
    so that the entrywise variance of the final models is M2 (W0 o W0).
    """
    if j < 1:
        raise ValueError("aggregation count must be >= 1")
    a1, a2 = _variance_step_matrices(c, t)
    ct = c * t
    power = np.eye(c.shape[0])  # (C*T)^(k-1)
    m2 = np.zeros_like(c)
    for _ in range(j):
        m2 = a1 @ m2 + a2 @ (power * power)
        power = power @ ct
    return m2


def compute_m2_literal(c: np.ndarray, t: np.ndarray, j: int) -> np.ndarray:
    """Printed-index variant sum_k A1^(k-1) A2 [(C*T)^(J-k-1)]^o2.

    The exponent J-k-1 is clamped at 0 (the k = J term would otherwise use
    a negative power).  Disagrees with simulation for J >= 2; retained so
    the discrepancy can be demonstrated, never used by the pipeline.
    """
    if j < 1:
        raise ValueError("aggregation count must be >= 1")
    a1, a2 = _variance_step_matrices(c, t)
    ct = c * t
    m2 = np.zeros_like(c)
    a1_pow = np.eye(c.shape[0])
    for k in range(1, j + 1):
        exponent = max(j - k - 1, 0)
        p = np.linalg.matrix_power(ct, exponent)
        m2 = m2 + a1_pow @ a2 @ (p * p)
        a1_pow = a1_pow @ a1
    return m2


def compute_m3(c: np.ndarray, t: np.ndarray, j: int, mode: str) -> np.ndarray:
    """Lossy-vs-lossless gap: C^J - (C*T)^J, identically 0 in aware mode."""
    if j < 1:
        raise ValueError("aggregation count must be >= 1")
    if mode == MODE_AWARE:
        return np.zeros_like(c)
    return np.linalg.matrix_power(c, j) - np.linalg.matrix_power(c * t, j)


def compute_m4(c: np.ndarray, t: np.ndarray, j: int, mode: str) -> np.ndarray:
    """Residual from uniform averaging of the lossless (unaware) or
    expected (aware) aggregation operator."""
    if j < 1:
        raise ValueError("aggregation count must be >= 1")
    n = c.shape[0]
    if mode == MODE_AWARE:
        return averaging_matrix(n) - np.linalg.matrix_power(c * t, j)
    return averaging_matrix(n) - np.linalg.matrix_power(c, j)


# ----------------------------------------------------------------- phi


def phi_from_norms(norm_1n_m1: float, norm_m1: float, norm_m2: float,
                   norm_m3: float, norm_m4: float, zetas: ZetaCoefficients,
                   p_max: float) -> float:
    root_p = math.sqrt(p_max)
    return (zetas.ratio35 * p_max * norm_1n_m1 ** 2
            + norm_m3 ** 2
            + zetas.ratio75 * norm_m4 ** 2
            + zetas.ratio45 * (1.0 - root_p) ** 2 * norm_m1 ** 2
            + ((zetas.zeta3 * p_max + zetas.zeta4 * (1.0 - p_max))
               / zetas.zeta5 + 1.0) * norm_m2)


def phi(m1: np.ndarray, m2: np.ndarray, m3: np.ndarray, m4: np.ndarray,
        zetas: ZetaCoefficients, p_max: float) -> float:
    """Per-round bound functional of the four moment matrices.

    The variance norm enters to the first power; the other norms are
    squared.  The column-sum norm ||1_N M1|| vanishes exactly in aware
    mode and under perfect channels.
    """
    norm_1n_m1 = float(np.linalg.norm(m1.sum(axis=0)))
    return phi_from_norms(norm_1n_m1, spectral_norm(m1), spectral_norm(m2),
                          spectral_norm(m3), spectral_norm(m4), zetas, p_max)


# ----------------------------------------------------- analytic envelopes


def _pow(base: float, j: float) -> float:
    """base**j for real j >= 0 with 0**j = 0 and negative bases clamped."""
    if base <= 0.0:
        return 0.0 if j > 0 else 1.0
    return math.exp(j * math.log(base))


def _geometric_sum_factor(beta1: float, beta2: float, j: float) -> float:
    """(beta2^J - beta1^J)/(beta2 - beta1), continuous at beta1 == beta2."""
    if abs(beta2 - beta1) < 1e-12:
        return j * _pow(beta1, j - 1.0)
    return (_pow(beta2, j) - _pow(beta1, j)) / (beta2 - beta1)


def phi_lower(betas: BetaCoefficients, zetas: ZetaCoefficients, p_max: float,
              n: int, j: float) -> float:
    b = betas
    z = zetas
    grow = (n * z.zeta3 * p_max + z.zeta4 * (1.0 - math.sqrt(p_max)) ** 2) / z.zeta5
    m2_coeff = (z.zeta3 * p_max + z.zeta4 * (1.0 - p_max) + z.zeta5) / (z.zeta5 * n)
    return (grow * (1.0 - _pow(b.beta1, j)) ** 2
            + z.ratio75 * _pow(b.beta4, 2.0 * j)
            + (_pow(b.beta2, j) - _pow(b.beta1, j)) ** 2
            + m2_coeff * _pow(b.beta7, 2.0 * j + 1.0) * (1.0 - b.beta8)
            * _pow(b.beta2, 2.0 * j + 2.0))


def phi_upper(betas: BetaCoefficients, zetas: ZetaCoefficients, p_max: float,
              n: int, j: float) -> float:
    b = betas
    z = zetas
    g = _geometric_sum_factor(b.beta1, b.beta2, j)
    m2_coeff = (z.zeta3 * p_max + z.zeta4 * (1.0 - p_max) + z.zeta5) / z.zeta5
    return (m2_coeff * g * b.beta3 * _pow(b.beta1, j)
            + (n * z.zeta3 * p_max / z.zeta5) * (1.0 - _pow(b.beta6, j)) ** 2
            + z.ratio45 * (g * b.beta3 + _pow(b.beta4, j)) ** 2
            + z.ratio75 * _pow(b.beta4, 2.0 * j)
            + (g * b.beta3) ** 2)


def phi_bounds(betas: BetaCoefficients, zetas: ZetaCoefficients, p_max: float,
               n: int, j: float, mode: str = MODE_UNAWARE) -> tuple[float, float]:
    """(phi_lower, phi_upper) at real-valued J; unaware mode only.

    In aware mode the lower envelope decreases monotonically and cannot
    narrow the search range, so the request is rejected.
    """
    if mode != MODE_UNAWARE:
        raise ValueError("analytic envelopes apply to the unaware design only")
    return (phi_lower(betas, zetas, p_max, n, j),
            phi_upper(betas, zetas, p_max, n, j))


def _golden_min(f, lo: float, hi: float, tol: float = _REAL_J_TOL,
                coarse: int = 512) -> tuple[float, float]:
    """Robust 1-D minimization: coarse grid, then golden-section refine."""
    grid = np.linspace(lo, hi, coarse)
    vals = [f(x) for x in grid]
    k = int(np.argmin(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, coarse - 1)]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
    xm = 0.5 * (a + b)
    return xm, f(xm)


@dataclass(frozen=True)
class JThreshold:
    value: float
    capped: bool  # no crossing found below the search cap


def j_threshold(betas: BetaCoefficients, zetas: ZetaCoefficients,
                p_max: float, n: int) -> JThreshold:
    """Largest real J with phi_lower(J) <= min_J phi_upper(J).

    The upper envelope is minimized over [1, 1000] first; if the lower
    envelope never exceeds that minimum below the cap (error-free limit),
    the cap is returned with the flag set.
    """
    fl = lambda j: phi_lower(betas, zetas, p_max, n, j)
    fu = lambda j: phi_upper(betas, zetas, p_max, n, j)
    _, min_u = _golden_min(fu, 1.0, J_SEARCH_CAP)
    j_l, min_l = _golden_min(fl, 1.0, J_SEARCH_CAP)

    if fl(J_SEARCH_CAP) <= min_u:
        return JThreshold(J_SEARCH_CAP, capped=True)
    if min_l > min_u:
        # Numerically degenerate: the envelopes barely separate.  The
        # tightest defensible cap is the lower envelope's own minimizer.
        return JThreshold(j_l, capped=False)

    lo = j_l
    hi = lo
    step = 1.0
    while fl(hi) <= min_u:  # fl(cap) > min_u, so this terminates
        lo = hi
        hi = min(hi + step, J_SEARCH_CAP)
        step *= 2.0
    while hi - lo > _REAL_J_TOL:
        mid = 0.5 * (lo + hi)
        if fl(mid) <= min_u:
            lo = mid
        else:
            hi = mid
    return JThreshold(0.5 * (lo + hi), capped=False)


# ----------------------------------------------------------- the J sweep


@dataclass
class PhiSweepRow:
    j: int
    phi: float
    phi_lower: float
    phi_upper: float
    norm_m1: float
    norm_m2: float
    norm_m3: float
    norm_m4: float
    norm_1n_m1: float


def sweep_phi(c: np.ndarray, t: np.ndarray, zetas: ZetaCoefficients,
              p_max: float, mode: str, j_max: int,
              betas: BetaCoefficients | None = None) -> list[PhiSweepRow]:
    """Evaluate phi (and the envelopes, unaware mode) for J = 1..j_max.

    Matrix powers are carried incrementally across the sweep, so the cost
    is O(j_max) multiplications.
    """
    n = c.shape[0]
    ct = c * t
    a1, a2 = _variance_step_matrices(c, t)
    avg = averaging_matrix(n)
    if betas is None and mode == MODE_UNAWARE:
        betas = compute_betas(c, t)

    rows: list[PhiSweepRow] = []
    p_ct = np.eye(n)
    p_c = np.eye(n)
    m2 = np.zeros_like(c)
    for j in range(1, j_max + 1):
        m2 = a1 @ m2 + a2 @ (p_ct * p_ct)
        p_ct = p_ct @ ct
        p_c = p_c @ c
        m1 = avg - p_ct
        if mode == MODE_AWARE:
            m3 = np.zeros_like(c)
            m4 = avg - p_ct
        else:
            m3 = p_c - p_ct
            m4 = avg - p_c
        n1 = float(np.linalg.norm(m1.sum(axis=0)))
        nm1 = spectral_norm(m1)
        nm2 = spectral_norm(m2)
        nm3 = spectral_norm(m3)
        nm4 = spectral_norm(m4)
        value = phi_from_norms(n1, nm1, nm2, nm3, nm4, zetas, p_max)
        if mode == MODE_UNAWARE:
            lo, up = phi_bounds(betas, zetas, p_max, n, float(j))
        else:
            lo, up = math.nan, math.nan
        rows.append(PhiSweepRow(j, value, lo, up, nm1, nm2, nm3, nm4, n1))
    return rows


@dataclass
class JStarResult:
    j_star: int
    phi_by_j: list[float]
    j_threshold: float | None = None
    threshold_capped: bool = False


def j_star(c: np.ndarray, t: np.ndarray, zetas: ZetaCoefficients,
           p_max: float, mode: str, j_cap: int) -> JStarResult:
    """Integer argmin of phi over the capped range (ties -> smaller J).

    Unaware mode: the range is [1, min(ceil(J_TH), j_cap)].  Aware mode:
    phi is non-increasing in practice, so the cap itself is returned with
    the phi table attached.
    """
    if j_cap < 1:
        raise ValueError("j_cap must be >= 1")
    if mode == MODE_AWARE:
        rows = sweep_phi(c, t, zetas, p_max, mode, j_cap)
        return JStarResult(j_cap, [r.phi for r in rows])
    betas = compute_betas(c, t)
    th = j_threshold(betas, zetas, p_max, c.shape[0])
    j_max = max(1, min(math.ceil(th.value), j_cap))
    rows = sweep_phi(c, t, zetas, p_max, mode, j_max, betas=betas)
    values = [r.phi for r in rows]
    best = int(np.argmin(values)) + 1
    return JStarResult(best, values, th.value, th.capped)


@dataclass
class AnalysisBundle:
    """Everything the analyze pipeline reports for one (C, T, mode) triple."""

    mode: str
    p_max: float
    tau_eps: float
    zetas: ZetaCoefficients
    betas: BetaCoefficients | None
    sweep: list[PhiSweepRow]
    j_threshold: float | None
    threshold_capped: bool
    j_star: int
    m1: np.ndarray = field(repr=False, default=None)
    m2: np.ndarray = field(repr=False, default=None)
    m3: np.ndarray = field(repr=False, default=None)
    m4: np.ndarray = field(repr=False, default=None)


def run_analysis(c: np.ndarray, t: np.ndarray, zetas: ZetaCoefficients,
                 p_max: float, mode: str, j_cap: int) -> AnalysisBundle:
    """Full sweep + schedule search, with moment matrices at the optimum."""
    result = j_star(c, t, zetas, p_max, mode, j_cap)
    betas = compute_betas(c, t) if mode == MODE_UNAWARE else None
    sweep = sweep_phi(c, t, zetas, p_max, mode, j_cap, betas=betas)
    jb = result.j_star
    return AnalysisBundle(
        mode=mode, p_max=p_max, tau_eps=zetas.tau_eps, zetas=zetas,
        betas=betas, sweep=sweep, j_threshold=result.j_threshold,
        threshold_capped=result.threshold_capped, j_star=jb,
        m1=compute_m1(c, t, jb), m2=compute_m2(c, t, jb),
        m3=compute_m3(c, t, jb, mode), m4=compute_m4(c, t, jb, mode))
