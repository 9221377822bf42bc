"""Direct-formula evaluation of SINRs, rates, power, and constraint residuals.

Everything here works on plain numpy arrays; the functions are pure and are
used both as the user-facing report path and as the independent check applied
to solver outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import Scenario


@dataclass
class Allocation:
    """One resource-allocation decision: beamformers, UL powers, selection.

    w_dl holds the rank-one beamformers; W_dl their outer products. The
    auxiliary product variables (q, p_tilde, W_tilde) are implied by s and are
    materialized lazily where a consumer needs them.
    """

    w_dl: list                    # K_D complex vectors, length N
    p_ul: np.ndarray              # (K_U,) watts
    s: np.ndarray                 # (N,) in [0, 1], binary at algorithm output
    W_dl: list | None = None      # K_D Hermitian PSD matrices
    q: np.ndarray | None = None   # (N, N)
    p_tilde: np.ndarray | None = None   # (K_U, N, N)
    W_tilde: np.ndarray | None = None   # (K_D, N, N, N, N)
    rank_ratios: np.ndarray | None = None   # lambda_2/lambda_1 per DL user

    def __post_init__(self):
        self.p_ul = np.asarray(self.p_ul, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        if self.W_dl is None:
            self.W_dl = [np.outer(w, w.conj()) for w in self.w_dl]
        if self.q is None:
            self.q = np.outer(self.s, self.s)

    @property
    def active_antennas(self) -> int:
        return int(np.sum(self.s > 0.5))


def dl_sinr(scenario: Scenario, allocation: Allocation, k: int) -> float:
    """Downlink SINR of user k: desired power over intra-cell + UL co-channel + noise."""
    h = scenario.channels.h_dl[k]
    sig = np.abs(np.vdot(h, allocation.w_dl[k])) ** 2
    interference = sum(np.abs(np.vdot(h, allocation.w_dl[t])) ** 2
                       for t in range(scenario.config.num_dl_users) if t != k)
    ul_leak = float(np.sum(allocation.p_ul * np.abs(scenario.channels.g_ul_dl[:, k]) ** 2))
    return float(sig / (interference + ul_leak + scenario.config.noise_power_dl))


def mrc_beamformer(scenario: Scenario, s: np.ndarray, j: int) -> np.ndarray:
    """Receive combiner v_j = sum_l s_l R_l h_Uj: the selection-masked channel."""
    return np.asarray(s, dtype=float) * scenario.channels.h_ul[j]


def ul_sinr_vector(scenario: Scenario, allocation: Allocation, j: int) -> float:
    """Uplink SINR of user j in receive-vector form (independent of ul_sinr)."""
    v = mrc_beamformer(scenario, allocation.s, j)
    vnorm2 = float(np.real(np.vdot(v, v)))
    if vnorm2 == 0.0:
        return 0.0
    h = scenario.channels.h_ul[j]
    num = allocation.p_ul[j] * np.abs(np.vdot(v, h)) ** 2
    h_si = scenario.channels.h_si
    self_int = sum(float(np.real(np.vdot(v, h_si @ w) * np.vdot(h_si @ w, v)))
                   for w in allocation.w_dl)
    cross = sum(allocation.p_ul[r] * np.abs(np.vdot(v, scenario.channels.h_ul[r])) ** 2
                for r in range(scenario.config.num_ul_users) if r != j)
    den = scenario.config.noise_power_ul * vnorm2 + self_int + cross
    return float(num / den)


def ul_sinr(scenario: Scenario, allocation: Allocation, j: int) -> float:
    """Uplink SINR of user j in the selection-matrix trace form.

    Written out literally with the R_l selector matrices; zero selected
    receive energy is defined as SINR 0 so a positive target correctly fails.
    """
    n = scenario.n_antennas
    s = allocation.s
    h = scenario.channels.h_ul[j]
    h_out = np.outer(h, h.conj())
    qs = np.outer(s, s)

    # sum_{m,n} s_m s_n R_m H_Uj R_n^H
    sel = qs * h_out
    num_tr = float(np.real(np.trace(h_out @ sel)))
    num = allocation.p_ul[j] * num_tr

    noise_tr = float(np.real(np.trace(sum(s[l] * h_out @ _selector(n, l) for l in range(n)))))
    if num_tr <= 0.0 or noise_tr <= 0.0:
        return 0.0
    den = scenario.config.noise_power_ul * noise_tr

    h_si = scenario.channels.h_si
    for k in range(scenario.config.num_dl_users):
        w_mat = allocation.W_dl[k]
        den += float(np.real(np.trace(h_si @ w_mat @ h_si.conj().T @ sel)))

    for r in range(scenario.config.num_ul_users):
        if r == j:
            continue
        hr = scenario.channels.h_ul[r]
        hr_out = np.outer(hr, hr.conj())
        den += allocation.p_ul[r] * float(np.real(np.trace(hr_out @ sel)))
    return float(num / den)


def _selector(n: int, l: int) -> np.ndarray:
    r = np.zeros((n, n))
    r[l, l] = 1.0
    return r


def dl_rate(scenario: Scenario, allocation: Allocation, k: int) -> float:
    return float(np.log2(1.0 + dl_sinr(scenario, allocation, k)))


def ul_rate(scenario: Scenario, allocation: Allocation, j: int) -> float:
    return float(np.log2(1.0 + ul_sinr(scenario, allocation, j)))


def total_power(scenario: Scenario, allocation: Allocation) -> float:
    """Static + antenna circuit + weighted amplifier power of one allocation."""
    p = scenario.power
    s = allocation.s
    n = scenario.n_antennas
    circuit = float(np.sum(s)) * p.p_active + float(n - np.sum(s)) * p.p_idle
    tx_dl = sum(float(np.sum(np.abs(w) ** 2)) for w in allocation.w_dl)
    tx_ul = float(np.sum(p.weight_ul * allocation.p_ul))
    return (p.p_static + circuit
            + p.weight_dl * p.amp_ineff_dl * tx_dl
            + p.amp_ineff_ul * tx_ul)


@dataclass
class Violation:
    constraint: str
    index: tuple
    margin: float        # positive = amount by which the constraint is broken
    detail: str = ""


@dataclass
class VerificationReport:
    feasible: bool
    violations: list = field(default_factory=list)
    dl_sinrs: np.ndarray = None
    ul_sinrs: np.ndarray = None
    total_power_w: float = np.nan

    def to_text(self) -> str:
        lines = [f"feasible: {self.feasible}",
                 f"total power: {self.total_power_w:.6g} W"]
        if self.dl_sinrs is not None and len(self.dl_sinrs):
            lines.append("DL SINR (dB): " + ", ".join(f"{10*np.log10(max(x, 1e-300)):.2f}"
                                                      for x in self.dl_sinrs))
        if self.ul_sinrs is not None and len(self.ul_sinrs):
            lines.append("UL SINR (dB): " + ", ".join(f"{10*np.log10(max(x, 1e-300)):.2f}"
                                                      for x in self.ul_sinrs))
        for v in self.violations:
            lines.append(f"VIOLATION {v.constraint}{list(v.index)}: margin {v.margin:.3g} {v.detail}")
        return "\n".join(lines)

    def to_csv_rows(self) -> list:
        return [(v.constraint, "/".join(map(str, v.index)), v.margin, v.detail)
                for v in self.violations]


def verify_allocation(scenario: Scenario, allocation: Allocation,
                      tol: float = 1e-6) -> VerificationReport:
    """Check an allocation against every constraint of the design problem.

    tol is relative; each violated constraint is listed with its margin.
    """
    cfg = scenario.config
    violations = []

    dl = np.array([dl_sinr(scenario, allocation, k) for k in range(cfg.num_dl_users)])
    for k in range(cfg.num_dl_users):
        target = scenario.qos.gamma_dl_req[k]
        if dl[k] < target * (1.0 - tol):
            violations.append(Violation("C1", (k,), float(target - dl[k]),
                                        f"DL SINR {dl[k]:.4g} < {target:.4g}"))

    ul = np.array([ul_sinr(scenario, allocation, j) for j in range(cfg.num_ul_users)])
    for j in range(cfg.num_ul_users):
        target = scenario.qos.gamma_ul_req[j]
        if ul[j] < target * (1.0 - tol):
            violations.append(Violation("C2", (j,), float(target - ul[j]),
                                        f"UL SINR {ul[j]:.4g} < {target:.4g}"))

    for l in range(scenario.n_antennas):
        used = sum(float(np.abs(w[l]) ** 2) for w in allocation.w_dl)
        cap = float(allocation.s[l] * scenario.power.p_max_dl[l])
        if used > cap + tol * (1.0 + cap):
            violations.append(Violation("C3", (l,), used - cap,
                                        f"antenna power {used:.4g} > {cap:.4g}"))

    for j in range(cfg.num_ul_users):
        cap = float(scenario.power.p_max_ul[j])
        p = float(allocation.p_ul[j])
        if p < -tol * cap or p > cap * (1.0 + tol):
            violations.append(Violation("C4", (j,), max(-p, p - cap),
                                        f"UL power {p:.4g} outside [0, {cap:.4g}]"))

    s = allocation.s
    binariness = float(np.max(np.abs(s - np.round(s)), initial=0.0))
    if binariness > tol:
        violations.append(Violation("C5", (), binariness, "selection not binary"))

    return VerificationReport(feasible=not violations, violations=violations,
                              dl_sinrs=dl, ul_sinrs=ul,
                              total_power_w=total_power(scenario, allocation))
