"""Problem instances: network topology, fading channels, power model, and QoS targets.

A Scenario bundles everything one solve needs. Conventions:
  * antennas are indexed l = 0..N_T*L-1, antenna l belongs to BS l // N_T,
  * user positions list downlink users first, then uplink users,
  * all powers are stored in watts internally; file I/O uses dBm (see to_dict),
  * SINR targets are linear internally, dB in files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .units import db_to_linear, dbm_to_watts, linear_to_db, watts_to_dbm

SPEED_OF_LIGHT = 299_792_458.0
REFERENCE_DISTANCE_M = 1.0
DEFAULT_MIN_BS_USER_DISTANCE_M = 10.0
_MAX_PLACEMENT_ATTEMPTS = 10_000


class ScenarioError(ValueError):
    """Raised for inconsistent configuration or impossible placement."""


@dataclass
class SystemConfig:
    num_bs: int
    antennas_per_bs: int
    num_dl_users: int
    num_ul_users: int
    inter_site_distance: float
    user_disc_radius: float
    carrier_frequency: float
    path_loss_exponent: float
    bs_antenna_gain: float        # dB
    user_antenna_gain: float      # dB
    si_cancellation: float        # dB, np.inf means perfect cancellation
    noise_power_ul: float         # watts (sigma_z^2)
    noise_power_dl: float         # watts (sigma_n^2, same for every DL user)
    rng_seed: int = 0

    @property
    def n_antennas(self) -> int:
        return self.num_bs * self.antennas_per_bs

    @property
    def num_users(self) -> int:
        return self.num_dl_users + self.num_ul_users

    def validate(self) -> None:
        if self.num_bs < 1 or self.antennas_per_bs < 1:
            raise ScenarioError("need at least one BS and one antenna per BS")
        if self.num_users < 1:
            raise ScenarioError("need at least one user")
        if self.num_dl_users < 0 or self.num_ul_users < 0:
            raise ScenarioError("negative user counts")
        if self.noise_power_ul <= 0 or self.noise_power_dl <= 0:
            raise ScenarioError("noise powers must be positive")
        if self.path_loss_exponent <= 2:
            raise ScenarioError("path_loss_exponent must exceed 2")
        if self.inter_site_distance < 0 or self.user_disc_radius < 0:
            raise ScenarioError("distances must be nonnegative")
        if self.carrier_frequency <= 0:
            raise ScenarioError("carrier frequency must be positive")


@dataclass
class PowerModel:
    p_static: float               # P_0, watts
    p_active: float               # per antenna, watts
    p_idle: float                 # per antenna, watts
    amp_ineff_dl: float           # epsilon_D >= 1
    amp_ineff_ul: float           # epsilon_U >= 1
    weight_dl: float              # eta >= 0
    weight_ul: np.ndarray         # zeta_j >= 0, length K_U
    p_max_dl: np.ndarray          # per-antenna cap, watts, length N_T*L
    p_max_ul: np.ndarray          # per-UL-user cap, watts, length K_U

    def validate(self, config: SystemConfig) -> None:
        if not (self.p_active > self.p_idle > 0):
            raise ScenarioError("need p_active > p_idle > 0")
        if self.amp_ineff_dl < 1 or self.amp_ineff_ul < 1:
            raise ScenarioError("amplifier inefficiencies must be >= 1")
        if self.weight_dl < 0 or np.any(self.weight_ul < 0):
            raise ScenarioError("objective weights must be nonnegative")
        if self.p_static < 0:
            raise ScenarioError("p_static must be nonnegative")
        if len(self.p_max_dl) != config.n_antennas:
            raise ScenarioError("p_max_dl length must match antenna count")
        if len(self.p_max_ul) != config.num_ul_users or len(self.weight_ul) != config.num_ul_users:
            raise ScenarioError("per-UL-user arrays must match num_ul_users")
        if np.any(self.p_max_dl <= 0) or np.any(self.p_max_ul <= 0):
            raise ScenarioError("power caps must be positive")


@dataclass
class QoSTargets:
    gamma_dl_req: np.ndarray      # linear, length K_D
    gamma_ul_req: np.ndarray      # linear, length K_U

    def validate(self, config: SystemConfig) -> None:
        if len(self.gamma_dl_req) != config.num_dl_users:
            raise ScenarioError("gamma_dl_req length must match num_dl_users")
        if len(self.gamma_ul_req) != config.num_ul_users:
            raise ScenarioError("gamma_ul_req length must match num_ul_users")
        if np.any(self.gamma_dl_req <= 0) or np.any(self.gamma_ul_req <= 0):
            raise ScenarioError("SINR targets must be strictly positive")


@dataclass
class ChannelRealization:
    h_dl: np.ndarray              # (K_D, N) complex
    g_ul_dl: np.ndarray           # (K_U, K_D) complex
    h_ul: np.ndarray              # (K_U, N) complex
    h_si: np.ndarray              # (N, N) complex

    def validate(self, config: SystemConfig) -> None:
        n = config.n_antennas
        if self.h_dl.shape != (config.num_dl_users, n):
            raise ScenarioError("h_dl shape mismatch")
        if self.g_ul_dl.shape != (config.num_ul_users, config.num_dl_users):
            raise ScenarioError("g_ul_dl shape mismatch")
        if self.h_ul.shape != (config.num_ul_users, n):
            raise ScenarioError("h_ul shape mismatch")
        if self.h_si.shape != (n, n):
            raise ScenarioError("h_si shape mismatch")
        for arr in (self.h_dl, self.g_ul_dl, self.h_ul, self.h_si):
            if not np.all(np.isfinite(arr.view(float))):
                raise ScenarioError("channel entries must be finite")


@dataclass
class Scenario:
    config: SystemConfig
    power: PowerModel
    qos: QoSTargets
    channels: ChannelRealization
    bs_positions: np.ndarray      # (L, 2) meters
    user_positions: np.ndarray    # (K, 2) meters, DL users first

    @property
    def n_antennas(self) -> int:
        return self.config.n_antennas

    def validate(self) -> None:
        self.config.validate()
        self.power.validate(self.config)
        self.qos.validate(self.config)
        self.channels.validate(self.config)
        if self.bs_positions.shape != (self.config.num_bs, 2):
            raise ScenarioError("bs_positions shape mismatch")
        if self.user_positions.shape != (self.config.num_users, 2):
            raise ScenarioError("user_positions shape mismatch")


def path_loss_db(distance_m, carrier_frequency, path_loss_exponent,
                 gain_tx_db=0.0, gain_rx_db=0.0):
    """Log-distance path loss in dB, net of antenna gains.

    PL(dB) = 20 log10(4 pi d0 f / c) + 10 alpha log10(d / d0) - G_tx - G_rx,
    with reference distance d0 = 1 m.
    """
    d = np.maximum(np.asarray(distance_m, dtype=float), REFERENCE_DISTANCE_M)
    pl0 = 20.0 * np.log10(4.0 * np.pi * REFERENCE_DISTANCE_M * carrier_frequency / SPEED_OF_LIGHT)
    return pl0 + 10.0 * path_loss_exponent * np.log10(d / REFERENCE_DISTANCE_M) - gain_tx_db - gain_rx_db


def path_loss_linear(distance_m, carrier_frequency, path_loss_exponent,
                     gain_tx_db=0.0, gain_rx_db=0.0):
    """Linear power gain E[|h|^2] of a link at the given distance."""
    return db_to_linear(-path_loss_db(distance_m, carrier_frequency,
                                      path_loss_exponent, gain_tx_db, gain_rx_db))


def generate_topology(config: SystemConfig, d_min: float = DEFAULT_MIN_BS_USER_DISTANCE_M,
                      rng: np.random.Generator | None = None):
    """Place BSs on the triangle circumcircle and users uniformly on the disc.

    For L = 3 the BSs sit at the corner points of an equilateral triangle with
    side inter_site_distance; general L spaces the BSs equally on that
    triangle's circumscribed circle. Users are redrawn until they are at least
    d_min away from every BS.
    """
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    radius = config.inter_site_distance / np.sqrt(3.0)
    angles = np.pi / 2.0 + 2.0 * np.pi * np.arange(config.num_bs) / config.num_bs
    bs = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    users = np.zeros((config.num_users, 2))
    for u in range(config.num_users):
        for _ in range(_MAX_PLACEMENT_ATTEMPTS):
            r = config.user_disc_radius * np.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2.0 * np.pi)
            pos = np.array([r * np.cos(phi), r * np.sin(phi)])
            if config.user_disc_radius == 0.0:
                pos = np.zeros(2)
            if np.all(np.linalg.norm(bs - pos, axis=1) >= d_min):
                users[u] = pos
                break
        else:
            raise ScenarioError(
                f"could not place user {u} at distance >= {d_min} m from every BS")
    return bs, users


def _cn_samples(rng: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. CN(0, 1) samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def generate_channels(config: SystemConfig, bs_positions: np.ndarray,
                      user_positions: np.ndarray,
                      rng: np.random.Generator | None = None,
                      d_min: float = DEFAULT_MIN_BS_USER_DISTANCE_M) -> ChannelRealization:
    """Draw one Rayleigh-faded realization of every link in the network.

    Each BS-antenna-to-user entry is sqrt(PL_linear(d)) * CN(0,1) with the
    log-distance path loss of the owning BS. User-to-user channels use 0 dBi
    gains on both ends. The residual self-interference matrix has intra-BS
    blocks of variance 10^(-si_cancellation/10) and inter-BS blocks carrying
    the site-to-site path loss scaled by the same cancellation factor.
    """
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    n = config.n_antennas
    k_d, k_u = config.num_dl_users, config.num_ul_users
    nt = config.antennas_per_bs

    bs_user_dist = np.linalg.norm(user_positions[:, None, :] - bs_positions[None, :, :], axis=2)
    if bs_user_dist.size and bs_user_dist.min() < d_min:
        raise ScenarioError(f"user closer than {d_min} m to a BS")

    def user_link(user_idx: int) -> np.ndarray:
        gain = path_loss_linear(bs_user_dist[user_idx], config.carrier_frequency,
                                config.path_loss_exponent, config.bs_antenna_gain,
                                config.user_antenna_gain)
        amplitude = np.repeat(np.sqrt(gain), nt)
        return amplitude * _cn_samples(rng, n)

    h_dl = np.stack([user_link(k) for k in range(k_d)]) if k_d else np.zeros((0, n), complex)

    g = np.zeros((k_u, k_d), complex)
    for j in range(k_u):
        for k in range(k_d):
            d = np.linalg.norm(user_positions[k_d + j] - user_positions[k])
            g[j, k] = np.sqrt(path_loss_linear(d, config.carrier_frequency,
                                               config.path_loss_exponent)) * _cn_samples(rng, ())

    h_ul = np.stack([user_link(k_d + j) for j in range(k_u)]) if k_u else np.zeros((0, n), complex)

    si_factor = 0.0 if np.isinf(config.si_cancellation) else db_to_linear(-config.si_cancellation)
    h_si = np.zeros((n, n), complex)
    for b1 in range(config.num_bs):
        for b2 in range(config.num_bs):
            rows = slice(b1 * nt, (b1 + 1) * nt)
            cols = slice(b2 * nt, (b2 + 1) * nt)
            if b1 == b2:
                var = si_factor
            else:
                d = np.linalg.norm(bs_positions[b1] - bs_positions[b2])
                var = si_factor * path_loss_linear(d, config.carrier_frequency,
                                                   config.path_loss_exponent,
                                                   config.bs_antenna_gain,
                                                   config.bs_antenna_gain)
            h_si[rows, cols] = np.sqrt(var) * _cn_samples(rng, (nt, nt))
    return ChannelRealization(h_dl=h_dl, g_ul_dl=g, h_ul=h_ul, h_si=h_si)


def generate_scenario(config: SystemConfig, power: PowerModel, qos: QoSTargets,
                      d_min: float = DEFAULT_MIN_BS_USER_DISTANCE_M) -> Scenario:
    """Topology + channels from the config seed, validated."""
    rng = np.random.default_rng(config.rng_seed)
    bs, users = generate_topology(config, d_min=d_min, rng=rng)
    channels = generate_channels(config, bs, users, rng=rng, d_min=d_min)
    scen = Scenario(config=config, power=power, qos=qos, channels=channels,
                    bs_positions=bs, user_positions=users)
    scen.validate()
    return scen


# ---------------------------------------------------------------------------
# File schema (JSON-compatible dicts; powers in dBm, gains/SINRs in dB)
# ---------------------------------------------------------------------------

_CONFIG_DBM_FIELDS = ("noise_power_ul", "noise_power_dl")


def config_from_dict(d: dict) -> SystemConfig:
    d = dict(d)
    si = d.get("si_cancellation", 50.0)
    return SystemConfig(
        num_bs=int(d["num_bs"]),
        antennas_per_bs=int(d["antennas_per_bs"]),
        num_dl_users=int(d["num_dl_users"]),
        num_ul_users=int(d["num_ul_users"]),
        inter_site_distance=float(d["inter_site_distance"]),
        user_disc_radius=float(d["user_disc_radius"]),
        carrier_frequency=float(d["carrier_frequency"]),
        path_loss_exponent=float(d["path_loss_exponent"]),
        bs_antenna_gain=float(d.get("bs_antenna_gain", 10.0)),
        user_antenna_gain=float(d.get("user_antenna_gain", 0.0)),
        si_cancellation=float(si) if si is not None else np.inf,
        noise_power_ul=float(dbm_to_watts(d["noise_power_ul"])),
        noise_power_dl=float(dbm_to_watts(d.get("noise_power_dl", d["noise_power_ul"]))),
        rng_seed=int(d.get("rng_seed", 0)),
    )


def config_to_dict(c: SystemConfig) -> dict:
    return {
        "num_bs": c.num_bs,
        "antennas_per_bs": c.antennas_per_bs,
        "num_dl_users": c.num_dl_users,
        "num_ul_users": c.num_ul_users,
        "inter_site_distance": c.inter_site_distance,
        "user_disc_radius": c.user_disc_radius,
        "carrier_frequency": c.carrier_frequency,
        "path_loss_exponent": c.path_loss_exponent,
        "bs_antenna_gain": c.bs_antenna_gain,
        "user_antenna_gain": c.user_antenna_gain,
        "si_cancellation": None if np.isinf(c.si_cancellation) else c.si_cancellation,
        "noise_power_ul": float(watts_to_dbm(c.noise_power_ul)),
        "noise_power_dl": float(watts_to_dbm(c.noise_power_dl)),
        "rng_seed": c.rng_seed,
    }


def _per_item(value, count: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(count, float(arr))
    if len(arr) != count:
        raise ScenarioError(f"expected scalar or length-{count} list, got {value!r}")
    return arr


def power_from_dict(d: dict, config: SystemConfig) -> PowerModel:
    return PowerModel(
        p_static=float(dbm_to_watts(d["p_static"])) if d.get("p_static") is not None else 0.0,
        p_active=float(dbm_to_watts(d["p_active"])),
        p_idle=float(dbm_to_watts(d["p_idle"])),
        amp_ineff_dl=float(d.get("amp_ineff_dl", 5.0)),
        amp_ineff_ul=float(d.get("amp_ineff_ul", 5.0)),
        weight_dl=float(d.get("weight_dl", 1.0)),
        weight_ul=_per_item(d.get("weight_ul", 1.0), config.num_ul_users),
        p_max_dl=dbm_to_watts(_per_item(d["p_max_dl"], config.n_antennas)),
        p_max_ul=dbm_to_watts(_per_item(d["p_max_ul"], config.num_ul_users)),
    )


def power_to_dict(p: PowerModel) -> dict:
    return {
        "p_static": None if p.p_static == 0.0 else float(watts_to_dbm(p.p_static)),
        "p_active": float(watts_to_dbm(p.p_active)),
        "p_idle": float(watts_to_dbm(p.p_idle)),
        "amp_ineff_dl": p.amp_ineff_dl,
        "amp_ineff_ul": p.amp_ineff_ul,
        "weight_dl": p.weight_dl,
        "weight_ul": np.asarray(p.weight_ul).tolist(),
        "p_max_dl": watts_to_dbm(p.p_max_dl).tolist(),
        "p_max_ul": watts_to_dbm(p.p_max_ul).tolist(),
    }


def qos_from_dict(d: dict, config: SystemConfig) -> QoSTargets:
    return QoSTargets(
        gamma_dl_req=db_to_linear(_per_item(d["gamma_dl_req"], config.num_dl_users)),
        gamma_ul_req=db_to_linear(_per_item(d["gamma_ul_req"], config.num_ul_users)),
    )


def qos_to_dict(q: QoSTargets) -> dict:
    return {
        "gamma_dl_req": linear_to_db(q.gamma_dl_req).tolist(),
        "gamma_ul_req": linear_to_db(q.gamma_ul_req).tolist(),
    }


def _complex_to_lists(a: np.ndarray):
    return [np.real(a).tolist(), np.imag(a).tolist()]


def _complex_from_lists(pair) -> np.ndarray:
    return np.asarray(pair[0], dtype=float) + 1j * np.asarray(pair[1], dtype=float)


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "config": config_to_dict(s.config),
        "power": power_to_dict(s.power),
        "qos": qos_to_dict(s.qos),
        "bs_positions": s.bs_positions.tolist(),
        "user_positions": s.user_positions.tolist(),
        "channels": {
            "h_dl": _complex_to_lists(s.channels.h_dl),
            "g_ul_dl": _complex_to_lists(s.channels.g_ul_dl),
            "h_ul": _complex_to_lists(s.channels.h_ul),
            "h_si": _complex_to_lists(s.channels.h_si),
        },
    }


def scenario_from_dict(d: dict) -> Scenario:
    """Rebuild a Scenario from its dict form.

    If positions/channels are absent they are regenerated from the config's
    rng_seed, so a bare {config, power, qos} dict is a valid scenario file.
    """
    config = config_from_dict(d["config"])
    power = power_from_dict(d["power"], config)
    qos = qos_from_dict(d["qos"], config)
    if "channels" not in d:
        scen = generate_scenario(config, power, qos)
        scen.validate()
        return scen
    ch = d["channels"]
    n = config.n_antennas
    channels = ChannelRealization(
        h_dl=_complex_from_lists(ch["h_dl"]).reshape(config.num_dl_users, n),
        g_ul_dl=_complex_from_lists(ch["g_ul_dl"]).reshape(config.num_ul_users, config.num_dl_users),
        h_ul=_complex_from_lists(ch["h_ul"]).reshape(config.num_ul_users, n),
        h_si=_complex_from_lists(ch["h_si"]).reshape(n, n),
    )
    scen = Scenario(config=config, power=power, qos=qos, channels=channels,
                    bs_positions=np.asarray(d["bs_positions"], dtype=float),
                    user_positions=np.asarray(d["user_positions"], dtype=float))
    scen.validate()
    return scen


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return scenario_from_dict(json.load(f))


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w") as f:
        json.dump(scenario_to_dict(s), f, indent=1)
