"""
Module: channel.py
Description: This module computes the link budget of satellite-RUE links: free-space and total
path loss, channel gain, the time-frequency channel response, UPA steering vectors, beamformed
SINR with inter-beam interference, achievable rate and spectrum efficiency.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from app.engine.geometry import VisibleLink, doppler, propagation_delay
from app.exceptions import ConfigurationError
from app.schemas import SPEED_OF_LIGHT, NoiseReference, RadioConfig

logger = logging.getLogger(__name__)

NOISE_REFERENCE_POWER_W = 10.0
NOISE_REFERENCE_ALTITUDE_KM = 500.0

LinkKey = Tuple[int, int]  # (sat_id, rue_id)


@dataclass(frozen=True)
class PathLossBreakdown:
    """Components of the total path loss in dB."""
    fspl_db: float
    sf_db: float
    cl_db: float
    pl_b_db: float
    pl_g_db: float
    pl_s_db: float
    pl_total_db: float

    @classmethod
    def from_components(cls, fspl_db: float, sf_db: float, cl_db: float,
                        pl_g_db: float, pl_s_db: float) -> "PathLossBreakdown":
        pl_b = fspl_db + sf_db + cl_db
        return cls(fspl_db=fspl_db, sf_db=sf_db, cl_db=cl_db, pl_b_db=pl_b,
                   pl_g_db=pl_g_db, pl_s_db=pl_s_db, pl_total_db=pl_b + pl_g_db + pl_s_db)


@dataclass(frozen=True)
class LinkChannel:
    """Channel of one satellite-RUE link."""
    sat_id: int
    rue_id: int
    gain_g: float
    doppler_hz: float
    delay_s: float
    steering: np.ndarray = field(repr=False)

    @property
    def key(self) -> LinkKey:
        return self.sat_id, self.rue_id


@dataclass
class BeamPlan:
    """
    Per-satellite power and bandwidth of each associated RUE.

    Attributes:
        entries (dict): sat_id -> {rue_id -> (power_w, bandwidth_hz)}.
    """
    entries: Dict[int, Dict[int, Tuple[float, float]]] = field(default_factory=dict)

    def allocation(self, sat_id: int, rue_id: int) -> Tuple[float, float]:
        try:
            return self.entries[sat_id][rue_id]
        except KeyError:
            raise ConfigurationError(f"no beam plan entry for link ({sat_id}, {rue_id})") from None

    def check_budgets(self, radio: RadioConfig, tol: float = 1e-9) -> None:
        """
        Raises:
            ConfigurationError: If a satellite exceeds P_max or B_tot.
        """
        for sat_id, links in self.entries.items():
            power = sum(p for p, _ in links.values())
            band = sum(b for _, b in links.values())
            if power > radio.p_max * (1 + tol) or band > radio.b_tot * (1 + tol):
                raise ConfigurationError(f"satellite {sat_id} exceeds its power or bandwidth budget")


def fspl(d: float, f_c: float) -> float:
    """Free-space path loss 20*log10(4*pi*d*f_c/c) in dB, d in metres, f_c in Hz."""
    return 20.0 * math.log10(4.0 * math.pi * d * f_c / SPEED_OF_LIGHT)


def path_loss(slant_range_km: float, radio: RadioConfig, sf_sample: float) -> PathLossBreakdown:
    """
    Assemble the path-loss breakdown of a link.

    Args:
        slant_range_km (float): Link distance.
        radio (RadioConfig): Radio block (CL, PL_g, PL_s, f_c).
        sf_sample (float): Shadow-fading draw in dB, sampled by the caller.

    Returns:
        PathLossBreakdown: The breakdown.
    """
    return PathLossBreakdown.from_components(
        fspl_db=fspl(slant_range_km * 1e3, radio.f_c),
        sf_db=sf_sample,
        cl_db=radio.cl_db,
        pl_g_db=radio.pl_g_db,
        pl_s_db=radio.pl_s_db,
    )


def channel_gain(pl: PathLossBreakdown, radio: RadioConfig) -> float:
    """Channel gain coefficient sqrt(G_s*G_u) * 10^(-PL/10)."""
    return math.sqrt(radio.g_s_lin * radio.g_u_lin) * 10.0 ** (-pl.pl_total_db / 10.0)


def steering_vector(dx_km: float, dy_km: float, slant_range_km: float, nx: int, ny: int) -> np.ndarray:
    """
    Unit-norm UPA response toward a ground point.

    Elements are half a wavelength apart; x is the direction of motion.
    """
    ux = dx_km / slant_range_km
    uy = dy_km / slant_range_km
    m = np.arange(nx)[:, None]
    n = np.arange(ny)[None, :]
    response = np.exp(1j * math.pi * (m * ux + n * uy)).ravel()
    return response / math.sqrt(nx * ny)


def build_link(link: VisibleLink, radio: RadioConfig, sf_db: float, sat_speed_kms: float) -> LinkChannel:
    """Channel of a visible link for a given shadow-fading draw."""
    pl = path_loss(link.slant_range_km, radio, sf_db)
    steering = steering_vector(link.dx_km, link.dy_km, link.slant_range_km, radio.upa_nx, radio.upa_ny)
    steering.setflags(write=False)
    return LinkChannel(
        sat_id=link.sat_id,
        rue_id=link.rue_id,
        gain_g=channel_gain(pl, radio),
        doppler_hz=doppler(link, radio.doppler_mode, radio.f_c, sat_speed_kms, radio.doppler_hz),
        delay_s=propagation_delay(link.slant_range_km),
        steering=steering,
    )


def channel_response(link: LinkChannel, t: float, f: float) -> complex:
    """h[t, f] = g * exp(j*2*pi*(t*nu - f*tau))."""
    phase = 2.0 * math.pi * math.fmod(t * link.doppler_hz - f * link.delay_s, 1.0)
    return link.gain_g * complex(math.cos(phase), math.sin(phase))


def noise_power(radio: RadioConfig) -> float:
    """
    Linear noise power.

    With the nadir reference, noise_db is relative to the power a 10 W beam delivers at
    500 km nadir with the configured gains and losses.
    """
    level = 10.0 ** (radio.noise_db / 10.0)
    if NoiseReference(radio.noise_reference) is NoiseReference.absolute:
        return level
    g_ref = channel_gain(path_loss(NOISE_REFERENCE_ALTITUDE_KM, radio, 0.0), radio)
    return NOISE_REFERENCE_POWER_W * g_ref ** 2 * level


def sinr(target_link: LinkKey, plan: BeamPlan, association: Mapping[int, int],
         all_links: Mapping[LinkKey, LinkChannel], noise_power_lin: float) -> float:
    """
    SINR of one beamformed link.

    Each active link (s', u') transmits w = sqrt(p)*steering(s', u'). The target RUE u receives
    |h_{s,u}^H w_{s,u}|^2 as signal and every other active beam through its own channel from
    s' as interference.

    Args:
        target_link (tuple): (sat_id, rue_id) of an associated link.
        plan (BeamPlan): Power and bandwidth of every active link.
        association (Mapping[int, int]): rue_id -> serving sat_id.
        all_links (Mapping): (sat_id, rue_id) -> LinkChannel for every visible pair.
        noise_power_lin (float): Linear noise power.

    Returns:
        float: Linear SINR.

    Raises:
        ConfigurationError: If the target is not associated or a plan entry is missing.
    """
    sat_id, rue_id = target_link
    if association.get(rue_id) != sat_id:
        raise ConfigurationError(f"RUE {rue_id} is not associated with satellite {sat_id}")

    def received(s: int, intended: int) -> float:
        channel = all_links.get((s, rue_id))
        if channel is None:
            return 0.0
        power, _ = plan.allocation(s, intended)
        beam = all_links[(s, intended)].steering
        return channel.gain_g ** 2 * power * abs(np.vdot(channel.steering, beam)) ** 2

    signal = received(sat_id, rue_id)
    interference = 0.0
    for other_rue, other_sat in sorted(association.items()):
        if (other_sat, other_rue) == (sat_id, rue_id):
            continue
        interference += received(other_sat, other_rue)
    return signal / (noise_power_lin + interference)


def steering_correlation(steering: np.ndarray) -> np.ndarray:
    """|a_{s,u}^H a_{s,u'}|^2 for every satellite s and RUE pair (u, u'); input shape (S, U, N)."""
    return np.abs(np.einsum("sun,svn->suv", steering.conj(), steering)) ** 2


def sinr_matrix(gains: np.ndarray, correlation: np.ndarray, power: np.ndarray,
                associated: np.ndarray, noise_power_lin: float) -> np.ndarray:
    """
    Vectorized SINR of every associated link.

    Args:
        gains (np.ndarray): (S, U) channel gains, zero where not visible.
        correlation (np.ndarray): (S, U, U) steering correlations.
        power (np.ndarray): (S, U) beam powers, zero where not associated.
        associated (np.ndarray): (S, U) boolean association.
        noise_power_lin (float): Linear noise power.

    Returns:
        np.ndarray: (S, U) SINR, zero where not associated.
    """
    # rx[s, u, v]: power of beam (s -> v) received at RUE u
    rx = (gains ** 2)[:, :, None] * power[:, None, :] * correlation
    total = rx.sum(axis=(0, 2))
    signal = np.einsum("suu->su", rx)
    interference = total[None, :] - signal
    out = signal / (noise_power_lin + interference)
    return np.where(associated, out, 0.0)


def link_rate(sinr_lin, bandwidth_hz):
    """Achievable rate B*log2(1 + SINR) in bit/s."""
    return bandwidth_hz * np.log2(1.0 + sinr_lin)


def spectrum_efficiency(links_per_sat: Mapping[int, Iterable[Tuple[float, float]]]) -> Tuple[List[float], float]:
    """
    Per-satellite and total spectrum efficiency.

    Args:
        links_per_sat (Mapping): sat_id -> iterable of (rate_bps, bandwidth_hz).

    Returns:
        tuple: (per-satellite SE in sat_id order, total SE). Satellites whose links use no
            bandwidth contribute 0.
    """
    per_sat = []
    for sat_id in sorted(links_per_sat):
        pairs = list(links_per_sat[sat_id])
        band = sum(b for _, b in pairs)
        per_sat.append(sum(r for r, _ in pairs) / band if band > 0 else 0.0)
    return per_sat, float(sum(per_sat))


def spectrum_efficiency_matrix(rates: np.ndarray, bandwidth: np.ndarray) -> np.ndarray:
    """Per-satellite SE from (S, U) rate and bandwidth matrices."""
    band = bandwidth.sum(axis=1)
    rate = rates.sum(axis=1)
    return np.divide(rate, band, out=np.zeros_like(rate, dtype=float), where=band > 0)


def links_by_key(links: Sequence[LinkChannel]) -> Dict[LinkKey, LinkChannel]:
    """Index links by (sat_id, rue_id)."""
    return {l.key: l for l in links}
