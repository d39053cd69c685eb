"""
Module: geometry.py
Description: This module provides Walker-constellation kinematics on a 2D projected service area.
Satellites move along parallel ground tracks (one per orbital plane) that wrap modulo the
ground-track length; RUEs move in straight lines and reflect at the area boundary. It produces
per-slot satellite and RUE positions, visibility sets, slant ranges and Doppler shifts.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.schemas import SPEED_OF_LIGHT, ConstellationConfig, DopplerMode

logger = logging.getLogger(__name__)

MIN_EXPECTED_DELAY_S = 2e-3
MAX_EXPECTED_DELAY_S = 20e-3


@dataclass(frozen=True)
class SatelliteState:
    """Position of one satellite on its ground track."""
    sat_id: int
    plane_index: int
    x_km: float  # along-track, in [0, track_length_km)
    y_km: float
    altitude_km: float
    velocity_kms: float
    track_length_km: float

    @property
    def position(self) -> Tuple[float, float]:
        return self.x_km, self.y_km


@dataclass(frozen=True)
class RueState:
    """Position, motion and initial demand of one RUE."""
    rue_id: int
    x_km: float
    y_km: float
    speed_kmh: float
    heading: float
    demand_bits: float
    cluster_id: Optional[int] = None

    @property
    def position(self) -> Tuple[float, float]:
        return self.x_km, self.y_km


@dataclass(frozen=True)
class VisibleLink:
    """A satellite seen from one RUE above the minimum elevation."""
    sat_id: int
    rue_id: int
    slant_range_km: float
    elevation_rad: float
    dx_km: float
    dy_km: float


Visibility = Dict[int, List[VisibleLink]]


def initial_satellites(config: ConstellationConfig, area_side_km: float) -> List[SatelliteState]:
    """
    Place the constellation at t=0.

    Each plane's track runs along x at y = area_side*(p+0.5)/num_planes. Satellites of a plane
    are centred on the service area, spaced by `spacing_km` (or evenly over the whole track when
    unset), and each plane is shifted by `phase_offset` of the track length.

    Args:
        config (ConstellationConfig): Constellation block.
        area_side_km (float): Side of the square service area.

    Returns:
        List[SatelliteState]: Satellites ordered by sat_id.
    """
    length = config.track_length_km
    spacing = config.spacing_km if config.spacing_km is not None else length / config.sats_per_plane
    n = config.sats_per_plane
    sats = []
    for p in range(config.num_planes):
        y = area_side_km * (p + 0.5) / config.num_planes
        for j in range(n):
            x = area_side_km / 2.0 + (j - (n - 1) / 2.0) * spacing + p * config.phase_offset * length
            sats.append(SatelliteState(
                sat_id=p * n + j,
                plane_index=p,
                x_km=float(np.mod(x, length)),
                y_km=y,
                altitude_km=config.altitude_km,
                velocity_kms=config.sat_speed_kms,
                track_length_km=length,
            ))
    return sats


def sample_rues(count: int, area_side_km: float, speed_kmh: float,
                demand_range_bits: Tuple[float, float], rng: np.random.Generator) -> List[RueState]:
    """
    Draw RUE positions, headings and demands uniformly.

    Args:
        count (int): Number of RUEs.
        area_side_km (float): Side of the service area.
        speed_kmh (float): Common RUE speed.
        demand_range_bits (tuple): (low, high) of the uniform initial demand.
        rng (np.random.Generator): Random source.

    Returns:
        List[RueState]: RUEs ordered by rue_id.
    """
    xy = rng.uniform(0.0, area_side_km, size=(count, 2))
    headings = rng.uniform(0.0, 2.0 * math.pi, size=count)
    demands = rng.uniform(demand_range_bits[0], demand_range_bits[1], size=count)
    return [
        RueState(rue_id=i, x_km=float(xy[i, 0]), y_km=float(xy[i, 1]), speed_kmh=speed_kmh,
                 heading=float(headings[i]), demand_bits=float(demands[i]))
        for i in range(count)
    ]


def _reflect(u: float, side: float) -> float:
    r = float(np.mod(u, 2.0 * side))
    return 2.0 * side - r if r > side else r


def propagate(config: ConstellationConfig, rues: Sequence[RueState], t: float,
              area_side_km: float = 500.0) -> Tuple[List[SatelliteState], List[RueState]]:
    """
    Advance the constellation and the RUEs from their t=0 states.

    Satellites advance by sat_speed*t modulo the track length; RUEs advance by speed*t along
    their heading and reflect at the area boundary.

    Args:
        config (ConstellationConfig): Constellation block.
        rues (Sequence[RueState]): RUE states at t=0.
        t (float): Elapsed time in seconds (t >= 0).
        area_side_km (float): Side of the service area.

    Returns:
        tuple: (satellites, rues) at time t.
    """
    sats = [
        replace(s, x_km=float(np.mod(s.x_km + s.velocity_kms * t, s.track_length_km)))
        for s in initial_satellites(config, area_side_km)
    ]
    moved = []
    for r in rues:
        step_km = r.speed_kmh / 3600.0 * t
        moved.append(replace(
            r,
            x_km=_reflect(r.x_km + step_km * math.cos(r.heading), area_side_km),
            y_km=_reflect(r.y_km + step_km * math.sin(r.heading), area_side_km),
        ))
    return sats, moved


def relative_offset(sat: SatelliteState, rue: RueState) -> Tuple[float, float]:
    """Ground offset (dx, dy) from a satellite's sub-point to a RUE, wrapped along-track."""
    length = sat.track_length_km
    dx = float(np.mod(rue.x_km - sat.x_km + length / 2.0, length) - length / 2.0)
    return dx, rue.y_km - sat.y_km


def link_geometry(sat: SatelliteState, rue: RueState) -> VisibleLink:
    """Slant range and elevation of the satellite as seen from the RUE."""
    dx, dy = relative_offset(sat, rue)
    ground = math.hypot(dx, dy)
    return VisibleLink(
        sat_id=sat.sat_id,
        rue_id=rue.rue_id,
        slant_range_km=math.sqrt(sat.altitude_km ** 2 + ground ** 2),
        elevation_rad=math.atan2(sat.altitude_km, ground),
        dx_km=dx,
        dy_km=dy,
    )


def compute_visibility(sats: Sequence[SatelliteState], rues: Sequence[RueState],
                       min_elevation: float) -> Visibility:
    """
    List the satellites each RUE can see.

    Args:
        sats (Sequence[SatelliteState]): Satellites at a common t.
        rues (Sequence[RueState]): RUEs at the same t.
        min_elevation (float): Minimum elevation in radians.

    Returns:
        Visibility: rue_id -> links sorted by ascending slant range (ties by sat_id).
            RUEs that see nothing map to an empty list.
    """
    visibility: Visibility = {}
    for rue in rues:
        links = [link_geometry(s, rue) for s in sats]
        visible = [l for l in links if l.elevation_rad >= min_elevation]
        visible.sort(key=lambda l: (l.slant_range_km, l.sat_id))
        visibility[rue.rue_id] = visible
    empty = unassociable(visibility)
    if empty:
        logger.debug("RUEs without visible satellites: %s", empty)
    return visibility


def unassociable(visibility: Visibility) -> List[int]:
    """RUE ids with an empty visibility set."""
    return sorted(rue_id for rue_id, links in visibility.items() if not links)


def doppler(link: VisibleLink, mode: DopplerMode, f_c: float, sat_speed_kms: float,
            constant_hz: float = 20_000.0) -> float:
    """
    Doppler shift of a link in Hz.

    Args:
        link (VisibleLink): The link.
        mode (DopplerMode): constant returns constant_hz; geometric returns (v/c)*f_c*cos(elevation).
        f_c (float): Carrier frequency in Hz.
        sat_speed_kms (float): Satellite speed in km/s.
        constant_hz (float): Configured constant shift.

    Returns:
        float: Doppler shift in Hz.
    """
    if DopplerMode(mode) is DopplerMode.constant:
        return constant_hz
    return sat_speed_kms * 1e3 / SPEED_OF_LIGHT * f_c * math.cos(link.elevation_rad)


def propagation_delay(slant_range_km: float) -> float:
    """One-way propagation delay in seconds."""
    delay = slant_range_km * 1e3 / SPEED_OF_LIGHT
    if not MIN_EXPECTED_DELAY_S <= delay <= MAX_EXPECTED_DELAY_S:
        logger.debug("Propagation delay %.4f s outside the expected 2-20 ms range", delay)
    return delay
