"""
Module: schemas.py
Description: This module defines the Pydantic models (schemas) used for data validation and
serialization/deserialization within the application. Schemas are provided for the experiment
configuration blocks (constellation, radio, episode, expert, learners, federation, sweep),
the standalone matching instance file, association snapshots, and the API payloads for
runs, metrics, federation rounds and parameter uploads.
"""

import math
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

SPEED_OF_LIGHT = 299_792_458.0


# Enums -----------------
class DopplerMode(str, Enum):
    """How the Doppler shift of a link is obtained."""
    constant = "constant"
    geometric = "geometric"


class NoiseReference(str, Enum):
    """How the configured noise level in dB is anchored."""
    nadir = "nadir"        # relative to a 10 W beam received at 500 km nadir
    absolute = "absolute"  # literal dBW


class FadingUpdate(str, Enum):
    """When shadow fading is redrawn."""
    slot = "slot"
    episode = "episode"


class Method(str, Enum):
    """Allocation methods compared by the harness."""
    gail = "gail"
    ppo = "ppo"
    expert = "expert"
    fairness = "fairness"


class SweepAxis(str, Enum):
    """Scenario parameter varied by a sweep."""
    none = "none"
    bandwidth = "bandwidth"  # grid values in MHz
    power = "power"          # grid values in W
    altitude = "altitude"    # grid values in km


class WeightsMode(str, Enum):
    """Client weighting used by FedAvg."""
    equal = "equal"
    batch = "batch"


# Scenario -----------------
class ConstellationConfig(BaseModel):
    """Walker constellation projected onto parallel ground tracks."""
    num_planes: int = Field(1, ge=1)
    sats_per_plane: int = Field(3, ge=1)
    altitude_km: float = Field(500.0, gt=0)
    period_min: float = Field(100.0, gt=0)
    sat_speed_kms: float = Field(7.5622, gt=0)
    phase_offset: float = Field(0.0, ge=0, lt=1)  # fraction of the ground-track length per plane
    spacing_km: Optional[float] = Field(150.0, gt=0)  # None spreads satellites evenly over the track

    @property
    def num_sats(self) -> int:
        return self.num_planes * self.sats_per_plane

    @property
    def period_s(self) -> float:
        return self.period_min * 60.0

    @property
    def track_length_km(self) -> float:
        """Ground-track wrap length; speed is authoritative."""
        return self.sat_speed_kms * self.period_s


class RadioConfig(BaseModel):
    """Radio block; names mirror the link-budget table."""
    f_c_ghz: float = Field(20.0, gt=0)
    b_tot_mhz: float = Field(500.0, gt=0)
    g_s_dbi: float = 33.13
    g_u_dbi: float = 34.2
    noise_db: float = -43.0
    noise_reference: NoiseReference = NoiseReference.nadir
    p_max_w: float = Field(10.0, gt=0)
    pl_g_db: float = -10.0
    pl_s_db: float = -20.0
    cl_db: float = 0.0
    sf_sigma_db: float = Field(1.0, ge=0)
    n_beam: int = Field(4, ge=1)
    r_back_mbps: float = Field(20_000.0, gt=0)
    gamma_min_db: float = 0.0
    tau_max_ms: float = Field(100.0, gt=0)
    doppler_hz: float = 20_000.0
    doppler_mode: DopplerMode = DopplerMode.constant
    upa_nx: int = Field(4, ge=1)
    upa_ny: int = Field(4, ge=1)

    @property
    def f_c(self) -> float:
        return self.f_c_ghz * 1e9

    @property
    def b_tot(self) -> float:
        return self.b_tot_mhz * 1e6

    @property
    def p_max(self) -> float:
        return self.p_max_w

    @property
    def r_back(self) -> float:
        return self.r_back_mbps * 1e6

    @property
    def gamma_min(self) -> float:
        return 10.0 ** (self.gamma_min_db / 10.0)

    @property
    def tau_max(self) -> float:
        return self.tau_max_ms * 1e-3

    @property
    def g_s_lin(self) -> float:
        return 10.0 ** (self.g_s_dbi / 10.0)

    @property
    def g_u_lin(self) -> float:
        return 10.0 ** (self.g_u_dbi / 10.0)

    @property
    def n_antennas(self) -> int:
        return self.upa_nx * self.upa_ny

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.f_c


class EpisodeConfig(BaseModel):
    """Episode dynamics of the allocation environment."""
    num_slots: int = Field(100, ge=1)
    slot_s: float = Field(0.01, gt=0)
    demand_min_mbit: float = Field(1.0, ge=0)
    demand_max_mbit: float = Field(10.0, ge=0)
    association_period: Optional[int] = Field(None, ge=1)  # None: once per episode
    fading_update: FadingUpdate = FadingUpdate.slot

    @model_validator(mode="after")
    def check_demand_range(self):
        if self.demand_max_mbit < self.demand_min_mbit:
            raise ValueError("demand_max_mbit must be >= demand_min_mbit")
        return self


class ScenarioConfig(BaseModel):
    """Full scenario: geometry, radio and episode blocks."""
    constellation: ConstellationConfig = Field(default_factory=ConstellationConfig)
    radio: RadioConfig = Field(default_factory=RadioConfig)
    episode: EpisodeConfig = Field(default_factory=EpisodeConfig)
    area_side_km: float = Field(500.0, gt=0)
    min_elevation_deg: float = Field(10.0, ge=0, le=90)
    rue_count: int = Field(12, ge=0)
    rue_speed_kmh: float = Field(3.0, ge=0)
    num_clusters: int = Field(4, ge=1)
    cluster_capacity: Optional[int] = Field(None, ge=0)  # None: one beam-load (n_beam)
    swap_iteration_cap: Optional[int] = Field(None, ge=1)
    seed: int = 0

    @property
    def min_elevation_rad(self) -> float:
        return math.radians(self.min_elevation_deg)

    @property
    def capacity(self) -> int:
        return self.radio.n_beam if self.cluster_capacity is None else self.cluster_capacity


# Learning -----------------
class PenaltyWeights(BaseModel):
    """Weights of the constraint-violation penalties."""
    c1: float = Field(1.0, ge=0)
    c2: float = Field(1.0, ge=0)
    c8: float = Field(1.0, ge=0)


class WoaConfig(BaseModel):
    """Whale optimization expert settings."""
    population: int = Field(20, ge=2)
    iterations: int = Field(50, ge=0)
    spiral_b: float = 1.0
    penalty_weight: float = Field(10.0, ge=0)
    demonstrations: int = Field(2000, ge=1)


class GailConfig(BaseModel):
    """Adversarial imitation learner settings."""
    hidden: List[int] = Field(default_factory=lambda: [128, 128])
    demo_batch_size: int = Field(1024, ge=1)
    gen_replay_buffer_capacity: int = Field(512, ge=1)
    update_every: int = Field(20, ge=1)  # slots between updates
    gamma: float = Field(0.99, ge=0, lt=1)
    entropy_coef: float = Field(0.01, ge=0)
    max_importance_ratio: float = Field(10.0, ge=1)  # truncation of replayed policy samples
    learning_rate: float = Field(3e-4, gt=0)
    disc_learning_rate: float = Field(3e-4, gt=0)
    episodes: int = Field(200, ge=0)


class PpoConfig(BaseModel):
    """Clipped-surrogate baseline settings."""
    hidden: List[int] = Field(default_factory=lambda: [128, 128])
    clip: float = Field(0.2, gt=0, lt=1)
    epochs: int = Field(64, ge=1)
    minibatch_size: int = Field(64, ge=1)
    rollout_slots: Optional[int] = Field(None, ge=1)  # None: one episode
    gamma: float = Field(0.99, ge=0, lt=1)
    gae_lambda: float = Field(0.95, ge=0, le=1)
    value_coef: float = Field(0.5, ge=0)
    entropy_coef: float = Field(0.0, ge=0)
    learning_rate: float = Field(3e-4, gt=0)
    episodes: int = Field(200, ge=0)
    penalty: PenaltyWeights = Field(default_factory=PenaltyWeights)


class FederationConfig(BaseModel):
    """FedAvg orchestration settings."""
    aggregation_interval: int = Field(5, ge=1)  # episodes between barriers
    weights_mode: WeightsMode = WeightsMode.equal
    participants: Optional[List[int]] = None  # None: every satellite
    aggregate_discriminator: bool = True
    convergence_tol: float = Field(1e-4, ge=0)
    convergence_window: int = Field(3, ge=1)
    max_workers: int = Field(1, ge=1)


class SweepConfig(BaseModel):
    """Sweep axis and grid."""
    axis: SweepAxis = SweepAxis.none
    grid: List[float] = Field(default_factory=lambda: [0.0], min_length=1)


class ExperimentConfig(BaseModel):
    """Complete experiment description."""
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    woa: WoaConfig = Field(default_factory=WoaConfig)
    gail: GailConfig = Field(default_factory=GailConfig)
    ppo: PpoConfig = Field(default_factory=PpoConfig)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    methods: List[Method] = Field(default_factory=lambda: [Method.fairness], min_length=1)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    eval_episodes: int = Field(2, ge=1)
    output_dir: str = "runs"


# Matching instance file -----------------
class MatchInstance(BaseModel):
    """
    Standalone matching instance.
    Scores map cluster id -> satellite id -> channel-gain score; a satellite missing
    from a cluster's map is not visible to it.
    """
    capacities: Dict[int, int]
    gain_scores: Dict[int, Dict[int, float]]
    utilities: Optional[Dict[int, Dict[int, float]]] = None  # swap phase; defaults to gain_scores
    iteration_cap: Optional[int] = Field(None, ge=1)


class MatchResult(BaseModel):
    """Result of a standalone matching run."""
    assignment: Dict[int, Optional[int]]
    proposals: int
    swaps: int


# Snapshots -----------------
class SatelliteRecord(BaseModel):
    """Satellite position and spectrum efficiency in a snapshot."""
    sat_id: int
    plane_index: int
    x_km: float
    y_km: float
    se: float


class ClusterRecord(BaseModel):
    """Cluster membership and its serving satellite."""
    cluster_id: int
    members: List[int]
    centroid: List[float]
    sat_id: Optional[int] = None


class EdgeRecord(BaseModel):
    """One associated satellite-RUE link."""
    sat_id: int
    rue_id: int


class AssociationSnapshot(BaseModel):
    """Association state of one slot."""
    slot: int
    time_s: float
    satellites: List[SatelliteRecord]
    clusters: List[ClusterRecord]
    edges: List[EdgeRecord]


# Run Schemas -----------------
class RunResponse(BaseModel):
    """Schema for a persisted experiment run."""
    id: int
    command: str
    method: Optional[str] = None
    config_hash: str
    seed: int
    status: str
    created_at: datetime

    class Config:
        from_attributes = True


class MetricRowResponse(BaseModel):
    """Schema for one metrics-table row."""
    id: int
    run_id: int
    method: str
    sweep_value: float
    seed: int
    mean_se: float
    mean_reward: float
    c1_violation_rate: float
    c2_violation_rate: float
    c8_violation_rate: float
    episodes_to_convergence: Optional[int] = None

    class Config:
        from_attributes = True


class RoundLogResponse(BaseModel):
    """Schema for one federation round log."""
    id: int
    run_id: int
    round_index: int
    weights: List[float]
    pre_hashes: Dict[str, str]
    post_hash: str
    distance: Optional[float] = None
    duration_s: float

    class Config:
        from_attributes = True


# Federation -----------------
class ParamUpload(BaseModel):
    """Parameters uploaded by one agent at an aggregation barrier."""
    agent_id: int
    params: List[float] = Field(min_length=1)
    samples: int = Field(0, ge=0)


class AggregateRequest(BaseModel):
    """Body of an aggregation request."""
    uploads: List[ParamUpload] = Field(min_length=1)


class AggregateResponse(BaseModel):
    """Aggregated global parameters."""
    params: List[float]
    weights: List[float]
    param_hash: str
