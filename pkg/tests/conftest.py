"""
Shared fixtures: desk-sized scenarios, small learner settings, an in-memory database and an
API client bound to it.
"""

import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from app import models  # noqa: F401  registers the tables
from app.database import Base
from app.dependencies import get_db
from app.main import app
from app.schemas import (
    ConstellationConfig,
    EpisodeConfig,
    ExperimentConfig,
    FederationConfig,
    GailConfig,
    PpoConfig,
    RadioConfig,
    ScenarioConfig,
    WoaConfig,
)


def make_scenario(num_sats: int = 2, rue_count: int = 4, num_clusters: int = 2, n_beam: int = 2,
                  num_slots: int = 4, **overrides) -> ScenarioConfig:
    """Scenario on a 200 km area where every RUE sees every satellite."""
    return ScenarioConfig(
        constellation=ConstellationConfig(num_planes=1, sats_per_plane=num_sats, spacing_km=100.0),
        radio=RadioConfig(n_beam=n_beam, upa_nx=2, upa_ny=2),
        episode=EpisodeConfig(num_slots=num_slots),
        area_side_km=200.0,
        rue_count=rue_count,
        num_clusters=num_clusters,
        **overrides,
    )


@pytest.fixture
def scenario() -> ScenarioConfig:
    return make_scenario()


@pytest.fixture
def single_sat_scenario() -> ScenarioConfig:
    return make_scenario(num_sats=1, rue_count=2, num_clusters=1)


@pytest.fixture
def woa_config() -> WoaConfig:
    return WoaConfig(population=4, iterations=3, demonstrations=8)


@pytest.fixture
def gail_config() -> GailConfig:
    return GailConfig(hidden=[8], demo_batch_size=8, gen_replay_buffer_capacity=32, update_every=2,
                      learning_rate=1e-3, disc_learning_rate=1e-3, episodes=2)


@pytest.fixture
def ppo_config() -> PpoConfig:
    return PpoConfig(hidden=[8], epochs=2, minibatch_size=4, episodes=2, learning_rate=1e-3)


@pytest.fixture
def experiment_config(scenario, woa_config, gail_config, ppo_config, tmp_path) -> ExperimentConfig:
    return ExperimentConfig(
        scenario=scenario,
        woa=woa_config,
        gail=gail_config,
        ppo=ppo_config,
        federation=FederationConfig(aggregation_interval=1, convergence_tol=0.0),
        seeds=[0],
        eval_episodes=1,
        output_dir=str(tmp_path / "out"),
    )


@pytest.fixture
def db_engine():
    engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
    Base.metadata.create_all(engine)
    yield engine
    Base.metadata.drop_all(engine)


@pytest.fixture
def db_session(db_engine):
    session = sessionmaker(autocommit=False, autoflush=False, bind=db_engine)()
    try:
        yield session
    finally:
        session.close()


@pytest.fixture
def client(db_engine):
    TestingSession = sessionmaker(autocommit=False, autoflush=False, bind=db_engine)

    def override_get_db():
        db = TestingSession()
        try:
            yield db
        finally:
            db.close()

    app.dependency_overrides[get_db] = override_get_db
    with TestClient(app) as c:
        yield c
    app.dependency_overrides.clear()
