import os
import sys

import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

# Add project root (the folder containing 'vpgo/') to sys.path for imports like 'from vpgo import ...'
PROJECT_ROOT = os.path.abspath(os.path.dirname(os.path.dirname(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from vpgo import records  # noqa: E402,F401
from vpgo.data import generate_synthetic  # noqa: E402
from vpgo.database import Base, get_db  # noqa: E402
from vpgo.main import app  # noqa: E402
from vpgo.schemas import ModelConfig, SceneConfig  # noqa: E402

# Test database setup - use in-memory SQLite for tests
TEST_DATABASE_URL = "sqlite:///:memory:"


@pytest.fixture(scope="function")
def test_db():
    """Create a fresh test database for each test."""
    engine = create_engine(
        TEST_DATABASE_URL,
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )

    Base.metadata.create_all(bind=engine)
    TestSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    db = TestSessionLocal()

    try:
        yield db
    finally:
        db.close()
        Base.metadata.drop_all(bind=engine)


@pytest.fixture
def client(test_db):
    """Create a test client with overridden database dependency."""
    def override_get_db():
        try:
            yield test_db
        finally:
            pass

    app.dependency_overrides[get_db] = override_get_db

    with TestClient(app) as test_client:
        yield test_client

    app.dependency_overrides.clear()


@pytest.fixture
def tiny_model_cfg():
    """Narrow VGG19 model on 48x64 frames; builds and steps in well under a second."""
    return ModelConfig(
        encoder_variant="vgg19_conv4_4",
        channel_scale=0.125,
        feature_channels=16,
        latent_channels=2,
        lstm_hidden=16,
    )


@pytest.fixture
def micro_model_cfg():
    return ModelConfig(
        encoder_variant="micro",
        frame_size=(8, 8),
        feature_channels=4,
        latent_channels=1,
        lstm_hidden=4,
    )


@pytest.fixture
def scene_cfg():
    return SceneConfig()


@pytest.fixture(scope="session")
def synthetic_trajectories():
    """Four seeded 14-frame grasp episodes."""
    return generate_synthetic(seed=0, n_traj=4, T=14)
