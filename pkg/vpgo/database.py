"""Run registry database configuration and session management."""
import os

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

# Registry URL from environment or default to a local SQLite file
DATABASE_URL = os.getenv("VPGO_DATABASE_URL", "sqlite:///./vpgo_runs.db")

# Handle PostgreSQL URL format for SQLAlchemy 1.4+
if DATABASE_URL.startswith("postgres://"):  # pragma: no cover
    DATABASE_URL = DATABASE_URL.replace("postgres://", "postgresql://", 1)

Base = declarative_base()


def make_engine(url: str):
    return create_engine(url, connect_args={"check_same_thread": False} if url.startswith("sqlite") else {})


def make_session_factory(url: str = DATABASE_URL, create_tables: bool = True) -> sessionmaker:
    """Session factory bound to `url`; creates the tables when asked."""
    engine = make_engine(url)
    if create_tables:
        # Import registers the ORM classes on Base
        from vpgo import records  # noqa: F401
        Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


engine = make_engine(DATABASE_URL)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def get_db():  # pragma: no cover
    """Dependency to get database session."""
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
