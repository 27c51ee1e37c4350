"""
backend/db/session.py
---------------------
Engine and session factory for the experiment run registry.
The URL comes from ope_pipeline.settings (DATABASE_URL, sqlite by default).
"""

from typing import Iterator

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from ope_pipeline import settings

# ---------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------
_is_sqlite = settings.DATABASE_URL.startswith("sqlite")

# request handlers and background tasks share sqlite connections across threads
engine = create_engine(
    settings.DATABASE_URL,
    pool_pre_ping=True,
    future=True,
    connect_args={"check_same_thread": False} if _is_sqlite else {},
)
SessionLocal = sessionmaker(bind=engine, autoflush=False, autocommit=False, future=True)

Base = declarative_base()


def init_db() -> None:
    """Create the registry tables on first use."""
    from backend.db import models  # noqa: F401

    Base.metadata.create_all(bind=engine)


def get_db() -> Iterator[Session]:
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
