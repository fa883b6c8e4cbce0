import os
from pathlib import Path

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

# SQLite registry of the artifacts a run directory holds
DATABASE_FILENAME = "registry.db"

SessionLocal = sessionmaker(autocommit=False, autoflush=False)

Base = declarative_base()


def database_url(output_dir) -> str:
    url = os.getenv("UNICON_DATABASE_URL")
    if url:
        return url
    return f"sqlite:///{Path(output_dir) / DATABASE_FILENAME}"


def init_db(url: str):
    """Create the engine and tables and bind the session factory to it."""
    if url.startswith("sqlite:///"):
        Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(url, connect_args={"check_same_thread": False} if url.startswith("sqlite") else {})
    # Models must be imported before create_all
    from .models import artifact  # noqa: F401

    Base.metadata.create_all(bind=engine)
    SessionLocal.configure(bind=engine)
    return engine


# Session generator; `bind` selects a registry other than the last initialized one
def get_db(bind=None):
    db = SessionLocal(bind=bind) if bind is not None else SessionLocal()
    try:
        yield db
    finally:
        db.close()
