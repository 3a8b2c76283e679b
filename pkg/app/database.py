import os
from functools import lru_cache
from pathlib import Path
from typing import Optional

from sqlalchemy.engine import Engine
from sqlmodel import Session, SQLModel, create_engine

# Import the table models so they're registered with the metadata
from app.models import ExperimentRow, LedgerRow  # noqa: F401

DEFAULT_OUTPUT_DIR = "cascadelab-out"


def database_url(output_dir: Optional[str | Path] = None) -> str:
    """CASCADELAB_DATABASE_URL, or a SQLite ledger inside the output directory."""
    url = os.environ.get("CASCADELAB_DATABASE_URL")
    if url:
        return url
    return f"sqlite:///{Path(output_dir or DEFAULT_OUTPUT_DIR) / 'ledger.db'}"


@lru_cache(maxsize=None)
def get_engine(url: str) -> Engine:
    return create_engine(url)


def create_tables(url: Optional[str] = None) -> None:
    SQLModel.metadata.create_all(get_engine(url or database_url()))


def get_session(url: Optional[str] = None) -> Session:
    return Session(get_engine(url or database_url()))


def reset_db(url: Optional[str] = None) -> None:
    """Wipe all ledger tables. Use with caution - for testing and fresh campaigns only!"""
    engine = get_engine(url or database_url())
    SQLModel.metadata.drop_all(engine)
    SQLModel.metadata.create_all(engine)
