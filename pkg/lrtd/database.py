from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional
import logging

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

from .config import get_settings
from .models import Base

logger = logging.getLogger(__name__)


def sqlite_url(run_dir) -> str:
    return f"sqlite:///{Path(run_dir) / 'runs.db'}"


def create_database_engine(run_dir, url: Optional[str] = None) -> Engine:
    """Create the run-ledger engine, falling back to a SQLite file in the run directory."""
    url = url or get_settings().database_url

    if url:
        try:
            logger.info("Attempting to connect to the configured ledger database...")
            engine = create_engine(url)
            # Test the connection
            connection = engine.connect()
            connection.close()
            logger.info("✅ Connected to configured ledger database")
            return engine
        except Exception as e:
            logger.warning(f"❌ Ledger database connection failed: {e}")
            logger.info("Falling back to SQLite in the run directory...")

    try:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        engine = create_engine(sqlite_url(run_dir), connect_args={"check_same_thread": False})
        connection = engine.connect()
        connection.close()
        logger.debug(f"Connected to SQLite ledger at {sqlite_url(run_dir)}")
        return engine
    except Exception as sqlite_error:
        logger.error(f"❌ SQLite ledger connection also failed: {sqlite_error}")
        raise sqlite_error


def init_ledger(run_dir, url: Optional[str] = None) -> sessionmaker:
    engine = create_database_engine(run_dir, url)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@contextmanager
def ledger_session(run_dir, url: Optional[str] = None) -> Iterator[Session]:
    SessionLocal = init_ledger(run_dir, url)
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
