from contextlib import contextmanager
from typing import Optional
import logging

from sqlalchemy import create_engine, text
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

# Base class for models
Base = declarative_base()

# Session factory, bound by configure_database once the output directory is known
SessionLocal = sessionmaker(autocommit=False, autoflush=False)
engine: Optional[Engine] = None


def configure_database(database_url: str) -> Engine:
    """
    Bind the session factory to the ledger database and create missing tables.
    """
    global engine
    if engine is not None:
        engine.dispose()
    engine = create_engine(database_url, pool_pre_ping=True, echo=False)
    SessionLocal.configure(bind=engine)
    Base.metadata.create_all(bind=engine)
    logger.debug(f"Ledger database bound to {database_url}")
    return engine


def get_db_session():
    """
    Get a database session.
    """
    if engine is None:
        raise RuntimeError("ledger database not configured")
    return SessionLocal()


def close_db_session(session):
    """
    Close a database session properly.
    """
    try:
        session.close()
    except Exception as e:
        logger.error(f"Error closing database session: {str(e)}")


@contextmanager
def db_session():
    session = get_db_session()
    try:
        yield session
    finally:
        close_db_session(session)


def test_connection() -> bool:
    """
    Test database connection.
    Returns True if successful, False otherwise.
    """
    try:
        with db_session() as session:
            session.execute(text("SELECT 1"))
        logger.debug("Ledger database connection successful")
        return True
    except Exception as e:
        logger.error(f"Ledger database connection failed: {str(e)}")
        return False
