import contextlib
from pathlib import Path
from typing import Iterator

from sqlalchemy.engine import Engine
from sqlmodel import Session, SQLModel, create_engine

import schema  # noqa: F401  registers RunRecord on the metadata


def make_engine(url: str, echo: bool = False) -> Engine:
    if url.startswith("sqlite:///"):
        Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    return create_engine(url, echo=echo, connect_args={"check_same_thread": False} if url.startswith("sqlite") else {})


def init_db(engine: Engine) -> None:
    SQLModel.metadata.create_all(engine)


@contextlib.contextmanager
def session_scope(engine: Engine) -> Iterator[Session]:
    """Session committed on success and rolled back on error."""
    with Session(engine, expire_on_commit=False) as session:
        try:
            yield session
            session.commit()
        except Exception:
            session.rollback()
            raise
