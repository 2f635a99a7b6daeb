import os
from datetime import datetime

from sqlalchemy import create_engine, Column, Integer, String, Text, Boolean, DateTime
from sqlalchemy.orm import declarative_base, sessionmaker

SQLALCHEMY_DATABASE_URL = os.environ.get("COLLIDER_DATABASE_URL", "sqlite:///./collider.db")

connect_args = {"check_same_thread": False} if SQLALCHEMY_DATABASE_URL.startswith("sqlite") else {}
engine = create_engine(SQLALCHEMY_DATABASE_URL, connect_args=connect_args)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


class ExperimentRun(Base):
    """One completed experiment run and where its outputs went."""

    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, nullable=False, index=True)
    name = Column(String, nullable=False)
    config_hash = Column(String(64), nullable=False, index=True)
    library_version = Column(String)
    passed = Column(Boolean, nullable=False)
    output_dir = Column(String)
    summary_json = Column(Text)  # JSON-encoded result document
    created_at = Column(DateTime, default=datetime.utcnow)


def init_db():
    Base.metadata.create_all(bind=engine)


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
