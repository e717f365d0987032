"""
Database models for the training run registry.

This module defines the schema that records every training run and its
per-epoch ledger, and provides connection setup.
"""

import json
import os
from datetime import datetime, timezone

from dotenv import load_dotenv
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from logger import get_logger

load_dotenv()

logger = get_logger(__name__)

# Database configuration
Base = declarative_base()
DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///runs.db")


class Run(Base):
    """
    One invocation of the trainer.

    Attributes:
        id (int): primary key
        started_at (datetime): UTC start time
        preset (str): dataset preset name
        seed (int): run seed
        config (str): resolved configuration as canonical JSON
        best_mrr (float): best validation MRR, None until an evaluation ran
        best_epoch (int): epoch of best_mrr
        status (str): "running", "finished" or "failed"
    """

    __tablename__ = "runs"
    id = Column(Integer, primary_key=True)
    started_at = Column(DateTime, nullable=False)
    preset = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    config = Column(Text, nullable=False)
    best_mrr = Column(Float)
    best_epoch = Column(Integer)
    status = Column(String, nullable=False, default="running")
    epochs = relationship("EpochRecord", back_populates="run", order_by="EpochRecord.epoch")


class EpochRecord(Base):
    """One ledger row: epoch, mean training loss, validation MRR (if evaluated), lr, seconds."""

    __tablename__ = "epochs"
    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    epoch = Column(Integer, nullable=False)
    loss = Column(Float, nullable=False)
    dev_mrr = Column(Float)
    lr = Column(Float, nullable=False)
    seconds = Column(Float, nullable=False)
    run = relationship("Run", back_populates="epochs")


def init_db(url=None):
    """Create an engine for ``url`` (default DATABASE_URL), create tables, return a session factory."""
    engine = create_engine(url or DATABASE_URL, echo=False)
    Base.metadata.create_all(engine)
    return sessionmaker(bind=engine)


class RunRegistry:
    """
    Records a run and its epochs through one session.

    Args:
        session: SQLAlchemy session
    """

    def __init__(self, session):
        self.session = session
        self.run = None

    def start(self, preset, seed, config):
        self.run = Run(
            started_at=datetime.now(timezone.utc),
            preset=preset,
            seed=seed,
            config=json.dumps(config, sort_keys=True),
            status="running",
        )
        self.session.add(self.run)
        self.session.commit()
        logger.info(f"Registered run {self.run.id}")
        return self.run.id

    def record_epoch(self, row):
        self.session.add(
            EpochRecord(
                run_id=self.run.id,
                epoch=row.epoch,
                loss=row.loss,
                dev_mrr=row.dev_mrr,
                lr=row.lr,
                seconds=row.seconds,
            )
        )
        self.session.commit()

    def finish(self, ledger, status="finished"):
        self.run.best_mrr = ledger.best_mrr
        self.run.best_epoch = ledger.best_epoch
        self.run.status = status
        self.session.commit()
        logger.info(f"Run {self.run.id} {status}")
