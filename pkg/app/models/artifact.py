from datetime import datetime

from sqlalchemy import Column, DateTime, ForeignKey, Integer, String
from sqlalchemy.orm import relationship

from ..database import Base


class PipelineRun(Base):
    __tablename__ = "pipeline_runs"

    id = Column(Integer, primary_key=True, index=True)
    stage = Column(String, index=True)  # CLI subcommand
    config_hash = Column(String, index=True)
    seed = Column(Integer)
    started_at = Column(DateTime, default=datetime.utcnow)

    artifacts = relationship("Artifact", back_populates="run")


class Artifact(Base):
    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String, unique=True, index=True)  # file name inside the output directory
    stage = Column(String)
    sha256 = Column(String)
    config_hash = Column(String, index=True)
    run_id = Column(Integer, ForeignKey("pipeline_runs.id"))
    recorded_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("PipelineRun", back_populates="artifacts")
