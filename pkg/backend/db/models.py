# backend/db/models.py
"""SQLAlchemy ORM models for the experiment run registry"""

from sqlalchemy import Column, Integer, String, Text, ForeignKey, DateTime
from sqlalchemy.sql import func
from backend.db.session import Base


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"
    run_id = Column(Integer, primary_key=True, index=True)
    kind = Column(String(32), nullable=False, index=True)  # ope, adversarial, batch-opt, ci-sweep, ...
    env = Column(String(16), nullable=False)
    source = Column(String(8), default="cli")  # cli, api
    status = Column(String(16), default="running")  # running, ok, error
    config_json = Column(Text, nullable=False)
    result_json = Column(Text, nullable=True)
    output_path = Column(String(512), nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    finished_at = Column(DateTime(timezone=True), nullable=True)


class RunLog(Base):
    __tablename__ = "run_logs"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.run_id", ondelete="CASCADE"), nullable=False, index=True)
    level = Column(String(16), default="INFO")
    message = Column(Text, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
