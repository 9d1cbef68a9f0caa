from typing import Any, Dict

from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from shockadjoint.data.database_config import Base


class ExperimentRun(Base):
    """
    One CLI invocation: subcommand, config fingerprint and outcome.
    """
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True, index=True)
    subcommand = Column(String(50), nullable=False)
    model = Column(String(50), nullable=False)
    config_hash = Column(String(64), nullable=False, index=True)
    output_dir = Column(Text, nullable=False)
    status = Column(String(20), default='running')
    exit_code = Column(Integer)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    completed_at = Column(DateTime(timezone=True))
    total_wall_clock = Column(Float)

    # Relationships
    stages = relationship("StageResult", back_populates="run", cascade="all, delete-orphan")
    files = relationship("OutputFile", back_populates="run", cascade="all, delete-orphan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'subcommand': self.subcommand,
            'model': self.model,
            'config_hash': self.config_hash,
            'output_dir': self.output_dir,
            'status': self.status,
            'exit_code': self.exit_code,
            'created_at': self.created_at.isoformat() if self.created_at else None,
            'completed_at': self.completed_at.isoformat() if self.completed_at else None,
            'total_wall_clock': self.total_wall_clock,
        }


class StageResult(Base):
    """
    Outcome of one pipeline stage within a run.
    """
    __tablename__ = 'stage_results'

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False)
    stage_name = Column(String(50), nullable=False)
    status = Column(String(20), nullable=False)
    wall_clock = Column(Float)
    payload = Column(JSON)
    error_message = Column(Text)
    created_at = Column(DateTime(timezone=True), server_default=func.now())

    run = relationship("ExperimentRun", back_populates="stages")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'run_id': self.run_id,
            'stage_name': self.stage_name,
            'status': self.status,
            'wall_clock': self.wall_clock,
            'payload': self.payload,
            'error_message': self.error_message,
        }


class OutputFile(Base):
    __tablename__ = 'output_files'

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False)
    path = Column(Text, nullable=False)
    sha256 = Column(String(64), nullable=False)

    run = relationship("ExperimentRun", back_populates="files")

    def to_dict(self) -> Dict[str, Any]:
        return {'id': self.id, 'run_id': self.run_id, 'path': self.path, 'sha256': self.sha256}
