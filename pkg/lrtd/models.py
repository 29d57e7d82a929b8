from sqlalchemy import Column, Integer, String, DateTime, Text, Float, func, ForeignKey
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    run_dir = Column(String(500), nullable=False)
    command = Column(String(50), nullable=False)  # e.g., "calibrate", "sweep"
    seed = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=True)
    fingerprint = Column(String(64), nullable=True)  # sampler fingerprint when one applies
    status = Column(String(20), nullable=False, default="running")  # "running", "succeeded", "failed"
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, default=func.now())
    updated_at = Column(DateTime, default=func.now(), onupdate=func.now())

    # Relationship to sweep points
    sweep_points = relationship("SweepPoint", back_populates="run", cascade="all, delete-orphan")


class SweepPoint(Base):
    __tablename__ = "sweep_points"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    method = Column(String(50), nullable=False, default="lrt")  # e.g., "lrt", "qg", "gate-closed"
    alpha = Column(Float, nullable=True)
    tau_hat = Column(Float, nullable=True)
    return_mean = Column(Float, nullable=False)
    return_se = Column(Float, nullable=False)
    type1 = Column(Float, nullable=True)
    ood = Column(Float, nullable=True)
    created_at = Column(DateTime, default=func.now())

    # Relationship to run
    run = relationship("Run", back_populates="sweep_points")
