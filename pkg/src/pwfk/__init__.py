"""Differentiable plane-wave ultrasound imaging with Stolt f-k migration."""

__version__ = "0.1.0"

from .core import (AcquisitionParams, BeamformedImage, DataSample, ProbeGeometry, RFFrame,
                   ValidationError, normalize_rf, read_container, steering_angles,
                   write_container)
from .migration import MigrationPlan, compound, migrate, migrate_adjoint, migrate_array
from .processing import ProcessingConfig, bmode

__all__ = [
    "AcquisitionParams", "BeamformedImage", "DataSample", "ProbeGeometry", "RFFrame",
    "ValidationError", "normalize_rf", "read_container", "steering_angles", "write_container",
    "MigrationPlan", "compound", "migrate", "migrate_adjoint", "migrate_array",
    "ProcessingConfig", "bmode",
]
