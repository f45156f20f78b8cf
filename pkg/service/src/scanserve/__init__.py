"""Reference HTTP scan service for exercising remote-oracle clients."""

from .models import ByteMean, ModelError, NameBlocklist, parse_model_spec, scan_section_names
from .server import BindError, RunningService, ServiceConfig, serve

__all__ = [
    "BindError",
    "ByteMean",
    "ModelError",
    "NameBlocklist",
    "RunningService",
    "ServiceConfig",
    "parse_model_spec",
    "scan_section_names",
    "serve",
]
