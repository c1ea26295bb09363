"""Checkpoint-to-container exporter with reference activation bundles."""

from .export import DEFAULT_CIRCUITS, ExportSpec, emit_reference, export
from .mapping import MappingError

__version__ = "0.1.0"

__all__ = ["DEFAULT_CIRCUITS", "ExportSpec", "MappingError", "emit_reference", "export"]
