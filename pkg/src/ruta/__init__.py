"""Ruta: SRoU overlay routing stack over a deterministic virtual-clock simulator."""

__version__ = "0.1.0"
