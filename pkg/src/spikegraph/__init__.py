"""Spiking graph neural networks with spatial-temporal feature normalization."""

__version__ = "0.1.0"
