"""Batch figure generation from lsor harness CSV/JSON output."""

from .render import MissingColumnError, PlotSpec, load_trajectories, render

__version__ = "0.1.0"
