"""Temporal reward decomposition on finite MDPs: environments, an exact oracle,
reward-vector estimators and learners, and explanation tools."""

__version__ = "0.1.0"
