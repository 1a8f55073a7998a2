"""Propose heterogeneous-effect subgroups on observational data, test them on experimental data."""

__version__ = "0.1.0"
