"""Categorical data fusion with a truncated Dirichlet-process latent class model and glue data."""

__version__ = "0.1.0"
