"""Tabular offline RL laboratory for single-step, chunked and chunk-guided value backups."""

__version__ = "0.1.0"
