"""Synthetic data, training, tracking, persistence and the command line."""
