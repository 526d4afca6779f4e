"""Datasets, training loop, experiments and the command-line interface."""
