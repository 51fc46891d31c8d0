"""Synthetic task, training loops, baselines, sweeps and reporting."""
