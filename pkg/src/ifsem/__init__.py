"""Fit iterated function systems to point clouds by expectation-maximization."""
