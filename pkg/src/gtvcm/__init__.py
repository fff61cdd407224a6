"""Bayesian varying-coefficient mixed model for group-testing data."""

__version__ = "0.1.0"
