"""Conformal prediction with PAC-Bayes certificates."""
