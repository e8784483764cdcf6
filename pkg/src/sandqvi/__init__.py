"""Quasi-variational sweeping process toolkit."""
