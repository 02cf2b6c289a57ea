"""Penalized variational-inequality solvers for optimal stopping and Dynkin games."""
