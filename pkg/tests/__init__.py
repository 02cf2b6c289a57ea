"""
Test suite for the dynkin_vi solver.
"""
