"""Solver workbench for degenerate-elliptic boundary-value and obstacle problems."""
