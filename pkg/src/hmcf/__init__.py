"""Horizontal mean curvature flow in sub-Riemannian geometries.

Curvature formulas, a level-set finite-difference solver and a controlled
diffusion Monte Carlo estimator, plus tools to compare them.
"""
__version__ = "0.1.0"
