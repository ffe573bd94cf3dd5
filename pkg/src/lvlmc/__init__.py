"""Locally varying linear model of coregionalization.

Local correlation inference on scattered multivariate data, Frechet-mean
interpolation of correlation matrices and turning-bands co-simulation.
"""

__version__ = "0.1.0"
