"""Robust covariance estimation from incomplete data.

EM estimators for the mixture-of-scaled-Gaussian model (full-rank and
low-rank), baselines, synthetic experiment generators, robust low-rank
imputation and SPD-manifold classification / clustering.
"""

__version__ = "0.1.0"
