"""Fitting toolkit for prostate diffusion MRI: DKI and VERDICT via NLLS and self-supervised MLPs."""

__version__ = "0.1.0"
