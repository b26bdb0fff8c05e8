"""Deep-prior diffraction tomography: forward models, priors and reconstruction."""

__version__ = "0.1.0"
