"""Latent-geometry active learning.

Importance-weighted autoencoders with radial-basis precision heads, the
pullback Riemannian metric of the decoder, geodesics in latent space,
and active-learning loops that query demonstrations where the metric
says the model is ignorant.

Kept import-light on purpose: submodules pull in numpy, this module
does not, so the command-line front end can pin threading environment
variables before any numerical library loads.
"""

__version__ = "0.1.0"

__all__ = [
    "tape",
    "network",
    "optim",
    "model",
    "training",
    "geometry",
    "datasets",
    "active",
    "bundle",
    "config",
    "errors",
]
