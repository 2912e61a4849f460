"""Recovery of latent variables with degenerate Gaussian mixture structure.

Latent vectors follow a mixture of (possibly singular-covariance) Gaussians
and are observed through an invertible piecewise-affine map.  The package
provides the synthetic benchmark generator, a two-stage autoencoder trainer
(reconstruction + Gaussian prior, then sparsity-constrained refinement), the
mixture algebra with assumption checkers, and the R2/MCC evaluation protocol.
"""

from degmm.numerics import RngStream

__all__ = ["RngStream"]
__version__ = "0.1.0"
