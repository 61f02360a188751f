"""State space LSTM (SSL) sequence models.

Latent-state sequence models whose transition is an LSTM over previous
latent states and whose emission is probabilistic (Gaussian or topical).
Training is stochastic EM: the sampling step draws latent paths with
particle Gibbs (conditional SMC), the M step fits the LSTM by gradient
descent and the emission in closed form.
"""

__version__ = "0.1.0"

from sslstm.numerics import GaussianDist, NumericalError, Rng

__all__ = ["GaussianDist", "NumericalError", "Rng", "__version__"]
