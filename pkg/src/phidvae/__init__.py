"""Physics-informed dynamical variational autoencoder.

Embeds high-dimensional observation sequences into pseudo-observations of a
stochastic latent physics model, filtered with an extended Kalman filter, and
learns the embedding and the physical parameters by maximising an evidence
lower bound.
"""

__version__ = "0.1.0"
