"""rnvc: a desk-scale recurrent neural video codec.

Recurrent autoencoders compress motion and residual signals, a recurrent
prior predicts per-element discretized-logistic PMFs from the latent
history, and a range coder turns those PMFs into a bit-exact stream.
"""

__version__ = "0.1.0"
