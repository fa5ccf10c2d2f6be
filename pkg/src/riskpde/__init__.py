"""Risk-averse boundary control of a heat-equation/SDE interconnection.

The toolkit reduces the coupled system to a finite linear SDE by spectral
Galerkin projection, computes a mean-optimal feedback gain from a
generalized Riccati equation, and improves the tail of the cost
distribution by projected gradient descent-ascent on CVaR.
"""

__version__ = "0.1.0"
