"""Quantal-response mean-field equilibria for heterogeneous-agent macro models.

The package solves a Bewley-Aiyagari style economy by running a firm/household
fixed-point loop whose household side is approximated with shape-constrained
fitted Q-iteration (Lipschitz-bounded max-affine value surrogates) and whose
policy is an entropy-regularized Gibbs response.
"""

__version__ = "0.1.0"
