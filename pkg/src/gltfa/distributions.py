"""Random variate helpers on top of a numpy Generator.

Conventions: Gamma(shape a, rate b) has mean a/b; InvGamma(c, C) has
density proportional to x^(-c-1) exp(-C/x); F(2a, 2c) is represented as
the Gamma scale mixture  X | b ~ InvGamma(c, b), b ~ Gamma(a, rate a/c).
"""

from __future__ import annotations

import numpy as np
from scipy import stats

__all__ = ["gamma_rate", "inv_gamma", "f_scale_mixture", "gig", "log_gamma_pdf"]


def gamma_rate(rng, shape, rate, size=None):
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=np.float64), size=size)


def inv_gamma(rng, shape, scale, size=None):
    """Draw from InvGamma(shape, scale); scale is the numerator parameter."""
    scale = np.asarray(scale, dtype=np.float64)
    if size is None and scale.shape:
        size = scale.shape
    g = rng.gamma(shape, 1.0, size=size)
    return scale / g


def f_scale_mixture(rng, a, c, size=None):
    """Draw X ~ F(2a, 2c) together with its Gamma auxiliary b.

    Returns (x, b) with b ~ Gamma(a, rate a/c) and x | b ~ InvGamma(c, b).
    """
    b = gamma_rate(rng, a, a / c, size=size)
    x = inv_gamma(rng, c, b)
    return x, b


def gig(rng, p, a, b):
    """One draw from the generalized inverse Gaussian GIG(p, a, b), a, b > 0.

    Density proportional to x^(p-1) exp(-(a x + b / x) / 2).
    """
    if a <= 0 or b <= 0:
        raise ValueError("GIG requires a > 0 and b > 0")
    # scipy's two-parameter form: x^(p-1) exp(-beta (x + 1/x) / 2) with
    # beta = sqrt(a b); rescaling by sqrt(b / a) gives the general law.
    beta = np.sqrt(a * b)
    return float(stats.geninvgauss.rvs(p, beta, scale=np.sqrt(b / a), random_state=rng))


def log_gamma_pdf(x, shape, rate):
    """Log density of Gamma(shape, rate) at x > 0."""
    from scipy.special import gammaln
    x = np.asarray(x, dtype=np.float64)
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
