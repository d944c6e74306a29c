"""Shared test oracles: scalar reference implementations and finite differences."""

import math

import numpy as np


def mls_reference(mu_a, sigma2_a, mu_b, sigma2_b) -> float:
    """Independent per-dimension evaluation of the mutual likelihood score."""
    total = 0.0
    d = len(mu_a)
    for l in range(d):
        s = sigma2_a[l] + sigma2_b[l]
        total += (mu_a[l] - mu_b[l]) ** 2 / s + math.log(s)
    return -0.5 * total - 0.5 * d * math.log(2.0 * math.pi)


def central_difference(fn, x, step=1e-5):
    """Central finite-difference gradient of a scalar function of a 1-D array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * step)
    return grad


def assert_grad_close(analytic, numeric, rtol, context=""):
    """Elementwise |a - n| <= rtol * max(1, |a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / scale
    worst = float(err.max()) if err.size else 0.0
    assert worst < rtol, f"gradient mismatch {context}: max relative error {worst:.3e} >= {rtol:g}"


def random_rep_arrays(rng, dim, sigma_lo=0.1, sigma_hi=3.0):
    mu = rng.normal(0.0, 2.0, size=dim)
    sigma2 = rng.uniform(sigma_lo, sigma_hi, size=dim)
    return mu, sigma2
