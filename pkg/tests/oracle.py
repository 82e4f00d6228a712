"""Brute-force reference implementations used only by the tests.

Nothing here imports from ``bayestf``: every routine works on dense numpy
arrays so agreement with the fast paths is evidence rather than tautology.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class DenseGaussianSpec:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        n = self.mean.shape[0]
        if self.covariance.shape != (n, n):
            raise ValueError("covariance shape does not match mean")
        np.linalg.cholesky(self.covariance)

    def logpdf(self, x):
        x = np.atleast_2d(x)
        diff = x - self.mean
        prec = np.linalg.inv(self.covariance)
        _, logdet = np.linalg.slogdet(self.covariance)
        n = self.mean.shape[0]
        quad = np.einsum("ij,jk,ik->i", diff, prec, diff)
        return -0.5 * (quad + logdet + n * np.log(2 * np.pi))


def dense_solve(X, lam, rhs):
    """Solve ``(X^T X + lam I) B = rhs`` by dense Cholesky."""
    X = np.asarray(X, dtype=float)
    K = X.T @ X + lam * np.eye(X.shape[1])
    L = np.linalg.cholesky(K)
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def link_posterior(X, U, Lambda, lam):
    """Closed-form Gaussian of vec(beta^T) (F*D, column-major over D).

    Returns ``(mean F x D, covariance (F*D) x (F*D))`` where the covariance
    is ``Lambda^{-1} kron K^{-1}`` for ``K = X^T X + lam I``.
    """
    X = np.asarray(X, dtype=float)
    K = X.T @ X + lam * np.eye(X.shape[1])
    Kinv = np.linalg.inv(K)
    mean = Kinv @ X.T @ U
    cov = np.kron(np.linalg.inv(Lambda), Kinv)
    return mean, cov


def direct_link_sample(X, U, Lambda, lam, rng):
    """Exact draw of the D x F link matrix from its matrix-normal conditional.

    Row covariance (over features) is ``K^{-1}``, column covariance (over
    latent dimensions) is ``Lambda^{-1}``.
    """
    X = np.asarray(X, dtype=float)
    F = X.shape[1]
    D = Lambda.shape[0]
    K = X.T @ X + lam * np.eye(F)
    Lk = np.linalg.cholesky(K)
    mean = np.linalg.solve(K, X.T @ U)
    Z = rng.standard_normal((F, D))
    row_part = np.linalg.solve(Lk.T, Z)  # cov K^{-1}
    Lc = np.linalg.cholesky(np.linalg.inv(Lambda))
    return (mean + row_part @ Lc.T).T


def grid_posterior_density(prior_mean, prior_precision, observations, alpha, grid):
    """Normalized posterior density of one latent vector evaluated on a grid.

    ``observations`` is a list of ``(q, y)`` pairs where ``q`` is the product
    of the other modes' latent vectors for that cell and ``y`` its value.
    ``grid`` is a sequence of 1-D axes (one per latent dimension, D <= 2).

    Returns ``(points, log_density)`` with ``points`` of shape (G, D); the
    log-density is normalized with a Riemann sum over the grid cells.
    """
    axes = [np.asarray(a, dtype=float) for a in grid]
    D = len(axes)
    if D > 2:
        raise ValueError("grid oracle supports D <= 2")
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    mu = np.asarray(prior_mean, dtype=float)
    P = np.asarray(prior_precision, dtype=float)
    logp = np.zeros(points.shape[0])
    for g in range(points.shape[0]):
        x = points[g]
        d = x - mu
        val = -0.5 * d @ P @ d
        for q, y in observations:
            pred = float(np.dot(q, x))
            val += -0.5 * alpha * (y - pred) ** 2
        logp[g] = val
    cell = np.prod([a[1] - a[0] for a in axes])
    shift = logp.max()
    logp = logp - shift - np.log(np.exp(logp - shift).sum() * cell)
    return points, logp


def gamma_moments(shape, rate):
    return shape / rate, shape / rate**2


def random_sparse_dense(rng, n, f, density=0.3):
    """Dense array with roughly ``density`` nonzeros, for oracle comparisons."""
    mask = rng.random((n, f)) < density
    return np.where(mask, rng.standard_normal((n, f)), 0.0)
