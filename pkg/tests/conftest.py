import numpy as np
import pytest

from skewvi.families import NoiseDraw
from skewvi.sparse_graph import SparsityPattern, UnitLowerSparse, build_pattern


class GaussianTarget:
    """Normalized multivariate Gaussian target with optional log-evidence
    offset; gradients support (p,) and (p, m) input."""

    def __init__(self, mean, prec_chol, log_c=0.0, markov_order=0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.A = np.atleast_2d(np.asarray(prec_chol, dtype=float))  # Q = A A^T
        self.p = len(self.mean)
        self.log_c = float(log_c)
        self.pattern = build_pattern(self.p, [1] * self.p, 0, markov_order)
        self.Q = self.A @ self.A.T
        sign, logdet = np.linalg.slogdet(self.Q)
        self._norm = -0.5 * self.p * np.log(2 * np.pi) + 0.5 * logdet

    def log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        diff = theta - (self.mean[:, None] if theta.ndim == 2 else self.mean)
        quad = np.sum((self.A.T @ diff) ** 2, axis=0)
        out = self.log_c + self._norm - 0.5 * quad
        return out if theta.ndim == 2 else float(out)

    def grad_log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        diff = theta - (self.mean[:, None] if theta.ndim == 2 else self.mean)
        return -self.Q @ diff

    def describe(self):
        return {"kind": "gaussian-test", "mean": self.mean.tolist(),
                "A": self.A.tolist(), "log_c": self.log_c}


def random_pattern(rng, max_p=12):
    """Random small block pattern of either markov order."""
    order = int(rng.integers(0, 2))
    n_blocks = int(rng.integers(2, 5))
    dims = rng.integers(1, 3, size=n_blocks).tolist()
    global_dim = int(rng.integers(0, 3))
    if sum(dims) + global_dim == 0:
        global_dim = 1
    pat = build_pattern(n_blocks, dims, global_dim, order)
    assert pat.total_dim <= max_p + 4
    return pat


def random_params(family, pattern, rng, scale=0.3):
    params = family.init_params(pattern)
    blocks = family.get_blocks(params)
    for name in blocks:
        blocks[name] = blocks[name] + scale * rng.standard_normal(blocks[name].shape)
    return family.with_blocks(params, blocks)


def jvp_fd(family, params, noise, z, eps=1e-5):
    """Finite differences of z . theta(params; noise) per block coordinate."""
    blocks = family.get_blocks(params)
    out = {}
    for name, arr in blocks.items():
        g = np.zeros_like(arr)
        gflat = g.reshape(-1)
        for i in range(arr.size):
            for s, sgn in ((eps, 1.0), (-eps, -1.0)):
                b2 = {k: v.copy() for k, v in blocks.items()}
                b2[name].reshape(-1)[i] += s
                theta = family.sample(family.with_blocks(params, b2), noise)
                gflat[i] += sgn * float(z @ theta) / (2 * eps)
        out[name] = g
    return out


def max_rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
