"""Small dense linear algebra, log-domain arithmetic, and seeded randomness.

Everything downstream (LSTM, messages, particle sweeps) funnels its floating
point and random-number needs through this module.  All arrays are float64;
per-step likelihoods are kept in log domain because products over a sequence
underflow linearly in its length.
"""

import zlib

import numpy as np
from scipy.linalg import solve_triangular

LOG_TWO_PI = float(np.log(2.0 * np.pi))

# Escalating diagonal jitter applied before declaring a matrix non-PD.
# Learned covariances can be marginally indefinite from roundoff alone.
CHOLESKY_JITTERS = (0.0, 1e-10, 1e-8)


class NumericalError(RuntimeError):
    """A numerical operation failed (non-PD matrix, particle collapse, ...)."""


class Rng:
    """Seeded random stream, splittable into independent substreams.

    Wraps a counter-based Philox generator so that a given seed yields a
    bit-exact draw sequence, and substreams obtained from ``split`` or
    ``stream`` are independent of each other and of the parent.
    """

    def __init__(self, seed=0, _seq=None):
        self._seq = np.random.SeedSequence(seed) if _seq is None else _seq
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n):
        """Return ``n`` independent child streams (order is deterministic)."""
        return [Rng(_seq=s) for s in self._seq.spawn(n)]

    def stream(self, name):
        """Named substream, e.g. ``rng.stream("sstep")``.

        The same (seed, name) pair always maps to the same stream, regardless
        of how many anonymous splits happened in between.
        """
        key = zlib.crc32(name.encode("utf-8"))
        seq = np.random.SeedSequence(
            entropy=self._seq.entropy, spawn_key=self._seq.spawn_key + (key,)
        )
        return Rng(_seq=seq)

    def uniform(self, size=None):
        return self.gen.uniform(size=size)

    def standard_normal(self, size=None):
        return self.gen.standard_normal(size=size)


def log_sum_exp(values):
    """log(sum(exp(values))) with max-subtraction; -inf iff all inputs are -inf."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        v = np.ravel(v)
    if v.size == 0:
        raise ValueError("empty reduction")
    m = np.max(v)
    if not np.isfinite(m):
        if m == -np.inf:
            return -np.inf
        raise ValueError("log_sum_exp input contains +inf or nan")
    return float(m + np.log(np.sum(np.exp(v - m))))


def softmax(logits):
    """Numerically stable softmax along the last axis.

    Output rows are positive and sum to 1; invariant under adding a constant
    to every logit.
    """
    x = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def chol_pd(mat):
    """Cholesky factor of a (nearly) PD matrix, with jitter escalation.

    Tries the matrix as given, then with 1e-10 and 1e-8 on the diagonal
    (scaled by the mean diagonal magnitude) before raising.
    """
    a = np.asarray(mat, dtype=float)
    scale = max(float(np.mean(np.abs(np.diag(a)))), 1.0)
    eye = np.eye(a.shape[0])
    for jitter in CHOLESKY_JITTERS:
        try:
            return np.linalg.cholesky(a + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("covariance not positive definite")


class GaussianDist:
    """Multivariate normal with mean vector and PD covariance.

    The covariance must be symmetric to 1e-10 and admit a Cholesky factor
    (after jitter escalation); the factor is computed once and cached.
    """

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        if self.mean.ndim != 1:
            raise ValueError("mean must be a vector")
        k = self.mean.shape[0]
        if self.cov.shape != (k, k):
            raise ValueError(f"covariance shape {self.cov.shape} does not match dim {k}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10, rtol=0.0):
            raise ValueError("covariance not symmetric")
        self.chol = chol_pd(self.cov)

    @property
    def dim(self):
        return self.mean.shape[0]


def mvn_logpdf_from_residuals(residuals, chol):
    """Log N(r; 0, L L^T) for each residual row, given the Cholesky factor L.

    ``residuals`` has shape (k,) or (P, k); returns a scalar or (P,) array.
    Shared-covariance batches pay for one triangular solve only.
    """
    r = np.asarray(residuals, dtype=float)
    single = r.ndim == 1
    rr = r.reshape(1, -1) if single else r
    # solve L y = r^T  =>  quadratic form = ||y||^2
    y = solve_triangular(chol, rr.T, lower=True, check_finite=False)
    quad = np.sum(y * y, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (rr.shape[1] * LOG_TWO_PI + logdet + quad)
    return float(out[0]) if single else out


def gaussian_logpdf(x, dist):
    """Exact multivariate normal log-density via Cholesky."""
    x = np.asarray(x, dtype=float)
    if x.shape != dist.mean.shape:
        raise ValueError(f"x shape {x.shape} does not match mean shape {dist.mean.shape}")
    return mvn_logpdf_from_residuals(x - dist.mean, dist.chol)


def mvn_sample(dist, rng):
    """Draw mean + L xi with L the Cholesky factor and xi standard normal."""
    xi = rng.standard_normal(dist.dim)
    return dist.mean + dist.chol @ xi


def mvn_sample_batch(means, chol, rng):
    """One draw per row of ``means`` (P, k), sharing the Cholesky factor."""
    xi = rng.standard_normal(means.shape)
    return means + xi @ chol.T


def _check_simplex(weights):
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty vector")
    if np.any(w < 0):
        raise ValueError("negative weight")
    if abs(float(np.sum(w)) - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {np.sum(w)}, not 1")
    return w


def categorical_sample(weights, rng):
    """Inverse-CDF draw from a normalized weight vector, one uniform."""
    w = _check_simplex(weights)
    u = rng.uniform()
    idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
    return min(idx, w.size - 1)


def categorical_sample_batch(weights, n, rng):
    """n independent inverse-CDF draws from one weight vector."""
    w = _check_simplex(weights)
    u = rng.uniform(size=n)
    idx = np.searchsorted(np.cumsum(w), u, side="right")
    return np.minimum(idx, w.size - 1).astype(np.int64)


def categorical_sample_rows(weight_rows, rng):
    """One inverse-CDF draw per row of a (P, K) matrix of simplex rows."""
    w = np.asarray(weight_rows, dtype=float)
    if np.any(w < 0):
        raise ValueError("negative weight")
    cdf = np.cumsum(w, axis=1)
    if np.any(np.abs(cdf[:, -1] - 1.0) > 1e-9):
        raise ValueError("rows must sum to 1")
    u = rng.uniform(size=(w.shape[0], 1))
    idx = np.sum(cdf < u, axis=1)
    return np.minimum(idx, w.shape[1] - 1).astype(np.int64)


def normalize_log_weights(log_w):
    """Normalize log weights; returns (simplex weights, log-mean of weights).

    The second value is log((1/P) sum_p exp(log_w_p)), the per-step factor of
    the marginal-likelihood estimate.
    """
    lw = np.asarray(log_w, dtype=float)
    total = log_sum_exp(lw)
    if total == -np.inf:
        raise NumericalError("all weights are -inf")
    w = np.exp(lw - total)
    w /= np.sum(w)
    return w, total - np.log(lw.size)
